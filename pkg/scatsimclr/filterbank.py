"""
Morlet filter bank for the 2D scattering transform.

Filters are built directly in the frequency domain on a periodic grid. A band-pass
filter psi_{j,l} is an anisotropic Gaussian bump centred at frequency xi / 2**j in
direction 2*pi*l/L, minus a scaled Gaussian at the origin so that its mean is zero
(the admissibility correction). The low-pass phi is an isotropic Gaussian with
unit gain at the zero frequency.

Every filter is also stored at each coarser resolution r it is applied at: the
resolution-r version is the sum of the 4**r frequency aliases, i.e. the spectrum of
the spatial filter subsampled by 2**r (times 4**r).
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from scatsimclr import config
from scatsimclr.errors import ConfigurationError

logger = logging.getLogger(__name__)


def is_power_of_two(n):
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class FilterBankConfig:
    J: int = config.SCALES
    L: int = config.ORIENTATIONS
    size: int = 128

    def __post_init__(self):
        if int(self.J) != self.J or self.J < 1:
            raise ConfigurationError(f"J must be an integer >= 1, got {self.J}")
        if int(self.L) != self.L or self.L < 1:
            raise ConfigurationError(f"L must be an integer >= 1, got {self.L}")
        if not is_power_of_two(self.size):
            raise ConfigurationError(f"filter size must be a power of two, got {self.size}")
        if 2 ** self.J > self.size:
            raise ConfigurationError(
                f"2**J = {2 ** self.J} exceeds the filter size {self.size}"
            )
        lo_j, hi_j = config.SWEPT_SCALES
        lo_l, hi_l = config.SWEPT_ORIENTATIONS
        if not lo_j <= self.J <= hi_j:
            warnings.warn(f"J={self.J} is outside the swept range [{lo_j}, {hi_j}]", UserWarning)
        if not lo_l <= self.L <= hi_l:
            warnings.warn(f"L={self.L} is outside the swept range [{lo_l}, {hi_l}]", UserWarning)

    @property
    def slant(self):
        return config.MORLET_SLANT_NUMERATOR / self.L

    def angle(self, theta):
        """Orientation angle of index theta; orientations cover the full circle."""
        return 2.0 * math.pi * theta / self.L


@dataclass(frozen=True)
class FilterBank:
    """Immutable set of frequency-domain filters.

    bandpass[(j, theta)][r] is psi_{j,theta} at resolution r (0 <= r <= j),
    lowpass[r] is phi_J at resolution r (0 <= r <= J).
    """

    config: FilterBankConfig
    bandpass: dict
    lowpass: tuple
    scale_factor: float = 1.0
    _stacks: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def J(self):
        return self.config.J

    @property
    def L(self):
        return self.config.L

    @property
    def size(self):
        return self.config.size

    def psi(self, j, theta, resolution=0):
        return self.bandpass[(j, theta)][resolution]

    def phi(self, resolution=0):
        return self.lowpass[resolution]

    def psi_stack(self, j, resolution):
        """All L orientations of scale j at one resolution, shape (L, n, n)."""
        return self._stacks[(j, resolution)]


def _rotated_gaussian_hat(w1, w2, sigma, angle, xi, slant):
    """Periodized spectrum of a unit-mass anisotropic Gaussian modulated at xi."""
    c, s = math.cos(angle), math.sin(angle)
    radius = config.PERIODIZATION_RADIUS
    total = np.zeros_like(w1)
    for k1 in range(-radius, radius + 1):
        for k2 in range(-radius, radius + 1):
            a1 = w1 + 2.0 * math.pi * k1
            a2 = w2 + 2.0 * math.pi * k2
            u = c * a1 + s * a2 - xi
            v = -s * a1 + c * a2
            total += np.exp(-0.5 * sigma * sigma * (u * u + v * v / (slant * slant)))
    return total


def morlet_hat(size, sigma, angle, xi, slant):
    """Frequency-domain Morlet wavelet with exactly zero mean."""
    w = 2.0 * math.pi * np.fft.fftfreq(size)
    w1, w2 = np.meshgrid(w, w, indexing="ij")
    gabor = _rotated_gaussian_hat(w1, w2, sigma, angle, xi, slant)
    envelope = _rotated_gaussian_hat(w1, w2, sigma, angle, 0.0, slant)
    beta = gabor[0, 0] / envelope[0, 0]
    return (gabor - beta * envelope).astype(np.complex128)


def gaussian_hat(size, sigma):
    w = 2.0 * math.pi * np.fft.fftfreq(size)
    w1, w2 = np.meshgrid(w, w, indexing="ij")
    g = _rotated_gaussian_hat(w1, w2, sigma, 0.0, 0.0, 1.0)
    return g / g[0, 0]


def periodize(hat, factor):
    """Sum the factor**2 frequency aliases of a spectrum onto the coarse grid."""
    if factor == 1:
        return hat.copy()
    n0, n1 = hat.shape
    m0, m1 = n0 // factor, n1 // factor
    return hat.reshape(factor, m0, factor, m1).sum(axis=(0, 2))


def reflect_frequencies(hat):
    """hat(-omega) on the periodic grid."""
    return np.roll(np.flip(hat, axis=(-2, -1)), 1, axis=(-2, -1))


def _bandpass_energy(psis):
    energy = np.zeros(psis[0].shape)
    for psi in psis:
        energy += np.abs(psi) ** 2 + np.abs(reflect_frequencies(psi)) ** 2
    return 0.5 * energy


def build_filter_bank(cfg):
    """Construct the full-resolution filters and their coarse-resolution aliases."""
    if not isinstance(cfg, FilterBankConfig):
        raise ConfigurationError("build_filter_bank expects a FilterBankConfig")
    J, L, size = cfg.J, cfg.L, cfg.size

    raw = {}
    for j in range(J):
        sigma = config.MORLET_SIGMA * 2 ** j
        xi = config.MORLET_XI / 2 ** j
        for theta in range(L):
            raw[(j, theta)] = morlet_hat(size, sigma, cfg.angle(theta), xi, cfg.slant)
    phi = gaussian_hat(size, config.MORLET_SIGMA * 2 ** (J - 1))

    # One common factor keeps |phi|^2 + bandpass energy <= 1 on the whole grid.
    energy = _bandpass_energy(list(raw.values()))
    mask = energy > 1e-12
    headroom = (1.0 - phi[mask] ** 2) / energy[mask]
    scale = math.sqrt(min(1.0, float(headroom.min()))) if headroom.size else 1.0
    logger.debug("filter bank J=%d L=%d size=%d: band-pass scale %.6f", J, L, size, scale)

    bandpass = {}
    for key, hat in raw.items():
        hat = hat * scale
        levels = tuple(_frozen(periodize(hat, 2 ** r)) for r in range(key[0] + 1))
        bandpass[key] = levels
    lowpass = tuple(_frozen(periodize(phi, 2 ** r)) for r in range(J + 1))

    stacks = {}
    for j in range(J):
        for r in range(j + 1):
            stacks[(j, r)] = _frozen(np.stack([bandpass[(j, t)][r] for t in range(L)]))

    return FilterBank(config=cfg, bandpass=bandpass, lowpass=lowpass,
                      scale_factor=scale, _stacks=stacks)


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def littlewood_paley_sum(bank):
    """|phi(w)|^2 + 1/2 sum_{j,theta} (|psi(w)|^2 + |psi(-w)|^2) over the full grid."""
    psis = [levels[0] for levels in bank.bandpass.values()]
    return np.abs(bank.phi(0)) ** 2 + _bandpass_energy(psis)


def spatial_filter(hat):
    """Centred space-domain view of a frequency-domain filter."""
    return np.fft.fftshift(np.fft.ifft2(hat))


def to_gray(values, signed):
    peak = float(np.max(np.abs(values))) or 1.0
    if signed:
        scaled = values / peak * 127.5 + 127.5
    else:
        scaled = values / peak * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def display_crop(image, side):
    n = image.shape[0]
    if side >= n:
        return image
    start = (n - side) // 2
    return image[start:start + side, start:start + side]


def filter_mosaic(bank, tile=None):
    """Uint8 mosaic: low-pass top-left, then real parts (left) | imaginary parts (right).

    Rows are scales, columns are orientations.
    """
    J, L = bank.J, bank.L
    tile = tile or min(bank.size, 2 ** (J + 3))
    gap = 2
    width = 2 * L * (tile + gap) + gap
    height = (J + 1) * (tile + gap) + gap
    mosaic = np.full((height, width), 255, dtype=np.uint8)

    def place(row, col, img):
        y = gap + row * (tile + gap)
        x = gap + col * (tile + gap)
        mosaic[y:y + tile, x:x + tile] = display_crop(img, tile)

    place(0, 0, to_gray(spatial_filter(bank.phi(0)).real, signed=False))
    for j in range(J):
        for theta in range(L):
            psi = spatial_filter(bank.psi(j, theta))
            place(j + 1, theta, to_gray(psi.real, signed=True))
            place(j + 1, L + theta, to_gray(psi.imag, signed=True))
    return mosaic


def dump_filters(bank, path, mosaic=False):
    """Write one PNG per filter part (space domain) plus a plain-text manifest.

    Returns the list of written image paths.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    lines = ["file\tkind\tj\ttheta\tpart"]

    phi_name = "phi.png"
    Image.fromarray(to_gray(spatial_filter(bank.phi(0)).real, signed=False)).save(out / phi_name)
    written.append(out / phi_name)
    lines.append(f"{phi_name}\tlowpass\t{bank.J}\t-\treal")

    for j in range(bank.J):
        for theta in range(bank.L):
            psi = spatial_filter(bank.psi(j, theta))
            for part, values in (("real", psi.real), ("imag", psi.imag)):
                name = f"psi_j{j}_theta{theta:02d}_{part}.png"
                Image.fromarray(to_gray(values, signed=True)).save(out / name)
                written.append(out / name)
                lines.append(f"{name}\tbandpass\t{j}\t{theta}\t{part}")

    with open(out / "manifest.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")

    if mosaic:
        Image.fromarray(filter_mosaic(bank)).save(out / "mosaic.png")

    logger.info("wrote %d filter images to %s", len(written), out)
    return written
