"""
Windowed 2D scattering transform (orders 0, 1 and 2) on top of a FilterBank.

    S0                  = subsample(x * phi_J)
    S1(j1,t1)           = subsample(|x * psi_{j1,t1}| * phi_J)
    S2(j1,t1,j2,t2)     = subsample(||x * psi_{j1,t1}| * psi_{j2,t2}| * phi_J),  j2 > j1

All convolutions are periodic and computed in the frequency domain. By default each
stage runs at the coarsest resolution its band-pass filter allows (subsampling by
2**j after a scale-j filter); ScatterConfig(oversample=True) keeps every stage at
full resolution and only subsamples the outputs.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft

from scatsimclr import config
from scatsimclr.augment import lanczos_resize
from scatsimclr.errors import ConfigurationError, ContractViolation
from scatsimclr.featurefile import FeatureWriter

logger = logging.getLogger(__name__)

PAD_POLICIES = ("resize", "zero-pad")


@dataclass(frozen=True)
class ScatterConfig:
    J: int = config.SCALES
    L: int = config.ORIENTATIONS
    order: int = config.SCATTER_ORDER
    pad_policy: str = config.PAD_POLICY
    oversample: bool = False

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ConfigurationError(f"scattering order must be 1 or 2, got {self.order}")
        if self.pad_policy not in PAD_POLICIES:
            raise ConfigurationError(
                f"pad_policy must be one of {PAD_POLICIES}, got {self.pad_policy!r}"
            )


@dataclass(frozen=True)
class ScatteringPath:
    order: int
    j1: Optional[int] = None
    theta1: Optional[int] = None
    j2: Optional[int] = None
    theta2: Optional[int] = None
    plane: int = 0

    def describe(self):
        fields = [self.order, self.j1, self.theta1, self.j2, self.theta2]
        return "\t".join("-" if v is None else str(v) for v in fields)


@dataclass(frozen=True)
class ScatteringCoeffs:
    """Scattering channels of one image, color planes stacked in R, G, B order."""

    data: np.ndarray
    paths: tuple

    @property
    def shape(self):
        return self.data.shape


def channel_count(J, L, order=2):
    """Channels per color plane: 1 + J*L (+ L^2 * J(J-1)/2 at order 2)."""
    count = 1 + J * L
    if order == 2:
        count += L * L * J * (J - 1) // 2
    return count


def scattering_paths(J, L, order=2, plane=0):
    paths = [ScatteringPath(order=0, plane=plane)]
    paths.extend(
        ScatteringPath(order=1, j1=j1, theta1=t1, plane=plane)
        for j1 in range(J) for t1 in range(L)
    )
    if order == 2:
        paths.extend(
            ScatteringPath(order=2, j1=j1, theta1=t1, j2=j2, theta2=t2, plane=plane)
            for j1 in range(J)
            for t1 in range(L)
            for j2 in range(j1 + 1, J)
            for t2 in range(L)
        )
    return paths


def padded_side(height, width):
    side = max(height, width)
    return 1 << (side - 1).bit_length()


def prepare_plane(plane, cfg):
    """Bring a single-channel image to a square power-of-two grid."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise ContractViolation(f"expected a non-empty 2D image, got shape {plane.shape}")
    h, w = plane.shape
    n = padded_side(h, w)
    if (h, w) == (n, n):
        return plane
    if cfg.pad_policy == "resize":
        return lanczos_resize(plane, n, n)
    padded = np.zeros((n, n), dtype=np.float64)
    padded[:h, :w] = plane
    return padded


def subsample_fourier(x_hat, factor):
    """Spectrum of the spatially subsampled signal (mean of the frequency aliases)."""
    if factor == 1:
        return x_hat
    *lead, n0, n1 = x_hat.shape
    folded = x_hat.reshape(*lead, factor, n0 // factor, factor, n1 // factor)
    return folded.mean(axis=(-4, -2))


def _lowpass_output(u_hat, bank, resolution, cfg):
    J = cfg.J
    if cfg.oversample:
        full = scipy.fft.ifft2(u_hat * bank.phi(0)).real
        return full[..., :: 2 ** J, :: 2 ** J]
    return scipy.fft.ifft2(subsample_fourier(u_hat * bank.phi(resolution), 2 ** (J - resolution))).real


def _scatter_planes(planes, bank, cfg):
    """Scatter a stack of prepared planes (P, N, N) -> (P, channels, N/2^J, N/2^J)."""
    J, L = cfg.J, cfg.L
    x_hat = scipy.fft.fft2(planes)

    blocks = [_lowpass_output(x_hat, bank, 0, cfg)[:, None]]
    second = []
    for j1 in range(J):
        if cfg.oversample:
            u1_hat = x_hat[:, None] * bank.psi_stack(j1, 0)[None]
            res1 = 0
        else:
            u1_hat = subsample_fourier(x_hat[:, None] * bank.psi_stack(j1, 0)[None], 2 ** j1)
            res1 = j1
        u1_hat = scipy.fft.fft2(np.abs(scipy.fft.ifft2(u1_hat)))
        blocks.append(_lowpass_output(u1_hat, bank, res1, cfg))

        if cfg.order == 2 and j1 + 1 < J:
            # one theta1 at a time bounds the size of the (P, L, n, n) temporaries
            for t1 in range(L):
                for j2 in range(j1 + 1, J):
                    if cfg.oversample:
                        u2_hat = u1_hat[:, t1, None] * bank.psi_stack(j2, 0)[None]
                        res2 = 0
                    else:
                        u2_hat = subsample_fourier(
                            u1_hat[:, t1, None] * bank.psi_stack(j2, j1)[None], 2 ** (j2 - j1)
                        )
                        res2 = j2
                    u2_hat = scipy.fft.fft2(np.abs(scipy.fft.ifft2(u2_hat)))
                    second.append(_lowpass_output(u2_hat, bank, res2, cfg))
    blocks.extend(second)
    return np.concatenate(blocks, axis=1)


def _check_bank(bank, cfg, side):
    if bank.J != cfg.J or bank.L != cfg.L:
        raise ContractViolation(
            f"filter bank (J={bank.J}, L={bank.L}) does not match scatter config (J={cfg.J}, L={cfg.L})"
        )
    if side != bank.size:
        raise ContractViolation(
            f"prepared image side {side} does not match filter bank size {bank.size}"
        )


def scatter(image, bank, cfg=None):
    """Scattering coefficients of a single-channel image."""
    cfg = cfg or ScatterConfig(J=bank.J, L=bank.L)
    plane = prepare_plane(image, cfg)
    _check_bank(bank, cfg, plane.shape[0])
    data = _scatter_planes(plane[None], bank, cfg)[0]
    return ScatteringCoeffs(data=data, paths=tuple(scattering_paths(cfg.J, cfg.L, cfg.order)))


def scatter_color(image, bank, cfg=None):
    """Scatter each color plane independently and stack the outputs in R, G, B order."""
    cfg = cfg or ScatterConfig(J=bank.J, L=bank.L)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation(f"expected an H x W x 3 image, got shape {image.shape}")
    planes = np.stack([prepare_plane(image[:, :, c], cfg) for c in range(3)])
    _check_bank(bank, cfg, planes.shape[-1])
    data = _scatter_planes(planes, bank, cfg)
    data = data.reshape(-1, *data.shape[-2:])
    paths = []
    for c in range(3):
        paths.extend(scattering_paths(cfg.J, cfg.L, cfg.order, plane=c))
    return ScatteringCoeffs(data=data, paths=tuple(paths))


def scatter_batch(images, bank, cfg=None, workers=1):
    """scatter_color over a batch; results do not depend on the worker count."""
    images = list(images)
    if not images:
        return []
    shapes = {np.shape(img) for img in images}
    if len(shapes) != 1:
        raise ContractViolation(f"batch mixes image shapes: {sorted(shapes)}")
    if workers <= 1 or len(images) == 1:
        return [scatter_color(img, bank, cfg) for img in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda img: scatter_color(img, bank, cfg), images))


def stack_coefficients(coeffs):
    """Batch array (B, channels, h, w) from a list of ScatteringCoeffs."""
    return np.stack([c.data for c in coeffs])


def export_coefficients(images, bank, cfg, path, workers=1, chunk=64):
    """Stream the scattering coefficients of an image iterable to a feature file.

    The sidecar manifest lists one path descriptor per channel.
    """
    channels = 3 * channel_count(cfg.J, cfg.L, cfg.order)
    side = bank.size // 2 ** cfg.J
    manifest = ["channel\tplane\torder\tj1\ttheta1\tj2\ttheta2"]
    for index, p in enumerate(
        p for c in range(3) for p in scattering_paths(cfg.J, cfg.L, cfg.order, plane=c)
    ):
        manifest.append(f"{index}\t{p.plane}\t{p.describe()}")

    count = 0
    with FeatureWriter(path, channels, side, side, manifest=manifest) as writer:
        batch = []
        for image in images:
            batch.append(image)
            if len(batch) == chunk:
                writer.write(stack_coefficients(scatter_batch(batch, bank, cfg, workers)))
                count += len(batch)
                batch = []
        if batch:
            writer.write(stack_coefficients(scatter_batch(batch, bank, cfg, workers)))
            count += len(batch)
    logger.info("exported scattering coefficients of %d images to %s", count, path)
    return count
