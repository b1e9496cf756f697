"""
View generation: SimCLR-style augmentations, the labelled pretext transforms
(quarter-turn rotations and 3x3 jigsaw permutations) and Lanczos resampling.

A view is always produced in two steps: sample a parameter record t from the
policy and a generator, then apply t deterministically. Re-applying a stored t to
the same input reproduces the view bitwise.
"""

import functools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from scatsimclr import config
from scatsimclr.errors import ConfigurationError, ContractViolation
from scatsimclr.images import write_image

logger = logging.getLogger(__name__)

TRANSFORMS = ("crop", "hflip", "color_jitter", "grayscale", "gaussian_blur", "affine")
PRETEXT_TASKS = ("rotation", "jigsaw")

_RGB_TO_YIQ = np.array([
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
])
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def view_rng(seed, *counters):
    """Counter-based generator: the stream depends only on (seed, counters)."""
    return np.random.default_rng([int(seed), *(int(c) for c in counters)])


# ---------------------------------------------------------------------------
# Lanczos resampling
# ---------------------------------------------------------------------------

def lanczos_kernel(t, lobes=config.LANCZOS_LOBES):
    t = np.asarray(t, dtype=np.float64)
    return np.where(np.abs(t) < lobes, np.sinc(t) * np.sinc(t / lobes), 0.0)


@functools.lru_cache(maxsize=64)
def _lanczos_weights(n_in, n_out, lobes=config.LANCZOS_LOBES):
    scale = n_out / n_in
    support = max(1.0, 1.0 / scale)
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    offsets = centers[:, None] - np.arange(n_in)[None, :]
    weights = lanczos_kernel(offsets / support, lobes)
    weights /= weights.sum(axis=1, keepdims=True)
    weights.flags.writeable = False
    return weights


def lanczos_resize(x, new_h, new_w):
    """Separable Lanczos-3 resize with per-pixel weight normalization, clamped to [0, 1]."""
    if new_h <= 0 or new_w <= 0:
        raise ContractViolation(f"target size must be positive, got {new_h} x {new_w}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.size == 0:
        raise ContractViolation(f"expected a non-empty H x W (x C) image, got shape {x.shape}")
    h, w = x.shape[:2]
    if (h, w) == (new_h, new_w):
        return np.clip(x, 0.0, 1.0)
    rows = _lanczos_weights(h, int(new_h))
    cols = _lanczos_weights(w, int(new_w))
    if x.ndim == 2:
        out = rows @ x @ cols.T
    else:
        out = np.tensordot(rows, x, axes=(1, 0))          # (new_h, w, C)
        out = np.tensordot(out, cols, axes=(1, 1))        # (new_h, C, new_w)
        out = out.transpose(0, 2, 1)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Policy and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugPolicy:
    enabled: frozenset = frozenset(t for t in TRANSFORMS if t != "affine")
    name: str = "default"
    crop_scale: tuple = config.CROP_SCALE
    crop_ratio: tuple = config.CROP_RATIO
    flip_probability: float = config.FLIP_PROBABILITY
    jitter_strength: float = config.JITTER_STRENGTH
    jitter_probability: float = config.JITTER_PROBABILITY
    grayscale_probability: float = config.GRAYSCALE_PROBABILITY
    blur_probability: float = config.BLUR_PROBABILITY
    blur_sigma: tuple = config.BLUR_SIGMA
    blur_kernel_fraction: float = config.BLUR_KERNEL_FRACTION
    affine_degrees: float = config.AFFINE_DEGREES
    affine_translate: float = config.AFFINE_TRANSLATE
    affine_scale: tuple = config.AFFINE_SCALE
    affine_shear: float = config.AFFINE_SHEAR
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - set(TRANSFORMS)
        if unknown:
            raise ConfigurationError(f"unknown augmentations: {sorted(unknown)}")

    @classmethod
    def named(cls, name, seed=0):
        """baseline, default, none, no-<transform> (baseline minus one transform), or a
        +-joined transform list such as crop+color-jitter."""
        if name == "baseline":
            enabled = frozenset(TRANSFORMS)
        elif name == "default":
            enabled = frozenset(t for t in TRANSFORMS if t != "affine")
        elif name == "none":
            enabled = frozenset()
        elif name.startswith("no-") and name[3:].replace("-", "_") in TRANSFORMS:
            dropped = name[3:].replace("-", "_")
            enabled = frozenset(t for t in TRANSFORMS if t != dropped)
        elif "+" in name or name.replace("-", "_") in TRANSFORMS:
            parts = [part.strip().replace("-", "_") for part in name.split("+")]
            unknown = [part for part in parts if part not in TRANSFORMS]
            if unknown:
                raise ConfigurationError(f"unknown transforms {unknown} in policy {name!r}; known: {TRANSFORMS}")
            enabled = frozenset(parts)
        else:
            raise ConfigurationError(f"unknown augmentation policy {name!r}; known: {policy_names()}")
        return cls(enabled=enabled, name=name, seed=seed)

    def with_enabled(self, *transforms):
        return replace(self, enabled=frozenset(transforms), name="custom")


def policy_names():
    return ["baseline", "default", "none"] + [f"no-{t.replace('_', '-')}" for t in TRANSFORMS]


@dataclass
class AugRecord:
    view: np.ndarray
    params: dict
    pretext_label: Optional[int] = None

    def one_hot(self, num_classes):
        if self.pretext_label is None:
            raise ContractViolation("view carries no pretext label")
        row = np.zeros(num_classes)
        row[self.pretext_label] = 1.0
        return row


@dataclass(frozen=True)
class JigsawTable:
    permutations: np.ndarray = field(repr=False)

    def __post_init__(self):
        perms = np.asarray(self.permutations, dtype=np.int64)
        if perms.ndim != 2 or perms.shape[1] != 9:
            raise ContractViolation(f"jigsaw permutations must have shape (n, 9), got {perms.shape}")
        for p in perms:
            if sorted(p.tolist()) != list(range(9)):
                raise ContractViolation(f"{p.tolist()} is not a permutation of 0..8")
        perms.flags.writeable = False
        object.__setattr__(self, "permutations", perms)

    def __len__(self):
        return self.permutations.shape[0]

    def __getitem__(self, index):
        return self.permutations[index]

    def min_hamming(self):
        perms = self.permutations
        if len(perms) < 2:
            return 9
        dist = (perms[:, None, :] != perms[None, :, :]).sum(axis=2)
        np.fill_diagonal(dist, 9)
        return int(dist.min())


def build_jigsaw_table(count=config.JIGSAW_CLASSES, rng=None, candidates=config.JIGSAW_CANDIDATES):
    """Greedy max-min Hamming selection from random candidates; identity is class 0."""
    if count < 1:
        raise ContractViolation(f"jigsaw table needs at least one permutation, got {count}")
    if count > math.factorial(9):
        raise ContractViolation(f"at most 9! permutations exist, asked for {count}")
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = rng.permuted(np.tile(np.arange(9), (candidates, 1)), axis=1)
    chosen = [np.arange(9)]
    nearest = (pool != chosen[0]).sum(axis=1)
    while len(chosen) < count:
        best = int(np.argmax(nearest))
        if nearest[best] == 0:
            raise ContractViolation(f"only {len(chosen)} distinct permutations among the candidates")
        chosen.append(pool[best])
        nearest = np.minimum(nearest, (pool != pool[best]).sum(axis=1))
    table = JigsawTable(np.stack(chosen))
    logger.debug("jigsaw table of %d permutations, min Hamming distance %d", count, table.min_hamming())
    return table


# ---------------------------------------------------------------------------
# Deterministic transforms
# ---------------------------------------------------------------------------

def _check_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[1] == 0 or x.shape[2] == 0:
        raise ContractViolation(f"expected a non-empty H x W x C image, got shape {x.shape}")
    return x


def _luminance(x):
    return x @ np.asarray(config.LUMA_WEIGHTS)


def crop(x, params):
    top, left, height, width = params["top"], params["left"], params["height"], params["width"]
    return lanczos_resize(x[top:top + height, left:left + width], x.shape[0], x.shape[1])


def hflip(x, params):
    return x[:, ::-1].copy() if params["flip"] else x


def _adjust_hue(x, shift):
    yiq = x @ _RGB_TO_YIQ.T
    angle = 2.0 * math.pi * shift
    c, s = math.cos(angle), math.sin(angle)
    i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
    yiq[..., 1] = c * i - s * q
    yiq[..., 2] = s * i + c * q
    return np.clip(yiq @ _YIQ_TO_RGB.T, 0.0, 1.0)


def color_jitter(x, params):
    if not params["applied"]:
        return x
    if x.shape[2] != 3:
        raise ContractViolation("color jitter needs three color planes")
    for op in params["order"]:
        if op == "brightness":
            x = np.clip(x * params["brightness"], 0.0, 1.0)
        elif op == "contrast":
            mean = _luminance(x).mean()
            x = np.clip((x - mean) * params["contrast"] + mean, 0.0, 1.0)
        elif op == "saturation":
            gray = _luminance(x)[..., None]
            x = np.clip((x - gray) * params["saturation"] + gray, 0.0, 1.0)
        elif op == "hue":
            x = _adjust_hue(x, params["hue"])
    return x


def grayscale(x, params=None):
    if params is not None and not params["applied"]:
        return x
    if x.shape[2] != 3:
        raise ContractViolation("grayscale needs three color planes")
    gray = _luminance(x)
    return np.repeat(gray[..., None], 3, axis=2)


def gaussian_blur(x, params):
    if not params["applied"]:
        return x
    sigma = params["sigma"]
    truncate = params["radius"] / sigma
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0.0), truncate=truncate, mode="reflect")


def affine(x, params):
    h, w = x.shape[:2]
    angle = math.radians(params["angle"])
    shear = math.radians(params["shear"])
    scale = params["scale"]
    rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    shearing = np.array([[1.0, 0.0], [math.tan(shear), 1.0]])
    forward = scale * rotation @ shearing
    inverse = np.linalg.inv(forward)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array(params["translate"])
    offset = center - inverse @ (center + shift)
    planes = [
        ndimage.affine_transform(x[:, :, c], inverse, offset=offset, order=1, mode="reflect")
        for c in range(x.shape[2])
    ]
    return np.clip(np.stack(planes, axis=2), 0.0, 1.0)


def rotate90(x, k):
    """Exact quarter-turn rotation (counter-clockwise k times); no interpolation."""
    x = np.asarray(x)
    if x.shape[0] != x.shape[1]:
        raise ContractViolation(f"rotation needs a square image, got {x.shape[:2]}")
    if k not in (0, 1, 2, 3):
        raise ContractViolation(f"rotation class must be in 0..3, got {k}")
    return np.rot90(x, k, axes=(0, 1)).copy()


def _slot_bounds(side):
    return [round(i * side / 3) for i in range(4)]


def jigsaw(x, perm_index, table, patch_size=None):
    """Permute the 3x3 grid of non-overlapping patches; slot p receives patch table[perm_index][p].

    Each patch is Lanczos-resized to its destination slot (or to patch_size x patch_size).
    """
    if not 0 <= perm_index < len(table):
        raise ContractViolation(f"jigsaw index {perm_index} outside [0, {len(table)})")
    x = _check_image(x)
    perm = table[perm_index]
    rows_in, cols_in = _slot_bounds(x.shape[0]), _slot_bounds(x.shape[1])
    if patch_size is None:
        rows_out, cols_out = rows_in, cols_in
    else:
        rows_out = cols_out = [i * patch_size for i in range(4)]
    out = np.empty((rows_out[3], cols_out[3], x.shape[2]))
    for pos in range(9):
        sr, sc = divmod(int(perm[pos]), 3)
        dr, dc = divmod(pos, 3)
        patch = x[rows_in[sr]:rows_in[sr + 1], cols_in[sc]:cols_in[sc + 1]]
        out[rows_out[dr]:rows_out[dr + 1], cols_out[dc]:cols_out[dc + 1]] = lanczos_resize(
            patch, rows_out[dr + 1] - rows_out[dr], cols_out[dc + 1] - cols_out[dc]
        )
    return out


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_crop(shape, policy, rng):
    h, w = shape[:2]
    area = h * w
    log_lo, log_hi = math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*policy.crop_scale)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return {"top": top, "left": left, "height": ch, "width": cw}
    return {"top": 0, "left": 0, "height": h, "width": w}


def sample_color_jitter(policy, rng):
    s = policy.jitter_strength
    applied = bool(rng.uniform() < policy.jitter_probability)
    order = [str(op) for op in rng.permutation(["brightness", "contrast", "saturation", "hue"])]
    return {
        "applied": applied,
        "brightness": float(rng.uniform(max(0.0, 1 - 0.8 * s), 1 + 0.8 * s)),
        "contrast": float(rng.uniform(max(0.0, 1 - 0.8 * s), 1 + 0.8 * s)),
        "saturation": float(rng.uniform(max(0.0, 1 - 0.8 * s), 1 + 0.8 * s)),
        "hue": float(rng.uniform(-0.2 * s, 0.2 * s)),
        "order": order,
    }


def sample_blur(shape, policy, rng):
    applied = bool(rng.uniform() < policy.blur_probability)
    kernel = max(3, int(policy.blur_kernel_fraction * min(shape[:2])))
    return {
        "applied": applied,
        "sigma": float(rng.uniform(*policy.blur_sigma)),
        "radius": kernel // 2,
    }


def sample_affine(shape, policy, rng):
    h, w = shape[:2]
    t = policy.affine_translate
    return {
        "angle": float(rng.uniform(-policy.affine_degrees, policy.affine_degrees)),
        "translate": [float(rng.uniform(-t, t) * h), float(rng.uniform(-t, t) * w)],
        "scale": float(rng.uniform(*policy.affine_scale)),
        "shear": float(rng.uniform(-policy.affine_shear, policy.affine_shear)),
    }


def sample_params(shape, policy, rng, pretext=None, table=None):
    """Draw a full parameter record t for one view."""
    t = {}
    if "crop" in policy.enabled:
        t["crop"] = sample_crop(shape, policy, rng)
    if "hflip" in policy.enabled:
        t["hflip"] = {"flip": bool(rng.uniform() < policy.flip_probability)}
    if "color_jitter" in policy.enabled:
        t["color_jitter"] = sample_color_jitter(policy, rng)
    if "grayscale" in policy.enabled:
        t["grayscale"] = {"applied": bool(rng.uniform() < policy.grayscale_probability)}
    if "gaussian_blur" in policy.enabled:
        t["gaussian_blur"] = sample_blur(shape, policy, rng)
    if "affine" in policy.enabled:
        t["affine"] = sample_affine(shape, policy, rng)
    if pretext == "rotation":
        t["pretext"] = {"task": "rotation", "label": int(rng.integers(4))}
    elif pretext == "jigsaw":
        if table is None:
            raise ContractViolation("jigsaw pretext needs a jigsaw table")
        t["pretext"] = {"task": "jigsaw", "label": int(rng.integers(len(table)))}
    elif pretext is not None:
        raise ConfigurationError(f"unknown pretext task {pretext!r}")
    return t


_APPLY = {
    "crop": crop,
    "hflip": hflip,
    "color_jitter": color_jitter,
    "grayscale": grayscale,
    "gaussian_blur": gaussian_blur,
    "affine": affine,
}


def apply_params(x, t, table=None):
    """Apply a parameter record; a deterministic function of (x, t)."""
    view = _check_image(x)
    for name in TRANSFORMS:
        if name in t:
            view = _APPLY[name](view, t[name])
    pretext = t.get("pretext")
    if pretext is not None:
        if pretext["task"] == "rotation":
            view = rotate90(view, pretext["label"])
        else:
            view = jigsaw(view, pretext["label"], table)
    return view


def make_view(x, policy, rng, pretext=None, table=None):
    t = sample_params(np.shape(x), policy, rng, pretext, table)
    view = apply_params(x, t, table)
    label = t["pretext"]["label"] if "pretext" in t else None
    return AugRecord(view=view, params=t, pretext_label=label)


def make_views(x, policy, rng, pretext=None, table=None, pretext_views="both"):
    """Two independently sampled views of x.

    With a pretext task each view gets exactly one pretext transform; in
    "single" mode only the first view does.
    """
    x = _check_image(x)
    first = make_view(x, policy, rng, pretext, table)
    second = make_view(x, policy, rng, pretext if pretext_views == "both" else None, table)
    return first, second


def preview(x, policy, seed, out_dir, pretext="rotation", table=None):
    """Write both views, a pretext view and a text dump of their parameters."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = view_rng(seed, 0)
    first, second = make_views(x, policy, rng)
    if pretext == "jigsaw" and table is None:
        table = build_jigsaw_table(rng=view_rng(seed, 1))
    pretext_view = make_view(x, AugPolicy.named("none"), rng, pretext or "rotation", table)
    written = [
        write_image(first.view, out / "view1.png"),
        write_image(second.view, out / "view2.png"),
        write_image(pretext_view.view, out / "pretext.png"),
    ]
    dump = {
        "policy": policy.name,
        "seed": seed,
        "view1": first.params,
        "view2": second.params,
        "pretext": pretext_view.params,
    }
    params_path = out / "params.txt"
    with open(params_path, "w", encoding="utf-8") as f:
        json.dump(dump, f, indent=2, sort_keys=True)
        f.write("\n")
    written.append(params_path)
    return written
