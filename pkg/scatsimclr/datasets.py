"""
Image datasets: class-folder or labels.csv directories decoded lazily with Pillow,
and deterministic synthetic generators for smoke runs and property checks.

Accepted directory layouts:

    root/<class>/<image>            class-named subdirectories
    root/labels.csv (+ classes.txt) flat directory, header "path,label"
    root/<image>                    flat directory, unlabeled
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from scatsimclr import config
from scatsimclr.augment import lanczos_resize
from scatsimclr.errors import ConfigurationError, ContractViolation, DatasetError
from scatsimclr.images import read_image

logger = logging.getLogger(__name__)

SYNTH_KINDS = ("oriented-textures", "two-blob-separable", "noise")


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    image_size: int
    class_names: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def report(self):
        lines = [f"root: {self.root}", f"images: {len(self.entries)}", f"failures: {len(self.failures)}"]
        lines += [f"  {path}: {reason}" for path, reason in self.failures]
        return "\n".join(lines) + "\n"


class Dataset:
    """Indexable H x W x 3 images in [0, 1] with optional integer labels."""

    name = "dataset"

    def __len__(self):
        raise NotImplementedError

    def __getitem__(self, index):
        raise NotImplementedError

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def labels(self):
        return None

    @property
    def class_names(self):
        return []

    @property
    def num_classes(self):
        return len(self.class_names)

    def images(self, indices):
        return [self[int(i)] for i in indices]


class FolderDataset(Dataset):
    def __init__(self, manifest):
        self.manifest = manifest
        self.name = str(manifest.root)

    def __len__(self):
        return len(self.manifest.entries)

    def __getitem__(self, index):
        path, _ = self.manifest.entries[index]
        image = read_image(path)
        size = self.manifest.image_size
        if image.shape[:2] != (size, size):
            image = lanczos_resize(image, size, size)
        return image

    @property
    def labels(self):
        if not self.manifest.entries or self.manifest.entries[0][1] is None:
            return None
        return np.array([label for _, label in self.manifest.entries], dtype=np.int64)

    @property
    def class_names(self):
        return list(self.manifest.class_names)

    def paths(self):
        return [path for path, _ in self.manifest.entries]


class ArrayDataset(Dataset):
    def __init__(self, images, labels=None, class_names=None, name="arrays"):
        self._images = [np.asarray(img, dtype=np.float64) for img in images]
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self._class_names = list(class_names or [])
        self.name = name

    def __len__(self):
        return len(self._images)

    def __getitem__(self, index):
        return self._images[index]

    @property
    def labels(self):
        return self._labels

    @property
    def class_names(self):
        return list(self._class_names)


def _is_image(path):
    return path.is_file() and path.suffix.lower() in config.IMAGE_SUFFIXES


def _readable(path):
    try:
        with Image.open(path) as img:
            img.verify()
    except (OSError, SyntaxError, ValueError) as e:
        return str(e) or type(e).__name__
    return None


def _read_labels_csv(root):
    classes_file = root / "classes.txt"
    declared = None
    if classes_file.exists():
        declared = [line.strip() for line in classes_file.read_text(encoding="utf-8").splitlines() if line.strip()]

    rows = []
    with open(root / "labels.csv", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise DatasetError(f"{root / 'labels.csv'}: header must be 'path,label'")
        for number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetError(f"labels.csv row {number}: expected 2 fields, got {len(row)}")
            rows.append((number, row[0].strip(), row[1].strip()))

    class_names = declared if declared is not None else sorted({label for _, _, label in rows})
    index = {name: i for i, name in enumerate(class_names)}
    entries = []
    for number, rel, label in rows:
        if label not in index:
            raise DatasetError(f"labels.csv row {number}: unknown class {label!r} for {rel}")
        entries.append((root / rel, index[label]))
    return sorted(entries, key=lambda e: str(e[0])), class_names


def load_dataset(directory, target_size=96):
    """Scan a dataset directory; images are decoded and resized on access."""
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if target_size < 1:
        raise ContractViolation(f"target size must be positive, got {target_size}")

    if (root / "labels.csv").exists():
        entries, class_names = _read_labels_csv(root)
    else:
        subdirs = sorted(p for p in root.iterdir() if p.is_dir())
        if subdirs:
            class_names = [p.name for p in subdirs]
            entries = [
                (path, label)
                for label, sub in enumerate(subdirs)
                for path in sorted(p for p in sub.iterdir() if _is_image(p))
            ]
        else:
            class_names = []
            entries = [(path, None) for path in sorted(p for p in root.iterdir() if _is_image(p))]

    failures = []
    for path, _ in entries:
        reason = "missing" if not path.exists() else _readable(path)
        if reason is not None:
            failures.append((path, reason))
    manifest = DatasetManifest(root=root, entries=entries, image_size=target_size,
                               class_names=class_names, failures=failures)

    if not entries:
        logger.warning("dataset %s contains no images", root)
        warnings.warn(f"dataset {root} contains no images", UserWarning)
        return FolderDataset(manifest)

    if failures:
        rate = len(failures) / len(entries)
        if rate > config.MAX_LOAD_FAILURE_RATE:
            raise DatasetError(
                f"{len(failures)} of {len(entries)} images unreadable ({rate:.1%}):\n" + manifest.report()
            )
        logger.warning("skipping %d unreadable images in %s", len(failures), root)
        bad = {path for path, _ in failures}
        manifest.entries = [e for e in entries if e[0] not in bad]

    logger.info("loaded %s: %d images, %d classes", root, len(manifest.entries), len(class_names))
    return FolderDataset(manifest)


def write_load_report(dataset, path):
    path = Path(path)
    path.write_text(dataset.manifest.report(), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def _shading(size):
    rows = np.linspace(1.0, 0.55, size)[:, None, None]
    return np.broadcast_to(rows, (size, size, 1))


def _oriented_texture(label, size, rng):
    angle = label * math.pi / 4.0 + rng.uniform(-0.1, 0.1)
    freq = rng.uniform(0.12, 0.3) * 2.0 * math.pi
    phase = rng.uniform(0.0, 2.0 * math.pi)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.cos(freq * (x * math.cos(angle) + y * math.sin(angle)) + phase)
    tint = rng.uniform(0.6, 1.0, size=3)
    image = 0.5 + 0.35 * wave[..., None] * tint
    image = image * _shading(size) + rng.normal(0.0, 0.03, size=(size, size, 3))
    return np.clip(image, 0.0, 1.0)


def _blob(label, size, rng):
    # Two clusters: dark and smooth against bright and grainy. The low-pass channel
    # carries the brightness, every wavelet channel the grain, at every position.
    level, grain = (0.7, 0.12) if label == 1 else (0.3, 0.02)
    image = level + rng.normal(0.0, grain, size=(size, size, 3))
    return np.clip(image, 0.0, 1.0)


def synth_dataset(kind, n, seed=0, size=32):
    """Deterministic synthetic dataset; class k is assigned to samples i with i % K == k."""
    if n <= 0:
        raise ContractViolation(f"synthetic dataset size must be positive, got {n}")
    rng = np.random.default_rng([seed, SYNTH_KINDS.index(kind)] if kind in SYNTH_KINDS else seed)
    if kind == "oriented-textures":
        labels = np.arange(n) % 4
        images = [_oriented_texture(int(c), size, rng) for c in labels]
        names = ["0deg", "45deg", "90deg", "135deg"]
    elif kind == "two-blob-separable":
        labels = np.arange(n) % 2
        images = [_blob(int(c), size, rng) for c in labels]
        names = ["dark", "bright"]
    elif kind == "noise":
        images = [rng.uniform(0.0, 1.0, size=(size, size, 3)) for _ in range(n)]
        return ArrayDataset(images, name=f"synth:{kind}:{n}")
    else:
        raise ConfigurationError(f"unknown synthetic dataset {kind!r}; known: {', '.join(SYNTH_KINDS)}")
    return ArrayDataset(images, labels, names, name=f"synth:{kind}:{n}")


def open_data(spec, image_size=96, seed=0):
    """A dataset directory, or ``synth:<kind>:<n>`` for a generated one."""
    spec = str(spec)
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if len(parts) != 3 or not parts[2].isdigit():
            raise ConfigurationError(f"synthetic data must be given as synth:<kind>:<n>, got {spec!r}")
        return synth_dataset(parts[1], int(parts[2]), seed=seed, size=image_size)
    return load_dataset(spec, image_size)


def split_indices(count, test_fraction, rng):
    """Shuffled (train, held-out) index arrays; at least one sample on each side when count >= 2."""
    order = rng.permutation(count)
    held = int(round(count * test_fraction))
    if count >= 2:
        held = min(max(held, 1), count - 1)
    return np.sort(order[held:]), np.sort(order[:held])
