"""
Binary feature files.

Layout: magic (8 bytes), version (u32), count, channels, height, width (u64 each),
then count*channels*height*width little-endian float32 values in row-major order.
A sidecar text manifest `<file>.paths.txt` describes the channels.
"""

import struct
from pathlib import Path

import numpy as np

from scatsimclr import config
from scatsimclr.errors import FeatureFileError

HEADER = struct.Struct("<8sI4Q")


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".paths.txt")


class FeatureWriter:
    """Streaming writer; the row count in the header is fixed up on close."""

    def __init__(self, path, channels, height, width, manifest=None):
        self.path = Path(path)
        self.dims = (int(channels), int(height), int(width))
        self.count = 0
        self.manifest = manifest
        self._file = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "wb")
        self._file.write(self._header())
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def _header(self):
        return HEADER.pack(config.FEATURE_MAGIC, config.FEATURE_VERSION, self.count, *self.dims)

    def write(self, rows):
        rows = np.asarray(rows)
        if rows.ndim == 2:
            rows = rows.reshape(rows.shape[0], rows.shape[1], 1, 1)
        if rows.shape[1:] != self.dims:
            raise FeatureFileError(f"rows of shape {rows.shape[1:]} do not match file dims {self.dims}")
        self._file.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
        self.count += rows.shape[0]

    def close(self):
        if self._file is None:
            return
        self._file.seek(0)
        self._file.write(self._header())
        self._file.close()
        self._file = None
        if self.manifest is not None:
            with open(manifest_path(self.path), "w", encoding="utf-8") as f:
                f.write("\n".join(self.manifest) + "\n")


def read_header(path):
    with open(path, "rb") as f:
        raw = f.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, *dims = HEADER.unpack(raw)
    if magic != config.FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: not a feature file")
    if version != config.FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported feature file version {version}")
    return tuple(dims)


def read_features(path):
    """Return the (count, channels, H, W) float32 array stored in a feature file."""
    dims = read_header(path)
    data = np.fromfile(path, dtype="<f4", offset=HEADER.size)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise FeatureFileError(f"{path}: expected {expected} values, found {data.size}")
    return data.reshape(dims)
