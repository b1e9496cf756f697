"""Pillow-backed image decoding and encoding for float rasters in [0, 1]."""

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path):
    """Decode an image file to an H x W x 3 float64 array in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def to_uint8(image):
    image = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_image(image, path):
    """Encode an H x W (x 3) float image in [0, 1]; the format follows the suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path
