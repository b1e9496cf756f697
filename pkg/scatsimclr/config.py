# ScatSimCLR configuration
# Default values for every tunable of the pipeline. Typed config objects
# (FilterBankConfig, TrainConfig, ...) take their defaults from here, and
# JSON config files / command-line flags override them.

import json
import math
from pathlib import Path

from scatsimclr.errors import ConfigurationError

# Scattering network
SCALES = 2                    # J
ORIENTATIONS = 16             # L
SCATTER_ORDER = 2
PAD_POLICY = "resize"         # "resize" (Lanczos to the next power of two) or "zero-pad"
SWEPT_SCALES = (1, 4)         # J range accepted without warning
SWEPT_ORIENTATIONS = (4, 16)  # L range accepted without warning

# Morlet mother wavelet. sigma and xi are for scale j=0; scale j dilates by 2**j.
MORLET_SIGMA = 0.8
MORLET_XI = 3.0 * math.pi / 4.0
MORLET_SLANT_NUMERATOR = 4.0  # slant = 4 / L
LITTLEWOOD_PALEY_EPS = 0.2
PERIODIZATION_RADIUS = 2      # frequency aliases summed on each side

# Networks
BLOCK_COUNT = 12
HIDDEN_DIM = 512
REPR_DIM = 512
PROJ_DIM = 128
POOL_GRID = 2
PRETEXT_HIDDEN = 512
PRETEXT_DROPOUT = 0.2
BATCH_NORM_MOMENTUM = 0.1
BATCH_NORM_EPS = 1e-5
ROTATION_CLASSES = 4
JIGSAW_CLASSES = 35

# Losses
TEMPERATURE = 0.5
LAMBDA_VALUE = 0.3
LAMBDA_WARMUP = 40
LAMBDA_EMA = 0.9

# Optimization
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SGD_MOMENTUM = 0.9
BATCH_SIZE = 256
SMOKE_BATCH_SIZE = 32
EPOCHS = 100
STATS_SAMPLES = 256

# Augmentations (SimCLR recipe)
CROP_SCALE = (0.08, 1.0)
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
JITTER_STRENGTH = 0.5
JITTER_PROBABILITY = 0.8
GRAYSCALE_PROBABILITY = 0.2
BLUR_PROBABILITY = 0.5
BLUR_SIGMA = (0.1, 2.0)
BLUR_KERNEL_FRACTION = 0.1
FLIP_PROBABILITY = 0.5
AFFINE_DEGREES = 10.0
AFFINE_TRANSLATE = 0.1
AFFINE_SCALE = (0.9, 1.1)
AFFINE_SHEAR = 10.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
LANCZOS_LOBES = 3
JIGSAW_CANDIDATES = 100_000

# Linear evaluation
PROBE_STEPS = 500
PROBE_LEARNING_RATE = 1e-2
PROBE_RUNS = 5
TEST_FRACTION = 0.2

# Datasets
MAX_LOAD_FAILURE_RATE = 0.01
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")

# File formats
FEATURE_MAGIC = b"SCATFEAT"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"SSCLRCKP"
CHECKPOINT_VERSION = 1
RESOLVED_CONFIG_NAME = "resolved_config.json"


def load_config_file(path):
    """Read a JSON config file into a dict of field overrides."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return data


def merge_overrides(base, overrides):
    """Return base updated with every override that was actually given (not None)."""
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def write_resolved_config(config_dict, out_dir):
    """Write the fully resolved config next to a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_dict, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
