"""
Trainable heads on top of the fixed scattering front end.

    scattering maps --Adapter--> h --ProjectionHead--> z   (contrastive)
                                 h --PretextHead-----> t^  (rotation / jigsaw classes)
                                 h --LinearProbe-----> class probabilities

The adapter average-pools every scattering channel on a pool_grid x pool_grid grid,
standardizes each scattering channel with stored statistics, then runs a dense
stem and a stack of residual blocks (dense -> batch-norm -> ReLU -> dense, plus skip).
"""

import logging
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from scatsimclr import config
from scatsimclr import tensornet as tn
from scatsimclr.errors import ConfigurationError, ContractViolation
from scatsimclr.scattering import ScatterConfig, channel_count, scatter_batch, stack_coefficients

logger = logging.getLogger(__name__)

MODES = ("train", "eval")


@dataclass(frozen=True)
class AdapterConfig:
    block_count: int = config.BLOCK_COUNT
    hidden_dim: int = config.HIDDEN_DIM
    repr_dim: int = config.REPR_DIM
    pool_grid: int = config.POOL_GRID
    zero_init_residual: bool = False

    def __post_init__(self):
        if self.block_count < 1:
            raise ConfigurationError(f"block_count must be >= 1, got {self.block_count}")
        for name in ("hidden_dim", "repr_dim", "pool_grid"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class HeadsConfig:
    proj_dim: int = config.PROJ_DIM
    pretext_classes: int = config.ROTATION_CLASSES
    pretext_hidden: int = config.PRETEXT_HIDDEN
    pretext_dropout: float = config.PRETEXT_DROPOUT

    def __post_init__(self):
        if self.proj_dim < 1 or self.pretext_hidden < 1:
            raise ConfigurationError("head dimensions must be >= 1")
        if self.pretext_classes < 2:
            raise ConfigurationError(f"a pretext task needs >= 2 classes, got {self.pretext_classes}")
        if self.pretext_classes not in (config.ROTATION_CLASSES, config.JIGSAW_CLASSES):
            warnings.warn(
                f"{self.pretext_classes} pretext classes: the rotation task uses "
                f"{config.ROTATION_CLASSES} and the jigsaw task {config.JIGSAW_CLASSES}",
                UserWarning,
            )
        if not 0.0 <= self.pretext_dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.pretext_dropout}")


def init_dense(params, prefix, n_in, n_out, rng, zero=False):
    """Uniform fan-in weights U(-1/sqrt(n_in), 1/sqrt(n_in)) and zero biases."""
    bound = 1.0 / np.sqrt(n_in)
    weight = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, size=(n_in, n_out))
    params.add(f"{prefix}.weight", weight)
    params.add(f"{prefix}.bias", np.zeros(n_out))


def _dense(params, prefix, x):
    return tn.dense(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _check_mode(mode):
    if mode not in MODES:
        raise ContractViolation(f"mode must be one of {MODES}, got {mode!r}")


class Adapter:
    """f_h: scattering maps (B, C, h, w) -> representation h (B, repr_dim)."""

    def __init__(self, cfg, in_channels, rng, dtype=np.float32):
        self.cfg = cfg
        self.in_channels = in_channels
        self.features = in_channels * cfg.pool_grid ** 2
        self.params = tn.ParamSet(dtype)
        self.params.add_buffer("scatter_mean", np.zeros(in_channels))
        self.params.add_buffer("scatter_std", np.ones(in_channels))

        init_dense(self.params, "stem", self.features, cfg.hidden_dim, rng)
        self.norm_states = []
        for k in range(cfg.block_count):
            prefix = f"block{k:02d}"
            init_dense(self.params, f"{prefix}.dense1", cfg.hidden_dim, cfg.hidden_dim, rng)
            self.params.add(f"{prefix}.bn.gamma", np.ones(cfg.hidden_dim))
            self.params.add(f"{prefix}.bn.beta", np.zeros(cfg.hidden_dim))
            init_dense(self.params, f"{prefix}.dense2", cfg.hidden_dim, cfg.hidden_dim, rng,
                       zero=cfg.zero_init_residual)
            mean = self.params.add_buffer(f"{prefix}.bn.running_mean", np.zeros(cfg.hidden_dim))
            var = self.params.add_buffer(f"{prefix}.bn.running_var", np.ones(cfg.hidden_dim))
            self.norm_states.append(
                tn.BatchNormState(mean, var, config.BATCH_NORM_MOMENTUM, config.BATCH_NORM_EPS)
            )
        init_dense(self.params, "out", cfg.hidden_dim, cfg.repr_dim, rng)

    def pooled(self, a):
        """Standardized cell-pooled scattering features (B, C * grid^2), not tracked."""
        a = np.asarray(a.value if isinstance(a, tn.Tensor) else a, dtype=np.float64)
        if a.ndim != 4 or a.shape[1] != self.in_channels:
            raise ContractViolation(
                f"adapter expects (B, {self.in_channels}, h, w) scattering maps, got {a.shape}"
            )
        g = self.cfg.pool_grid
        pooled = tn.cell_avg_pool(tn.Tensor(a), g).value
        mean = np.repeat(self.params.buffers["scatter_mean"], g * g)
        std = np.repeat(self.params.buffers["scatter_std"], g * g)
        return (pooled - mean) / std

    def set_statistics(self, a):
        """Per-channel mean/std of cell-pooled maps from a sample batch (B, C, h, w)."""
        a = np.asarray(a, dtype=np.float64)
        g = self.cfg.pool_grid
        pooled = tn.cell_avg_pool(tn.Tensor(a), g).value.reshape(a.shape[0], self.in_channels, g * g)
        self.params.buffers["scatter_mean"][...] = pooled.mean(axis=(0, 2))
        std = pooled.std(axis=(0, 2))
        self.params.buffers["scatter_std"][...] = np.where(std > 1e-8, std, 1.0)

    def forward(self, a, mode="eval"):
        _check_mode(mode)
        x = tn.relu(_dense(self.params, "stem", tn.Tensor(self.pooled(a))))
        for k, state in enumerate(self.norm_states):
            prefix = f"block{k:02d}"
            y = _dense(self.params, f"{prefix}.dense1", x)
            y = tn.batch_normalize(y, self.params[f"{prefix}.bn.gamma"], self.params[f"{prefix}.bn.beta"],
                                   state, mode)
            y = _dense(self.params, f"{prefix}.dense2", tn.relu(y))
            x = tn.add(x, y)
        return _dense(self.params, "out", x)

    def parameter_count(self):
        return self.params.count()


def adapter_parameter_count(cfg, in_channels):
    """Exact trainable parameter total of an adapter, without building it."""
    features = in_channels * cfg.pool_grid ** 2
    H, R = cfg.hidden_dim, cfg.repr_dim
    block = 2 * (H * H + H) + 2 * H
    return features * H + H + cfg.block_count * block + H * R + R


class ProjectionHead:
    """g_z: dense -> ReLU -> dense -> l2-normalize."""

    def __init__(self, repr_dim, proj_dim, rng, dtype=np.float32):
        self.params = tn.ParamSet(dtype)
        init_dense(self.params, "dense1", repr_dim, repr_dim, rng)
        init_dense(self.params, "dense2", repr_dim, proj_dim, rng)

    def forward(self, h):
        x = tn.relu(_dense(self.params, "dense1", h))
        return tn.l2_normalize(_dense(self.params, "dense2", x))


class PretextHead:
    """g_t: dense -> dropout -> ReLU -> dense -> softmax over pretext classes."""

    def __init__(self, repr_dim, cfg, rng, dtype=np.float32):
        self.cfg = cfg
        self.params = tn.ParamSet(dtype)
        init_dense(self.params, "dense1", repr_dim, cfg.pretext_hidden, rng)
        init_dense(self.params, "dense2", cfg.pretext_hidden, cfg.pretext_classes, rng)

    def forward(self, h, mode="eval", rng=None):
        _check_mode(mode)
        x = _dense(self.params, "dense1", h)
        x = tn.relu(tn.dropout(x, self.cfg.pretext_dropout, rng, training=mode == "train"))
        return tn.softmax(_dense(self.params, "dense2", x))


class LinearProbe:
    """One dense layer and a softmax over K classes."""

    def __init__(self, repr_dim, classes, rng=None, init="uniform", dtype=np.float64):
        if classes < 2:
            raise ContractViolation(f"a probe needs >= 2 classes, got {classes}")
        if init not in ("uniform", "zeros"):
            raise ConfigurationError(f"probe init must be 'uniform' or 'zeros', got {init!r}")
        self.classes = classes
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = tn.ParamSet(dtype)
        init_dense(self.params, "dense", repr_dim, classes, rng, zero=init == "zeros")

    def forward(self, h):
        return tn.softmax(_dense(self.params, "dense", h))


def projection_forward(h, head):
    return head.forward(h)


def pretext_forward(h, head, mode="eval", rng=None):
    return head.forward(h, mode, rng)


def adapter_forward(a, adapter, mode="eval"):
    return adapter.forward(a, mode)


def linear_probe_forward(h, probe):
    return probe.forward(h)


class ScatSimCLR:
    """Scattering front end plus adapter and heads, sharing one parameter dtype.

    ``pretext=None`` builds no pretext head (the no-pretext training condition).
    """

    def __init__(self, scatter_cfg=None, image_size=128, adapter_cfg=None, heads_cfg=None,
                 pretext="rotation", seed=0, dtype=np.float32):
        self.scatter_cfg = scatter_cfg or ScatterConfig()
        self.image_size = image_size
        self.adapter_cfg = adapter_cfg or AdapterConfig()
        self.heads_cfg = heads_cfg or HeadsConfig()
        self.pretext = pretext
        self.seed = seed
        cfg = self.scatter_cfg
        self.in_channels = 3 * channel_count(cfg.J, cfg.L, cfg.order)

        self.adapter = Adapter(self.adapter_cfg, self.in_channels, np.random.default_rng([seed, 1]), dtype)
        self.projection = ProjectionHead(self.adapter_cfg.repr_dim, self.heads_cfg.proj_dim,
                                         np.random.default_rng([seed, 2]), dtype)
        self.pretext_head = None
        if pretext is not None:
            self.pretext_head = PretextHead(self.adapter_cfg.repr_dim, self.heads_cfg,
                                            np.random.default_rng([seed, 3]), dtype)
        logger.debug("model with %d adapter parameters over %d scattering channels",
                     self.adapter.parameter_count(), self.in_channels)

    def param_sets(self):
        """Named ParamSets in a fixed order."""
        sets = {"adapter": self.adapter.params, "projection": self.projection.params}
        if self.pretext_head is not None:
            sets["pretext"] = self.pretext_head.params
        return sets

    def parameter_counts(self):
        counts = {name: ps.count() for name, ps in self.param_sets().items()}
        counts["total"] = sum(counts.values())
        return counts

    def zero_grad(self):
        for ps in self.param_sets().values():
            ps.zero_grad()

    def describe(self):
        return {
            "scatter": asdict(self.scatter_cfg),
            "image_size": self.image_size,
            "adapter": asdict(self.adapter_cfg),
            "heads": asdict(self.heads_cfg),
            "pretext": self.pretext,
            "seed": self.seed,
        }

    def scatter(self, images, bank, workers=1):
        return stack_coefficients(scatter_batch(images, bank, self.scatter_cfg, workers))

    def encode(self, images, bank, workers=1):
        """Eval-mode representations h (B, repr_dim) of a list of H x W x 3 images."""
        if not images:
            return np.zeros((0, self.adapter_cfg.repr_dim))
        return self.adapter.forward(self.scatter(images, bank, workers), mode="eval").numpy()
