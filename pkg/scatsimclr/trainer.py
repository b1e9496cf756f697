"""
Joint contrastive + pretext pretraining, optimizers and checkpoints.

Every random draw is keyed by counters (seed, epoch, sample index, step), so a run
is a deterministic function of its TrainConfig and dataset, and resuming from a
checkpoint continues exactly where the interrupted run would have gone.
"""

import csv
import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from tqdm import tqdm

from scatsimclr import config
from scatsimclr import tensornet as tn
from scatsimclr.augment import AugPolicy, JigsawTable, build_jigsaw_table, make_views, view_rng
from scatsimclr.errors import (
    CheckpointError,
    CheckpointVersionError,
    ChecksumError,
    ConfigurationError,
    ContractViolation,
    TrainingDiverged,
)
from scatsimclr.filterbank import FilterBankConfig, build_filter_bank
from scatsimclr.losses import AutoBalance, LossWeights, contrastive_loss, one_hot, pretext_loss, total_loss
from scatsimclr.network import AdapterConfig, HeadsConfig, ScatSimCLR
from scatsimclr.scattering import ScatterConfig, padded_side

logger = logging.getLogger(__name__)

PRETEXT_CHOICES = ("rotation", "jigsaw", "none")
OPTIMIZERS = ("adam", "sgd")
METRICS_HEADER = ["epoch", "contrastive_loss", "pretext_loss", "lambda", "wall_time"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = config.EPOCHS
    batch_size: int = config.BATCH_SIZE
    max_steps: Optional[int] = None
    seed: int = 0
    optimizer: str = "adam"
    learning_rate: float = config.LEARNING_RATE
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    adam_eps: float = config.ADAM_EPS
    momentum: float = config.SGD_MOMENTUM
    weight_decay: float = 0.0
    temperature: float = config.TEMPERATURE
    lambda_value: float = config.LAMBDA_VALUE
    lambda_warmup: int = config.LAMBDA_WARMUP
    lambda_unit: str = "epoch"
    lambda_constant: Optional[float] = None
    lambda_auto: bool = False
    pretext: str = "rotation"
    pretext_views: str = "both"
    J: int = config.SCALES
    L: int = config.ORIENTATIONS
    order: int = config.SCATTER_ORDER
    pad_policy: str = config.PAD_POLICY
    image_size: int = 96
    block_count: int = config.BLOCK_COUNT
    hidden_dim: int = config.HIDDEN_DIM
    repr_dim: int = config.REPR_DIM
    proj_dim: int = config.PROJ_DIM
    pool_grid: int = config.POOL_GRID
    pretext_hidden: int = config.PRETEXT_HIDDEN
    pretext_dropout: float = config.PRETEXT_DROPOUT
    policy: str = "default"
    stats_samples: int = config.STATS_SAMPLES
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 for negatives to exist, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigurationError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.pretext not in PRETEXT_CHOICES:
            raise ConfigurationError(f"pretext must be one of {PRETEXT_CHOICES}, got {self.pretext!r}")
        if self.pretext_views not in ("both", "single"):
            raise ConfigurationError(f"pretext_views must be 'both' or 'single', got {self.pretext_views!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate and weight decay must be >= 0")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.image_size < 3:
            raise ConfigurationError(f"image_size must be >= 3, got {self.image_size}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        side = self.filter_size >> self.J
        if self.J < 1 or side < 1:
            raise ConfigurationError(f"J={self.J} needs 1 <= 2**J <= {self.filter_size} (image_size {self.image_size})")
        if self.pool_grid < 1 or side % self.pool_grid:
            raise ConfigurationError(
                f"pool_grid {self.pool_grid} does not divide the {side}x{side} scattering maps "
                f"(image_size {self.image_size}, J={self.J})")
        AugPolicy.named(self.policy)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    @property
    def filter_size(self):
        return padded_side(self.image_size, self.image_size)

    @property
    def scatter_config(self):
        return ScatterConfig(J=self.J, L=self.L, order=self.order, pad_policy=self.pad_policy)

    @property
    def bank_config(self):
        return FilterBankConfig(J=self.J, L=self.L, size=self.filter_size)

    @property
    def adapter_config(self):
        return AdapterConfig(block_count=self.block_count, hidden_dim=self.hidden_dim,
                             repr_dim=self.repr_dim, pool_grid=self.pool_grid)

    @property
    def pretext_classes(self):
        return config.JIGSAW_CLASSES if self.pretext == "jigsaw" else config.ROTATION_CLASSES

    @property
    def heads_config(self):
        return HeadsConfig(proj_dim=self.proj_dim, pretext_classes=self.pretext_classes,
                           pretext_hidden=self.pretext_hidden, pretext_dropout=self.pretext_dropout)

    @property
    def loss_weights(self):
        return LossWeights(value=self.lambda_value, warmup=self.lambda_warmup, unit=self.lambda_unit,
                           constant=self.lambda_constant, auto_balance=self.lambda_auto)

    @property
    def aug_policy(self):
        return AugPolicy.named(self.policy, seed=self.seed)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

def _check_finite_grads(params):
    for name, tensor in params.items():
        if not np.all(np.isfinite(tensor.grad)):
            raise TrainingDiverged(f"non-finite gradient for {name}")


class Adam:
    """Adam with bias-corrected moments; optional L2 weight decay added to the gradient."""

    def __init__(self, lr=config.LEARNING_RATE, beta1=config.ADAM_BETA1, beta2=config.ADAM_BETA2,
                 eps=config.ADAM_EPS, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params):
        """Update every tensor of ``params`` (name -> Tensor) from its gradient buffer."""
        _check_finite_grads(params)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for name, tensor in params.items():
            w = tensor.value.astype(np.float64)
            g = tensor.grad + self.weight_decay * w if self.weight_decay else tensor.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[name] * (1.0 / bc2)) + self.eps
            tensor.value[...] = w - step_size * self.m[name] / denom

    def state(self):
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        return {"t": self.t}, arrays

    def load_state(self, scalars, arrays):
        self.t = int(scalars["t"])
        self.m = {k[2:]: np.array(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("v/")}


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, lr=config.LEARNING_RATE, momentum=config.SGD_MOMENTUM, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}
        self.t = 0

    def step(self, params):
        _check_finite_grads(params)
        self.t += 1
        for name, tensor in params.items():
            w = tensor.value.astype(np.float64)
            g = tensor.grad + self.weight_decay * w if self.weight_decay else tensor.grad
            buf = self.velocity.setdefault(name, np.zeros_like(w))
            buf *= self.momentum
            buf += g
            tensor.value[...] = w - self.lr * buf

    def state(self):
        return {"t": self.t}, {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state(self, scalars, arrays):
        self.t = int(scalars["t"])
        self.velocity = {k[9:]: np.array(v, dtype=np.float64) for k, v in arrays.items()
                         if k.startswith("velocity/")}


def make_optimizer(cfg):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return SGD(cfg.learning_rate, cfg.momentum, cfg.weight_decay)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_PREFIX = struct.Struct("<8sIQ32s")
_HEADER_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    """Named arrays plus a JSON-serializable metadata dict."""

    arrays: dict
    meta: dict
    version: int = config.CHECKPOINT_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint) or self.meta != other.meta or self.version != other.version:
            return False
        if sorted(self.arrays) != sorted(other.arrays):
            return False
        return all(
            self.arrays[k].dtype == other.arrays[k].dtype and np.array_equal(self.arrays[k], other.arrays[k])
            for k in self.arrays
        )


def encode_checkpoint(ckpt):
    names = sorted(ckpt.arrays)
    chunks = []
    index = []
    offset = 0
    for name in names:
        array = np.ascontiguousarray(ckpt.arrays[name])
        dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
        raw = array.astype(dtype, copy=False).tobytes()
        index.append({"name": name, "dtype": dtype.str, "shape": list(array.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": ckpt.meta, "arrays": index}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = _HEADER_LEN.pack(len(header)) + header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    return _PREFIX.pack(config.CHECKPOINT_MAGIC, ckpt.version, len(body), digest) + body


def decode_checkpoint(raw, source="checkpoint"):
    if len(raw) < _PREFIX.size:
        raise ChecksumError(f"{source}: truncated container")
    magic, version, length, digest = _PREFIX.unpack_from(raw)
    if magic != config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if version != config.CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint version {version}, this build reads version {config.CHECKPOINT_VERSION}"
        )
    body = raw[_PREFIX.size:]
    if len(body) != length:
        raise ChecksumError(f"{source}: expected {length} body bytes, found {len(body)}")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch")

    (header_len,) = _HEADER_LEN.unpack_from(body)
    header = json.loads(body[_HEADER_LEN.size:_HEADER_LEN.size + header_len].decode("utf-8"))
    data = body[_HEADER_LEN.size + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        chunk = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return Checkpoint(arrays=arrays, meta=header["meta"], version=version)


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    return path


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), source=str(path))


def _split_arrays(arrays, prefix):
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def apply_checkpoint(model, ckpt):
    """Load ParamSet states from a checkpoint; shape problems name the parameter."""
    for name, params in model.param_sets().items():
        params.load_state_dict(_split_arrays(ckpt.arrays, f"params/{name}"))


def load_model(ckpt):
    """Rebuild (model, filter bank, jigsaw table or None, TrainConfig) from a checkpoint."""
    cfg = TrainConfig.from_dict(ckpt.meta["train_config"])
    model = build_model(cfg)
    apply_checkpoint(model, ckpt)
    table = JigsawTable(ckpt.arrays["jigsaw_table"]) if "jigsaw_table" in ckpt.arrays else None
    return model, build_filter_bank(cfg.bank_config), table, cfg


def build_model(cfg):
    return ScatSimCLR(
        scatter_cfg=cfg.scatter_config,
        image_size=cfg.image_size,
        adapter_cfg=cfg.adapter_config,
        heads_cfg=cfg.heads_config,
        pretext=None if cfg.pretext == "none" else cfg.pretext,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ScatSimCLR
    checkpoint: Checkpoint
    metrics: list
    history: list = field(default_factory=list)


class Trainer:
    def __init__(self, cfg, dataset, out_dir=None, progress=False):
        if len(dataset) < 2:
            raise ContractViolation(f"pretraining needs at least 2 images, got {len(dataset)}")
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress
        self.bank = build_filter_bank(cfg.bank_config)
        self.model = build_model(cfg)
        self.policy = cfg.aug_policy
        self.weights = cfg.loss_weights
        self.pretext = None if cfg.pretext == "none" else cfg.pretext
        self.table = None
        if self.pretext == "jigsaw":
            self.table = build_jigsaw_table(config.JIGSAW_CLASSES, np.random.default_rng([cfg.seed, 4]))
        self.optimizer = make_optimizer(cfg)
        self.balance = AutoBalance(self.weights.ema)
        self.epoch = 0
        self.batch = 0
        self.step_count = 0
        self.history = []
        self.metrics = []
        self.elapsed = 0.0
        self.fresh = True

    @property
    def parameters(self):
        return {f"{set_name}/{name}": tensor
                for set_name, params in self.model.param_sets().items()
                for name, tensor in params.items()}

    def fit_statistics(self):
        """Per-channel scattering statistics from un-augmented images."""
        n = len(self.dataset)
        count = min(self.cfg.stats_samples, n)
        rng = np.random.default_rng([self.cfg.seed, 5])
        picked = np.sort(rng.choice(n, size=count, replace=False))
        a = self.model.scatter(self.dataset.images(picked), self.bank, self.cfg.workers)
        self.model.adapter.set_statistics(a)

    def batches(self, epoch):
        order = np.random.default_rng([self.cfg.seed, epoch, 6]).permutation(len(self.dataset))
        size = self.cfg.batch_size
        if len(order) < size:
            return [order]
        # NT-Xent depends on the batch size; every step sees exactly `size` pairs.
        return [order[i:i + size] for i in range(0, len(order) - size + 1, size)]

    def make_batch_views(self, indices, epoch):
        images, labels = [], []
        for index in indices:
            rng = view_rng(self.cfg.seed, epoch, int(index))
            first, second = make_views(self.dataset[int(index)], self.policy, rng, self.pretext,
                                       self.table, self.cfg.pretext_views)
            images.extend([first.view, second.view])
            labels.extend([first.pretext_label, second.pretext_label])
        return images, labels

    def train_step(self, indices, epoch):
        images, labels = self.make_batch_views(indices, epoch)
        a = self.model.scatter(images, self.bank, self.cfg.workers)
        dropout_rng = np.random.default_rng([self.cfg.seed, self.step_count, 7])

        with tn.Graph() as graph:
            h = self.model.adapter.forward(a, mode="train")
            z = self.model.projection.forward(h)
            c_loss = contrastive_loss(z, self.cfg.temperature)
            p_loss = None
            if self.pretext is not None:
                rows = [i for i, label in enumerate(labels) if label is not None]
                probs = self.model.pretext_head.forward(tn.take_rows(h, rows), "train", dropout_rng)
                targets = one_hot([labels[i] for i in rows], self.cfg.pretext_classes)
                p_loss = pretext_loss(probs, targets)

            c_value = float(c_loss.value)
            p_value = None if p_loss is None else float(p_loss.value)
            if not np.isfinite(c_value) or (p_value is not None and not np.isfinite(p_value)):
                raise TrainingDiverged(f"non-finite loss at step {self.step_count}: C={c_value}, P={p_value}")

            ratio = None
            if self.weights.auto_balance and p_value is not None:
                ratio = self.balance.update(c_value, p_value)
            lam = self.weights.schedule(epoch, self.step_count, ratio) if p_loss is not None else 0.0
            loss = total_loss(c_loss, p_loss, self.weights, epoch, self.step_count, ratio)
            self.model.zero_grad()
            tn.backward(loss, graph)

        self.optimizer.step(self.parameters)
        self.step_count += 1
        record = {"epoch": epoch, "step": self.step_count, "contrastive_loss": c_value,
                  "pretext_loss": p_value, "lambda": lam}
        self.history.append(record)
        return record

    def _stop(self):
        return self.cfg.max_steps is not None and self.step_count >= self.cfg.max_steps

    def run(self):
        """Train until cfg.epochs (or cfg.max_steps) and return the final TrainResult."""
        if self.fresh:
            self.fit_statistics()
            self.fresh = False
        start = time.perf_counter() - self.elapsed
        try:
            while self.epoch < self.cfg.epochs and not self._stop():
                batches = self.batches(self.epoch)
                bar = tqdm(batches[self.batch:], desc=f"epoch {self.epoch}", disable=not self.progress,
                           leave=False)
                for indices in bar:
                    if self._stop():
                        break
                    record = self.train_step(indices, self.epoch)
                    self.batch += 1
                    bar.set_postfix(loss=f"{record['contrastive_loss']:.4f}")
                self.elapsed = time.perf_counter() - start
                if self.batch >= len(batches):
                    self._finish_epoch()
                if self.out_dir is not None:
                    save_checkpoint(self.checkpoint(), self.out_dir / "last.ckpt")
        except TrainingDiverged:
            if self.out_dir is not None:
                path = save_checkpoint(self.checkpoint(), self.out_dir / "diagnostic.ckpt")
                logger.error("training diverged; diagnostic snapshot written to %s", path)
            raise
        if self.out_dir is not None:
            self.write_metrics(self.out_dir / "metrics.csv")
        return TrainResult(model=self.model, checkpoint=self.checkpoint(), metrics=list(self.metrics),
                           history=list(self.history))

    def _finish_epoch(self):
        epoch_steps = [s for s in self.history if s["epoch"] == self.epoch]
        c_mean = float(np.mean([s["contrastive_loss"] for s in epoch_steps])) if epoch_steps else None
        p_values = [s["pretext_loss"] for s in epoch_steps if s["pretext_loss"] is not None]
        row = {
            "epoch": self.epoch,
            "contrastive_loss": c_mean,
            "pretext_loss": float(np.mean(p_values)) if p_values else None,
            "lambda": epoch_steps[-1]["lambda"] if epoch_steps else self.weights.schedule(self.epoch),
            "wall_time": round(self.elapsed, 3),
        }
        self.metrics.append(row)
        pretext = "-" if row["pretext_loss"] is None else f"{row['pretext_loss']:.4f}"
        contrastive = "-" if c_mean is None else f"{c_mean:.4f}"
        logger.info("epoch %d: contrastive %s, pretext %s, lambda %.3f",
                    self.epoch, contrastive, pretext, row["lambda"])
        self.epoch += 1
        self.batch = 0

    def write_metrics(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(METRICS_HEADER)
            for row in self.metrics:
                writer.writerow(["" if row[k] is None else row[k] for k in METRICS_HEADER])
        return path

    def checkpoint(self):
        arrays = {}
        for set_name, params in self.model.param_sets().items():
            for key, value in params.state_dict().items():
                arrays[f"params/{set_name}/{key}"] = value
        scalars, opt_arrays = self.optimizer.state()
        arrays.update({f"optimizer/{k}": v for k, v in opt_arrays.items()})
        if self.table is not None:
            arrays["jigsaw_table"] = np.array(self.table.permutations)
        meta = {
            "train_config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "batch": self.batch,
            "step": self.step_count,
            "optimizer": scalars,
            "balance_ratio": self.balance.ratio,
            "history": self.history,
            "metrics": self.metrics,
            "elapsed": self.elapsed,
        }
        return Checkpoint(arrays=arrays, meta=meta)

    @classmethod
    def resume(cls, ckpt, dataset, out_dir=None, progress=False, **overrides):
        """Continue a run from a checkpoint; overrides may extend epochs or max_steps."""
        allowed = {"epochs", "max_steps", "workers"}
        if set(overrides) - allowed:
            raise ConfigurationError(f"a resumed run may only change {sorted(allowed)}")
        cfg = TrainConfig.from_dict({**ckpt.meta["train_config"], **overrides})
        trainer = cls(cfg, dataset, out_dir, progress)
        apply_checkpoint(trainer.model, ckpt)
        if "jigsaw_table" in ckpt.arrays:
            trainer.table = JigsawTable(ckpt.arrays["jigsaw_table"])
        trainer.optimizer.load_state(ckpt.meta["optimizer"], _split_arrays(ckpt.arrays, "optimizer"))
        trainer.epoch = ckpt.meta["epoch"]
        trainer.batch = ckpt.meta["batch"]
        trainer.step_count = ckpt.meta["step"]
        trainer.balance.ratio = ckpt.meta["balance_ratio"]
        trainer.history = list(ckpt.meta["history"])
        trainer.metrics = list(ckpt.meta["metrics"])
        trainer.elapsed = ckpt.meta["elapsed"]
        trainer.fresh = False
        return trainer


def pretrain(dataset, cfg, out_dir=None, progress=False):
    """Run the joint pretraining loop; returns the trained model, final checkpoint and metrics."""
    if len(dataset) == 0:
        raise ContractViolation("cannot pretrain on an empty dataset")
    trainer = Trainer(cfg, dataset, out_dir, progress)
    logger.info("pretraining on %d images: %s", len(dataset), trainer.model.parameter_counts())
    return trainer.run()
