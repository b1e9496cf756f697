"""
Training objectives: the NT-Xent contrastive loss, the pretext cross-entropy and
their lambda-weighted sum.

Rows 2k and 2k+1 of a contrastive batch are the two views of sample k, so the
positive of row i is row i ^ 1.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from scatsimclr import config
from scatsimclr import tensornet as tn
from scatsimclr.errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-5


@dataclass
class ContrastiveBatch:
    z: tn.Tensor
    temperature: float = config.TEMPERATURE

    def validate(self):
        if not self.temperature > 0:
            raise ContractViolation(f"temperature must be positive, got {self.temperature}")
        z = self.z.value
        if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
            raise ContractViolation(f"contrastive batch needs an even number (>= 2) of rows, got shape {z.shape}")
        norms = np.sqrt((np.asarray(z, dtype=np.float64) ** 2).sum(axis=1))
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOLERANCE:
            raise ContractViolation("contrastive rows must have unit norm")


def positives(rows):
    return np.arange(rows) ^ 1


def nt_xent(batch):
    """Mean over all 2N rows of -log(exp(s_ip / tau) / sum_{k != i} exp(s_ik / tau))."""
    batch.validate()
    z = batch.z
    zv = np.asarray(z.value, dtype=np.float64)
    tau = float(batch.temperature)
    rows = zv.shape[0]
    idx = np.arange(rows)
    pos = positives(rows)

    logits = (zv @ zv.T) / tau
    logits[idx, idx] = -np.inf
    peak = logits.max(axis=1, keepdims=True)
    shifted = np.exp(logits - peak)
    denom = shifted.sum(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - logits[idx, pos]))

    probs = shifted / denom

    def vjp(g):
        grad_logits = probs.copy()
        grad_logits[idx, pos] -= 1.0
        grad_logits *= float(g) / (rows * tau)
        return ((grad_logits + grad_logits.T) @ zv,)

    return tn.record(np.asarray(loss), (z,), vjp)


def contrastive_loss(z, temperature=config.TEMPERATURE):
    return nt_xent(ContrastiveBatch(tn.as_tensor(z), temperature))


def check_one_hot(labels):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ContractViolation(f"labels must be a 2D one-hot array, got shape {labels.shape}")
    binary = np.all((labels == 0.0) | (labels == 1.0))
    if not binary or not np.all(labels.sum(axis=1) == 1.0):
        raise ContractViolation("labels are not one-hot rows")
    return labels


def one_hot(indices, classes):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= classes):
        raise ContractViolation(f"label outside [0, {classes})")
    out = np.zeros((indices.size, classes))
    out[np.arange(indices.size), indices] = 1.0
    return out


def pretext_loss(probs, labels):
    """Mean cross-entropy between predicted class probabilities and one-hot labels."""
    labels = check_one_hot(labels)
    probs = tn.as_tensor(probs)
    if probs.shape != labels.shape:
        raise ContractViolation(f"{probs.shape[0]} predictions for {labels.shape[0]} labels")
    return tn.cross_entropy(probs, labels)


@dataclass(frozen=True)
class LossWeights:
    """Schedule of the pretext weight lambda.

    0 for the first ``warmup`` epochs (or steps), ``value`` afterwards.
    ``constant`` overrides the schedule; ``auto_balance`` replaces ``value`` by the
    running |C| / |P| ratio once the warm-up is over (experimental).
    """

    value: float = config.LAMBDA_VALUE
    warmup: int = config.LAMBDA_WARMUP
    unit: str = "epoch"
    constant: Optional[float] = None
    auto_balance: bool = False
    ema: float = config.LAMBDA_EMA

    def __post_init__(self):
        if self.value < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.value}")
        if self.warmup < 0:
            raise ConfigurationError(f"lambda warm-up must be >= 0, got {self.warmup}")
        if self.unit not in ("epoch", "step"):
            raise ConfigurationError(f"lambda schedule unit must be 'epoch' or 'step', got {self.unit!r}")
        if self.constant is not None and self.constant < 0:
            raise ConfigurationError(f"constant lambda must be >= 0, got {self.constant}")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigurationError(f"auto-balance EMA factor must be in [0, 1), got {self.ema}")

    def schedule(self, epoch, step=0, ratio=None):
        if self.constant is not None:
            return float(self.constant)
        position = epoch if self.unit == "epoch" else step
        if position < self.warmup:
            return 0.0
        if self.auto_balance and ratio is not None:
            return float(ratio)
        return float(self.value)


class AutoBalance:
    """Exponential running mean of |C| / |P|."""

    def __init__(self, ema=config.LAMBDA_EMA, ratio=None):
        self.ema = ema
        self.ratio = ratio

    def update(self, contrastive, pretext):
        if abs(pretext) < 1e-12:
            return self.ratio
        current = abs(contrastive) / abs(pretext)
        self.ratio = current if self.ratio is None else self.ema * self.ratio + (1.0 - self.ema) * current
        return self.ratio


def total_loss(contrastive, pretext, weights, epoch, step=0, ratio=None):
    """L = C + lambda(epoch) * P; with no pretext term L = C."""
    c_value = float(contrastive.value)
    if not np.isfinite(c_value):
        raise ContractViolation(f"contrastive loss is not finite ({c_value})")
    if pretext is None:
        return contrastive
    p_value = float(pretext.value)
    if not np.isfinite(p_value):
        raise ContractViolation(f"pretext loss is not finite ({p_value})")
    lam = weights.schedule(epoch, step, ratio)
    return tn.add(contrastive, tn.scale(pretext, lam))
