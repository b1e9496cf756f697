"""
Linear evaluation: freeze a pretrained encoder, fit a one-layer softmax probe on
its representations and report held-out top-1 accuracy.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from scatsimclr import config
from scatsimclr import tensornet as tn
from scatsimclr.errors import ConfigurationError, ContractViolation
from scatsimclr.datasets import split_indices
from scatsimclr.featurefile import FeatureWriter
from scatsimclr.losses import one_hot
from scatsimclr.network import LinearProbe
from scatsimclr.trainer import Adam, Checkpoint, load_checkpoint, load_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = config.PROBE_STEPS
    learning_rate: float = config.PROBE_LEARNING_RATE
    test_fraction: float = config.TEST_FRACTION
    runs: int = config.PROBE_RUNS
    seed: int = 0
    init: str = "uniform"
    standardize: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"probe steps must be >= 0, got {self.steps}")
        if self.runs < 1:
            raise ConfigurationError(f"probe runs must be >= 1, got {self.runs}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.init not in ("uniform", "zeros"):
            raise ConfigurationError(f"probe init must be 'uniform' or 'zeros', got {self.init!r}")


@dataclass
class ProbeResult:
    accuracies: list
    train_size: int
    test_size: int
    classes: int
    encoder_checksum: str = ""

    @property
    def top1(self):
        return max(self.accuracies)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["run", "accuracy"])
            for run, acc in enumerate(self.accuracies):
                writer.writerow([run, f"{acc:.6f}"])
            writer.writerow(["top1", f"{self.top1:.6f}"])
        return path


def accuracy(probs, labels):
    """Fraction of rows whose argmax equals the label."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def check_labels(labels, classes):
    if labels is None:
        raise ContractViolation("linear evaluation needs labelled data")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractViolation(f"labels must lie in [0, {classes}), found range [{labels.min()}, {labels.max()}]")
    return labels


def fit_probe(features, labels, classes, cfg, run=0):
    """Full-batch Adam on the probe's cross-entropy; features stay fixed."""
    probe = LinearProbe(features.shape[1], classes, np.random.default_rng([cfg.seed, run]), cfg.init)
    optimizer = Adam(lr=cfg.learning_rate)
    targets = one_hot(labels, classes)
    x = tn.Tensor(features)
    for _ in range(cfg.steps):
        with tn.Graph() as graph:
            loss = tn.cross_entropy(probe.forward(x), targets)
            probe.params.zero_grad()
            tn.backward(loss, graph)
        optimizer.step(dict(probe.params.items()))
    return probe


def probe_features(features, labels, cfg=None, classes=None):
    """Probe accuracy on precomputed features: one fixed split, cfg.runs probe seeds."""
    cfg = cfg or ProbeConfig()
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    classes = classes or int(np.max(labels)) + 1
    labels = check_labels(labels, classes)
    if len(labels) != len(features):
        raise ContractViolation(f"{len(features)} feature rows for {len(labels)} labels")

    train, test = split_indices(len(labels), cfg.test_fraction, np.random.default_rng([cfg.seed, 8]))
    x_train, x_test = features[train], features[test]
    if cfg.standardize:
        mean = x_train.mean(axis=0)
        std = x_train.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        x_train, x_test = (x_train - mean) / std, (x_test - mean) / std

    accuracies = []
    for run in range(cfg.runs):
        probe = fit_probe(x_train, labels[train], classes, cfg, run)
        acc = accuracy(probe.forward(x_test).value, labels[test])
        logger.info("probe run %d: top-1 %.4f", run, acc)
        accuracies.append(acc)
    return ProbeResult(accuracies=accuracies, train_size=len(train), test_size=len(test), classes=classes)


def encode_dataset(model, bank, dataset, chunk=64, workers=1, progress=False):
    """Eval-mode representations of every image, in dataset order."""
    rows = []
    starts = range(0, len(dataset), chunk)
    for start in tqdm(starts, desc="encoding", disable=not progress):
        images = dataset.images(range(start, min(start + chunk, len(dataset))))
        rows.append(model.encode(images, bank, workers))
    if not rows:
        return np.zeros((0, model.adapter_cfg.repr_dim))
    return np.concatenate(rows)


def _as_checkpoint(checkpoint):
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def _encoder_checksum(model):
    return model.adapter.params.checksum()


def linear_eval(checkpoint, dataset, cfg=None, workers=1, progress=False):
    """Top-1 accuracy of a linear probe on the frozen encoder's representations."""
    cfg = cfg or ProbeConfig()
    model, bank, _, _ = load_model(_as_checkpoint(checkpoint))
    classes = dataset.num_classes or (int(dataset.labels.max()) + 1 if dataset.labels is not None else 0)
    labels = check_labels(dataset.labels, classes)

    before = _encoder_checksum(model)
    features = encode_dataset(model, bank, dataset, workers=workers, progress=progress)
    result = probe_features(features, labels, cfg, classes)
    after = _encoder_checksum(model)
    if before != after:
        raise ContractViolation("encoder parameters changed during linear evaluation")
    result.encoder_checksum = after
    logger.info("linear evaluation: top-1 %.4f over %d runs", result.top1, len(result.accuracies))
    return result


def extract_features(checkpoint, dataset, path, workers=1, chunk=64, progress=False):
    """Write eval-mode representations h as a (count, repr_dim, 1, 1) feature file."""
    model, bank, _, _ = load_model(_as_checkpoint(checkpoint))
    repr_dim = model.adapter_cfg.repr_dim
    names = [str(p) for p in dataset.paths()] if hasattr(dataset, "paths") else [str(i) for i in range(len(dataset))]
    with FeatureWriter(path, repr_dim, 1, 1, manifest=names) as writer:
        starts = range(0, len(dataset), chunk)
        for start in tqdm(starts, desc="extracting", disable=not progress):
            images = dataset.images(range(start, min(start + chunk, len(dataset))))
            writer.write(model.encode(images, bank, workers))
    logger.info("wrote %d representations to %s", len(dataset), path)
    return len(dataset)
