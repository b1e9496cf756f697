import csv
from dataclasses import replace

import numpy as np
import pytest

from scatsimclr.datasets import ArrayDataset, synth_dataset
from scatsimclr.errors import ConfigurationError, ContractViolation
from scatsimclr.evaluation import (
    ProbeConfig,
    ProbeResult,
    accuracy,
    check_labels,
    encode_dataset,
    extract_features,
    linear_eval,
    probe_features,
)
from scatsimclr.featurefile import manifest_path, read_features, read_header
from scatsimclr.trainer import Trainer, load_model


@pytest.fixture
def blobs():
    return synth_dataset("two-blob-separable", 100, seed=0, size=16)


@pytest.fixture
def encoder_checkpoint(tiny_config, blobs):
    trainer = Trainer(replace(tiny_config, hidden_dim=32, repr_dim=32), blobs)
    trainer.fit_statistics()
    return trainer.checkpoint()


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_linear_eval_separates_blobs_through_an_untrained_adapter(tiny_config, seed):
    blobs = synth_dataset("two-blob-separable", 100, seed=seed, size=16)
    trainer = Trainer(replace(tiny_config, seed=seed, hidden_dim=32, repr_dim=32, stats_samples=100), blobs)
    trainer.fit_statistics()
    checkpoint = trainer.checkpoint()
    model, _, _, _ = load_model(checkpoint)
    result = linear_eval(checkpoint, blobs, ProbeConfig(steps=300, runs=2, seed=seed))
    assert result.top1 >= 0.95
    assert result.top1 == max(result.accuracies)
    assert result.train_size == 80 and result.test_size == 20
    assert result.encoder_checksum == model.adapter.params.checksum()


def test_probe_on_precomputed_features(rng):
    x = rng.normal(size=(300, 5))
    score = x[:, 0] + 0.5 * x[:, 1]
    x = x[np.abs(score) > 0.2]
    labels = (score[np.abs(score) > 0.2] > 0).astype(int)
    result = probe_features(x, labels, ProbeConfig(steps=300, runs=3))
    assert len(result.accuracies) == 3
    assert result.top1 >= 0.95


def test_zero_initialized_runs_agree(rng):
    x = rng.normal(size=(60, 4))
    labels = np.arange(60) % 3
    result = probe_features(x, labels, ProbeConfig(steps=20, runs=3, init="zeros"))
    assert len(set(result.accuracies)) == 1


def test_accuracy():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    assert accuracy(probs, [0, 1, 1]) == pytest.approx(2 / 3)
    assert accuracy(np.zeros((0, 2)), []) == 0.0


def test_label_contracts():
    with pytest.raises(ContractViolation, match="labelled"):
        check_labels(None, 2)
    with pytest.raises(ContractViolation):
        check_labels([0, 3], 3)
    with pytest.raises(ContractViolation):
        probe_features(np.zeros((3, 2)), [0, 1])


def test_linear_eval_needs_labels(encoder_checkpoint):
    with pytest.raises(ContractViolation):
        linear_eval(encoder_checkpoint, synth_dataset("noise", 4, size=16))


@pytest.mark.parametrize("kwargs", [{"steps": -1}, {"runs": 0}, {"test_fraction": 1.0}, {"init": "normal"}])
def test_invalid_probe_config(kwargs):
    with pytest.raises(ConfigurationError):
        ProbeConfig(**kwargs)


def test_result_csv(tmp_path):
    path = ProbeResult(accuracies=[0.5, 0.75], train_size=8, test_size=2, classes=2).write_csv(tmp_path / "p.csv")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows == [["run", "accuracy"], ["0", "0.500000"], ["1", "0.750000"], ["top1", "0.750000"]]


def test_encoding_is_repeatable(encoder_checkpoint, blobs):
    model, bank, _, _ = load_model(encoder_checkpoint)
    subset = ArrayDataset(blobs.images(range(10)))
    first = encode_dataset(model, bank, subset, chunk=4)
    np.testing.assert_allclose(first, encode_dataset(model, bank, subset, chunk=10), rtol=1e-5, atol=1e-5)
    np.testing.assert_array_equal(first, encode_dataset(model, bank, subset, chunk=4))
    assert first.shape == (10, 32)


def test_extract_features(encoder_checkpoint, blobs, tmp_path):
    subset = ArrayDataset(blobs.images(range(6)))
    path = tmp_path / "features.bin"
    assert extract_features(encoder_checkpoint, subset, path, chunk=4) == 6
    assert read_header(path) == (6, 32, 1, 1)
    features = read_features(path)
    model, bank, _, _ = load_model(encoder_checkpoint)
    np.testing.assert_allclose(features[:, :, 0, 0], model.encode(subset.images(range(6)), bank), rtol=1e-5,
                               atol=1e-5)
    assert manifest_path(path).read_text().split() == [str(i) for i in range(6)]
