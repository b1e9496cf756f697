import numpy as np
import pytest

from scatsimclr import tensornet as tn
from scatsimclr.filterbank import FilterBankConfig, build_filter_bank
from scatsimclr.trainer import TrainConfig


def weighted_sum(y, weights):
    """sum(y * weights) as a scalar tensor; reduces any op output to a loss."""
    weights = np.asarray(weights, dtype=np.float64)
    return tn.record(np.asarray(float((y.value * weights).sum())), (y,), lambda g: (float(g) * weights,))


def numeric_grad(f, array, eps=1e-6, entries=None):
    """Central differences of the scalar f() with respect to entries of array (modified in place)."""
    flat = array.reshape(-1)
    picked = range(flat.size) if entries is None else entries
    out = []
    for i in picked:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        out.append((up - down) / (2.0 * eps))
    return np.array(out)


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bank_j2_l8():
    return build_filter_bank(FilterBankConfig(J=2, L=8, size=32))


@pytest.fixture(scope="session")
def bank_j2_l16():
    return build_filter_bank(FilterBankConfig(J=2, L=16, size=32))


@pytest.fixture
def tiny_config():
    """A configuration small enough for a few optimizer steps per test."""
    return TrainConfig(
        epochs=1,
        batch_size=4,
        J=2,
        L=4,
        image_size=16,
        block_count=1,
        hidden_dim=16,
        repr_dim=12,
        proj_dim=8,
        pretext_hidden=16,
        stats_samples=8,
        learning_rate=2e-3,
        lambda_warmup=0,
    )


@pytest.fixture
def smoke_config():
    return TrainConfig(
        epochs=1000,
        batch_size=32,
        J=2,
        L=8,
        image_size=32,
        block_count=2,
        hidden_dim=128,
        repr_dim=128,
        proj_dim=64,
        pretext_hidden=64,
        stats_samples=200,
        learning_rate=3e-3,
        temperature=0.2,
        pretext="none",
        policy="crop+hflip",
        lambda_warmup=0,
    )
