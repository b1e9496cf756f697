import math

import numpy as np
import pytest

from scatsimclr import tensornet as tn
from scatsimclr.errors import ConfigurationError, ContractViolation
from scatsimclr.losses import (
    AutoBalance,
    ContrastiveBatch,
    LossWeights,
    contrastive_loss,
    nt_xent,
    one_hot,
    positives,
    pretext_loss,
    total_loss,
)

from conftest import numeric_grad, relative_error


def unit_rows(rng, rows, dim):
    z = rng.normal(size=(rows, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def naive_nt_xent(z, tau):
    rows = len(z)
    total = 0.0
    for i in range(rows):
        p = i + 1 if i % 2 == 0 else i - 1
        sims = [math.exp(float(z[i] @ z[k]) / tau) for k in range(rows) if k != i]
        total += -math.log(math.exp(float(z[i] @ z[p]) / tau) / sum(sims))
    return total / rows


def test_single_pair_has_zero_loss(rng):
    z = unit_rows(rng, 1, 5)
    loss = contrastive_loss(np.vstack([z, z]), 0.5)
    assert float(loss.value) == pytest.approx(0.0, abs=1e-6)


def test_identical_rows_give_log_three():
    z = np.tile([[1.0, 0.0, 0.0]], (4, 1))
    assert float(contrastive_loss(z, 0.5).value) == pytest.approx(math.log(3.0), abs=1e-6)


def test_orthogonal_pairs():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    expected = math.log(1.0 + 2.0 * math.exp(-2.0))
    assert float(contrastive_loss(z, 0.5).value) == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(0.2395, abs=1e-4)


def test_matches_naive_double_loop(rng):
    for _ in range(100):
        rows = 2 * int(rng.integers(1, 33))
        z = unit_rows(rng, rows, int(rng.integers(2, 9)))
        tau = float(rng.uniform(0.1, 1.0))
        assert float(contrastive_loss(z, tau).value) == pytest.approx(naive_nt_xent(z, tau), abs=1e-6)


def test_invariant_to_pair_permutation_and_rotation(rng):
    z = unit_rows(rng, 12, 6)
    base = float(contrastive_loss(z, 0.5).value)
    pairs = rng.permutation(6)
    order = np.stack([2 * pairs, 2 * pairs + 1], axis=1).reshape(-1)
    assert float(contrastive_loss(z[order], 0.5).value) == pytest.approx(base, abs=1e-9)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    assert float(contrastive_loss(z @ q, 0.5).value) == pytest.approx(base, abs=1e-9)
    swapped = z[np.arange(12) ^ 1]
    assert float(contrastive_loss(swapped, 0.5).value) == pytest.approx(base, abs=1e-9)


def test_extreme_similarities_stay_finite():
    z = np.tile([[1.0, 0.0]], (6, 1))
    z[1::2] = [-1.0, 0.0]
    value = float(contrastive_loss(z, 0.01).value)
    assert math.isfinite(value)
    assert value > 100


def test_positives_pair_adjacent_rows():
    np.testing.assert_array_equal(positives(6), [1, 0, 3, 2, 5, 4])


def test_gradient_through_normalization(rng):
    x = tn.Tensor(rng.normal(size=(6, 4)), requires_grad=True)

    def value():
        return float(contrastive_loss(tn.l2_normalize(x.value).value, 0.3).value)

    with tn.Graph() as graph:
        tn.backward(nt_xent(ContrastiveBatch(tn.l2_normalize(x), 0.3)), graph)
    assert relative_error(x.grad, numeric_grad(value, x.value).reshape(x.shape)) <= 1e-4


@pytest.mark.parametrize("z, tau", [
    (np.ones((3, 2)) / math.sqrt(2), 0.5),
    (np.ones((2, 2)), 0.5),
    (np.array([[1.0, 0.0], [0.0, 1.0]]), 0.0),
    (np.array([[1.0, 0.0], [0.0, 1.0]]), -1.0),
])
def test_contract_violations(z, tau):
    with pytest.raises(ContractViolation):
        contrastive_loss(z, tau)


def test_pretext_loss_values():
    probs = np.array([[0.7, 0.1, 0.1, 0.1], [0.25, 0.25, 0.25, 0.25]])
    labels = one_hot([0, 3], 4)
    expected = -(math.log(0.7) + math.log(0.25)) / 2
    assert float(pretext_loss(probs, labels).value) == pytest.approx(expected)


def test_pretext_loss_floors_zero_probabilities():
    value = float(pretext_loss(np.array([[1.0, 0.0]]), one_hot([1], 2)).value)
    assert value == pytest.approx(-math.log(1e-12))


def test_pretext_loss_contracts():
    with pytest.raises(ContractViolation, match="one-hot"):
        pretext_loss(np.full((1, 2), 0.5), np.array([[0.5, 0.5]]))
    with pytest.raises(ContractViolation):
        pretext_loss(np.full((2, 4), 0.25), one_hot([0], 4))
    with pytest.raises(ContractViolation):
        one_hot([4], 4)


def test_lambda_schedule():
    weights = LossWeights()
    assert [weights.schedule(e) for e in range(40)] == [0.0] * 40
    assert weights.schedule(40) == 0.3
    assert weights.schedule(99) == 0.3
    assert LossWeights(constant=0.0).schedule(100) == 0.0
    assert LossWeights(constant=0.7).schedule(0) == 0.7
    by_step = LossWeights(warmup=5, unit="step")
    assert by_step.schedule(50, step=4) == 0.0
    assert by_step.schedule(0, step=5) == 0.3


def test_auto_balance_follows_running_ratio():
    weights = LossWeights(warmup=1, auto_balance=True, ema=0.5)
    balance = AutoBalance(weights.ema)
    assert balance.update(4.0, 2.0) == pytest.approx(2.0)
    assert balance.update(4.0, 1.0) == pytest.approx(3.0)
    assert balance.update(1.0, 0.0) == pytest.approx(3.0)
    assert weights.schedule(0, ratio=balance.ratio) == 0.0
    assert weights.schedule(1, ratio=balance.ratio) == pytest.approx(3.0)


@pytest.mark.parametrize("kwargs", [
    {"value": -0.1},
    {"warmup": -1},
    {"unit": "batch"},
    {"constant": -1.0},
    {"ema": 1.0},
])
def test_invalid_weights(kwargs):
    with pytest.raises(ConfigurationError):
        LossWeights(**kwargs)


def test_total_loss_combines_terms():
    c = tn.Tensor(np.asarray(2.0))
    p = tn.Tensor(np.asarray(0.5))
    weights = LossWeights()
    assert float(total_loss(c, p, weights, epoch=0).value) == 2.0
    assert float(total_loss(c, p, weights, epoch=40).value) == pytest.approx(2.15)
    assert total_loss(c, None, weights, epoch=40) is c


def test_zero_lambda_gives_zero_pretext_gradient():
    c = tn.Tensor(np.asarray(2.0), requires_grad=True)
    p = tn.Tensor(np.asarray(0.5), requires_grad=True)
    with tn.Graph() as graph:
        tn.backward(total_loss(c, p, LossWeights(constant=0.0), epoch=0), graph)
    assert float(c.grad) == 1.0
    assert float(p.grad) == 0.0


def test_total_loss_rejects_non_finite_terms():
    with pytest.raises(ContractViolation):
        total_loss(tn.Tensor(np.asarray(np.nan)), None, LossWeights(), 0)
    with pytest.raises(ContractViolation):
        total_loss(tn.Tensor(np.asarray(1.0)), tn.Tensor(np.asarray(np.inf)), LossWeights(), 0)
