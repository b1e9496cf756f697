import numpy as np
import pytest

from scatsimclr import tensornet as tn
from scatsimclr.errors import ConfigurationError, ContractViolation
from scatsimclr.losses import LossWeights, contrastive_loss, one_hot, pretext_loss, total_loss
from scatsimclr.network import (
    Adapter,
    AdapterConfig,
    HeadsConfig,
    LinearProbe,
    PretextHead,
    ProjectionHead,
    ScatSimCLR,
    adapter_forward,
    adapter_parameter_count,
    linear_probe_forward,
    pretext_forward,
    projection_forward,
)
from scatsimclr.scattering import ScatterConfig, channel_count

from conftest import numeric_grad, relative_error


def small_adapter(in_channels=6, blocks=2, dtype=np.float64, **kwargs):
    cfg = AdapterConfig(block_count=blocks, hidden_dim=8, repr_dim=5, pool_grid=2, **kwargs)
    return Adapter(cfg, in_channels, np.random.default_rng(0), dtype)


def test_adapter_output_shape(rng):
    adapter = small_adapter()
    h = adapter_forward(rng.normal(size=(4, 6, 4, 4)), adapter, mode="train")
    assert h.shape == (4, 5)


def test_adapter_parameter_count_formula():
    adapter = small_adapter(in_channels=6, blocks=3)
    assert adapter.parameter_count() == adapter_parameter_count(adapter.cfg, 6)
    assert adapter.parameter_count() == 6 * 4 * 8 + 8 + 3 * (2 * (8 * 8 + 8) + 2 * 8) + 8 * 5 + 5


def test_parameter_counts_increase_with_blocks():
    channels = 3 * channel_count(2, 16)
    counts = [adapter_parameter_count(AdapterConfig(block_count=b), channels) for b in (8, 12, 16, 30)]
    assert counts == sorted(counts)
    assert len(set(counts)) == 4


def test_parameter_names():
    adapter = small_adapter(blocks=1)
    assert list(adapter.params) == [
        "stem.weight", "stem.bias",
        "block00.dense1.weight", "block00.dense1.bias",
        "block00.bn.gamma", "block00.bn.beta",
        "block00.dense2.weight", "block00.dense2.bias",
        "out.weight", "out.bias",
    ]
    assert set(adapter.params.buffers) == {
        "scatter_mean", "scatter_std", "block00.bn.running_mean", "block00.bn.running_var",
    }


def test_statistics_standardize_pooled_channels(rng):
    adapter = small_adapter()
    a = rng.normal(loc=3.0, scale=2.0, size=(32, 6, 4, 4))
    adapter.set_statistics(a)
    pooled = adapter.pooled(a).reshape(32, 6, 4)
    np.testing.assert_allclose(pooled.mean(axis=(0, 2)), 0.0, atol=1e-9)
    np.testing.assert_allclose(pooled.std(axis=(0, 2)), 1.0, atol=1e-9)


def test_eval_mode_does_not_touch_running_statistics(rng):
    adapter = small_adapter()
    a = rng.normal(size=(4, 6, 4, 4))
    before = adapter.params.checksum()
    first = adapter.forward(a, mode="eval").value
    assert adapter.params.checksum() == before
    np.testing.assert_array_equal(adapter.forward(a, mode="eval").value, first)
    adapter.forward(a, mode="train")
    assert adapter.params.checksum() != before


def test_eval_rows_are_independent_of_the_batch(rng):
    adapter = small_adapter()
    a = rng.normal(size=(5, 6, 4, 4))
    together = adapter.forward(a).value
    alone = adapter.forward(a[2:3]).value
    np.testing.assert_allclose(together[2:3], alone, atol=1e-12)


def test_zero_init_residual_starts_as_identity_blocks(rng):
    adapter = small_adapter(zero_init_residual=True)
    for k in range(2):
        assert not np.any(adapter.params[f"block{k:02d}.dense2.weight"].value)


def test_adapter_rejects_wrong_channels(rng):
    with pytest.raises(ContractViolation, match="scattering maps"):
        small_adapter().forward(rng.normal(size=(2, 5, 4, 4)))
    with pytest.raises(ContractViolation, match="mode"):
        small_adapter().forward(rng.normal(size=(2, 6, 4, 4)), mode="inference")


def test_projection_is_unit_norm(rng):
    head = ProjectionHead(5, 3, np.random.default_rng(1))
    z = projection_forward(rng.normal(size=(7, 5)), head).value
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)


def test_pretext_head_outputs_distributions(rng):
    head = PretextHead(5, HeadsConfig(pretext_hidden=6, pretext_classes=4), np.random.default_rng(2))
    probs = pretext_forward(rng.normal(size=(3, 5)), head).value
    assert probs.shape == (3, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    train_a = pretext_forward(rng.normal(size=(3, 5)), head, "train", np.random.default_rng(3))
    assert train_a.shape == (3, 4)


def test_linear_probe(rng):
    probe = LinearProbe(5, 3, init="zeros")
    probs = linear_probe_forward(rng.normal(size=(4, 5)), probe).value
    np.testing.assert_allclose(probs, 1.0 / 3.0)
    assert probe.params["dense.weight"].value.dtype == np.float64
    with pytest.raises(ContractViolation):
        LinearProbe(5, 1)
    with pytest.raises(ConfigurationError):
        LinearProbe(5, 3, init="normal")


def test_heads_config_validation():
    with pytest.warns(UserWarning, match="pretext classes"):
        HeadsConfig(pretext_classes=6)
    with pytest.raises(ConfigurationError):
        HeadsConfig(pretext_classes=1)
    with pytest.raises(ConfigurationError):
        HeadsConfig(pretext_dropout=1.0)
    with pytest.raises(ConfigurationError):
        AdapterConfig(block_count=0)


def test_model_parameter_sets():
    model = ScatSimCLR(ScatterConfig(J=2, L=4), 16, AdapterConfig(block_count=1, hidden_dim=8, repr_dim=6),
                       HeadsConfig(proj_dim=4, pretext_hidden=5), pretext="rotation", seed=3)
    assert list(model.param_sets()) == ["adapter", "projection", "pretext"]
    counts = model.parameter_counts()
    assert counts["total"] == counts["adapter"] + counts["projection"] + counts["pretext"]
    assert counts["projection"] == 6 * 6 + 6 + 6 * 4 + 4
    no_pretext = ScatSimCLR(ScatterConfig(J=2, L=4), 16, AdapterConfig(block_count=1, hidden_dim=8, repr_dim=6),
                            HeadsConfig(proj_dim=4, pretext_hidden=5), pretext=None, seed=3)
    assert list(no_pretext.param_sets()) == ["adapter", "projection"]
    np.testing.assert_array_equal(no_pretext.adapter.params["stem.weight"].value,
                                  model.adapter.params["stem.weight"].value)


def test_end_to_end_gradients(rng):
    """total_loss gradients reach every head and match central differences."""
    model = ScatSimCLR(ScatterConfig(J=2, L=4), 16, AdapterConfig(block_count=1, hidden_dim=6, repr_dim=5),
                       HeadsConfig(proj_dim=4, pretext_hidden=6, pretext_dropout=0.2), seed=1, dtype=np.float64)
    channels = model.in_channels
    a = rng.normal(size=(6, channels, 4, 4))
    model.adapter.set_statistics(a)
    targets = one_hot([0, 1, 2, 3, 1, 0], 4)
    weights = LossWeights(constant=0.4)

    def forward():
        h = model.adapter.forward(a, mode="train")
        z = model.projection.forward(h)
        probs = model.pretext_head.forward(h, "train", np.random.default_rng(9))
        return total_loss(contrastive_loss(z, 0.5), pretext_loss(probs, targets), weights, epoch=0)

    model.zero_grad()
    with tn.Graph() as graph:
        tn.backward(forward(), graph)

    def value():
        return float(forward().value)

    checked = 0
    for set_name, params in model.param_sets().items():
        for name, tensor in params.items():
            entries = rng.choice(tensor.value.size, size=min(4, tensor.value.size), replace=False)
            analytic = tensor.grad.reshape(-1)[entries]
            numeric = numeric_grad(value, tensor.value, eps=1e-5, entries=entries)
            if np.linalg.norm(numeric) < 1e-7 and np.linalg.norm(analytic) < 1e-7:
                continue
            assert relative_error(analytic, numeric) <= 1e-3, f"{set_name}/{name}"
            checked += 1
    assert checked > 10
