import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import central_fd, random_model, rel_err
from lifelong_nav.backbone import (
    BackboneSpec,
    backward,
    forward,
    init_backbone,
    log_softmax,
    per_sample_grad_A,
    per_sample_grad_B,
)
from lifelong_nav.delora import ActiveAdapters, init_bank
from lifelong_nav.errors import ConfigurationError, ContractViolation, DimensionError
from lifelong_nav.learning import task_loss


def plain_mlp(backbone, x):
    """Oracle: the frozen network written out without any adapter code."""
    h = np.atleast_2d(x)
    n = len(backbone.W)
    for l, (W, b) in enumerate(zip(backbone.W, backbone.b)):
        h = h @ W.T + b
        if l < n - 1:
            h = np.tanh(h)
    return h


def test_spec_validation():
    assert BackboneSpec().layer_dims == (32, 64, 64, 4)
    assert BackboneSpec().layer_shape(0) == (64, 32)
    with pytest.raises(ConfigurationError):
        BackboneSpec((8, 4))
    with pytest.raises(ConfigurationError):
        BackboneSpec((8, 8, 5))


def test_weights_frozen_and_deterministic():
    a = init_backbone(BackboneSpec(), 3)
    b = init_backbone(BackboneSpec(), 3)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_backbone(BackboneSpec(), 4).checksum()
    with pytest.raises(ValueError):
        a.W[0][0, 0] = 1.0


def test_zero_adapters_are_identity(rng):
    spec = BackboneSpec()
    backbone = init_backbone(spec, 0)
    bank = init_bank(spec, 16, 1)
    x = rng.standard_normal((100, 32))
    ref = plain_mlp(backbone, x)
    assert np.array_equal(forward(backbone, ActiveAdapters(bank, (0,)), x).logits, ref)
    assert np.array_equal(forward(backbone, ActiveAdapters(bank, ()), x).logits, ref)
    assert np.array_equal(forward(backbone, None, x).logits, ref)


def test_single_vector_and_batch_agree(rng):
    _, backbone, bank = random_model(rng)
    ad = ActiveAdapters(bank, (0, 2))
    x = rng.standard_normal((5, backbone.spec.input_dim))
    batch = forward(backbone, ad, x).logits
    for i in range(5):
        np.testing.assert_allclose(forward(backbone, ad, x[i]).logits, batch[i], atol=1e-14)


def test_forward_matches_merged_weights(rng):
    _, backbone, bank = random_model(rng)
    active = (0, 1)
    x = rng.standard_normal((4, backbone.spec.input_dim))
    h = x
    for l in range(len(backbone.W)):
        W = backbone.W[l] + sum(bank.experts[i][l] for i in active) @ bank.A[l]
        h = h @ W.T + backbone.b[l]
        if l < len(backbone.W) - 1:
            h = np.tanh(h)
    np.testing.assert_allclose(forward(backbone, ActiveAdapters(bank, active), x).logits, h, atol=1e-12)


def test_dimension_checks(rng):
    _, backbone, bank = random_model(rng)
    with pytest.raises(DimensionError):
        forward(backbone, None, np.zeros(backbone.spec.input_dim + 1))


@pytest.mark.parametrize("trial", range(5))
def test_task_gradient_matches_fd(trial):
    rng = np.random.default_rng(100 + trial)
    _, backbone, bank = random_model(rng)
    ad = ActiveAdapters(bank, (0, 2))
    x = rng.standard_normal((6, backbone.spec.input_dim))
    y = rng.integers(0, 4, size=6)
    g = backward(forward(backbone, ad, x), backbone, ad, y)

    def loss():
        return task_loss(forward(backbone, ad, x).post[-1], y)

    num = central_fd(loss, bank.A + bank.experts[2])
    assert rel_err(g.A + g.B, num) < 1e-6
    assert g.loss == pytest.approx(loss())


def test_frozen_expert_gets_no_gradient(rng):
    _, backbone, bank = random_model(rng)
    ad = ActiveAdapters(bank, (0, 1))  # trainable expert 2 inactive
    x = rng.standard_normal((3, backbone.spec.input_dim))
    g = backward(forward(backbone, ad, x), backbone, ad, [0, 1, 2])
    assert g.B is None and g.expert is None
    assert len(g.A) == backbone.spec.n_layers


def test_stale_trace_rejected(rng):
    _, backbone, bank = random_model(rng)
    ad = ActiveAdapters(bank, (0,))
    x = rng.standard_normal((2, backbone.spec.input_dim))
    trace = forward(backbone, ad, x)
    bank.touch()
    with pytest.raises(ContractViolation):
        backward(trace, backbone, ad, [0, 1])
    with pytest.raises(ContractViolation):
        backward(forward(backbone, ad, x), backbone, ad, [0, 7])


def test_per_sample_gradients_average_to_batch(rng):
    _, backbone, bank = random_model(rng)
    ad = ActiveAdapters(bank, (1, 2))
    x = rng.standard_normal((7, backbone.spec.input_dim))
    y = rng.integers(0, 4, size=7)
    trace = forward(backbone, ad, x)
    g = backward(trace, backbone, ad, y)
    for ps, batch in zip(per_sample_grad_A(trace, backbone, ad, y), g.A):
        np.testing.assert_allclose(ps.mean(axis=0), batch, atol=1e-13)
    for ps, batch in zip(per_sample_grad_B(trace, backbone, ad, y), g.B):
        np.testing.assert_allclose(ps.mean(axis=0), batch, atol=1e-13)


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
def test_log_softmax_normalized(logits):
    lp = log_softmax(np.array(logits))
    assert np.exp(lp).sum() == pytest.approx(1.0)
    assert np.all(lp <= 1e-12)
