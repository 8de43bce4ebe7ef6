"""Gradient and numerics checks for the neural-net core.

Every backward pass is compared against central finite differences
(step 1e-5, relative tolerance 1e-4); closed-form losses are compared
against independent formulations.
"""

from __future__ import annotations

import numpy as np
import pytest

from mixlink import nn
from mixlink.seeding import rng_for

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(fn, arr, eps=FD_STEP):
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        f_plus = fn()
        arr[idx] = orig - eps
        f_minus = fn()
        arr[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def assert_close_grads(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < FD_RTOL, f"max rel err {rel.max():.3e}"


def check_module_grads(module, x, rng):
    """Weighted-sum loss; checks every parameter plus the input gradient."""
    y = module.forward(x, train=True)
    w = rng.normal(size=y.shape)

    def loss():
        return float((module.forward(x, train=False) * w).sum())

    params = module.params() if isinstance(module, nn.Chain) else module.params
    grads = module.grads() if isinstance(module, nn.Chain) else module.grads
    for g in grads.values():
        g[...] = 0.0
    module.forward(x, train=True)
    dx = module.backward(w)
    for name, p in params.items():
        assert_close_grads(grads[name], numeric_grad(loss, p))
    assert_close_grads(dx, numeric_grad(loss, x))


def test_softmax_rows_sum_to_one():
    rng = rng_for(7, "softmax")
    p = nn.softmax(rng.normal(size=(20, 6)) * 30)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.isfinite(p).all()


def test_softmax_matches_naive_on_moderate_logits():
    rng = rng_for(7, "softmax-naive")
    z = rng.normal(size=(10, 4))
    naive = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert np.allclose(nn.softmax(z), naive, atol=1e-12)


def test_softmax_backward_matches_jacobian():
    rng = rng_for(7, "softmax-jac")
    z = rng.normal(size=(1, 5))
    p = nn.softmax(z)[0]
    dprobs = rng.normal(size=(1, 5))
    jac = np.diag(p) - np.outer(p, p)
    expected = dprobs[0] @ jac
    got = nn.softmax_backward(p[None, :], dprobs)[0]
    assert np.allclose(got, expected, atol=1e-12)


def test_cross_entropy_matches_log_softmax():
    rng = rng_for(7, "ce")
    z = rng.normal(size=(12, 3)) * 5
    labels = rng.integers(0, 3, size=12)
    loss, _ = nn.cross_entropy(z, labels)
    p = nn.softmax(z)
    expected = -np.log(p[np.arange(12), labels]).mean()
    assert loss == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_gradient():
    rng = rng_for(7, "ce-grad")
    z = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    _, dz = nn.cross_entropy(z, labels)
    num = numeric_grad(lambda: nn.cross_entropy(z, labels)[0], z)
    assert_close_grads(dz, num)


def test_binary_cross_entropy_matches_probability_form():
    rng = rng_for(7, "bce")
    z = rng.normal(size=(15,)) * 3
    y = rng.integers(0, 2, size=15).astype(float)
    loss, _ = nn.binary_cross_entropy(z, y)
    p = nn.sigmoid(z)
    expected = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert loss == pytest.approx(expected, rel=1e-10)


def test_binary_cross_entropy_stable_at_extreme_logits():
    z = np.array([1000.0, -1000.0])
    y = np.array([1.0, 0.0])
    loss, dz = nn.binary_cross_entropy(z, y)
    assert np.isfinite(loss) and loss < 1e-6
    assert np.isfinite(dz).all()


def test_binary_cross_entropy_gradient():
    rng = rng_for(7, "bce-grad")
    z = rng.normal(size=(9,))
    y = rng.integers(0, 2, size=9).astype(float)
    _, dz = nn.binary_cross_entropy(z, y)
    num = numeric_grad(lambda: nn.binary_cross_entropy(z, y)[0], z)
    assert_close_grads(dz, num)


def test_sigmoid_extremes_and_symmetry():
    assert nn.sigmoid(np.array([0.0]))[0] == pytest.approx(0.5)
    big = nn.sigmoid(np.array([800.0, -800.0]))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)
    x = np.linspace(-5, 5, 21)
    assert np.allclose(nn.sigmoid(x) + nn.sigmoid(-x), 1.0, atol=1e-12)


def test_linear_grad():
    rng = rng_for(11, "linear")
    layer = nn.Linear(4, 3, rng)
    check_module_grads(layer, rng.normal(size=(5, 4)), rng)


def test_layernorm_grad():
    rng = rng_for(11, "layernorm")
    layer = nn.LayerNorm(6)
    layer.params["g"] = rng.normal(1.0, 0.2, size=6)
    layer.params["b"] = rng.normal(size=6)
    check_module_grads(layer, rng.normal(size=(4, 6)), rng)


def test_frozen_batchnorm_grad():
    rng = rng_for(11, "fbn-grad")
    layer = nn.FrozenBatchNorm(5)
    layer.calibrate(rng.normal(loc=2.0, scale=1.5, size=(40, 5)))
    layer.params["g"] = rng.normal(1.0, 0.2, size=5)
    layer.params["b"] = rng.normal(size=5)
    check_module_grads(layer, rng.normal(size=(4, 5)), rng)


def test_mlp_grad():
    rng = rng_for(11, "mlp")
    net = nn.mlp([5, 8, 8, 2], rng)
    check_module_grads(net, rng.normal(size=(6, 5)), rng)


def test_transformer_block_grad():
    rng = rng_for(11, "block")
    block = nn.TransformerBlock(d_model=8, n_heads=2, d_ff=16, rng=rng)
    check_module_grads(block, rng.normal(size=(5, 8)), rng)


def test_transformer_stack_grad():
    rng = rng_for(11, "stack")
    net = nn.transformer_stack(d_model=6, n_layers=2, n_heads=2, d_ff=12, rng=rng)
    check_module_grads(net, rng.normal(size=(4, 6)), rng)


def test_single_token_attention_equals_full_multihead():
    """Oracle: explicit per-head attention over a length-1 sequence.

    Each token is its own sequence, so softmax(q k^T / sqrt(d_h)) is the
    scalar 1 for every head and the block must equal v @ wo + bo.
    """
    rng = rng_for(11, "attn-oracle")
    d_model, n_heads = 8, 4
    attn = nn.SingleTokenAttention(d_model, n_heads, rng)
    x = rng.normal(size=(7, d_model))
    d_h = d_model // n_heads
    p = attn.params
    rows = []
    for token in x:
        heads = []
        for h in range(n_heads):
            sl = slice(h * d_h, (h + 1) * d_h)
            q = token @ p["wq"][:, sl]
            k = token @ p["wk"][:, sl]
            v = token @ p["wv"][:, sl]
            score = np.exp(q @ k / np.sqrt(d_h))
            weight = score / score  # softmax over the single key
            heads.append(weight * v)
        rows.append(np.concatenate(heads) @ p["wo"] + p["bo"])
    assert np.allclose(attn.forward(x), np.array(rows), atol=1e-12)


def test_attention_output_independent_of_query_key_weights():
    rng = rng_for(11, "attn-qk")
    attn = nn.SingleTokenAttention(6, 2, rng)
    x = rng.normal(size=(3, 6))
    before = attn.forward(x)
    attn.params["wq"][...] = rng.normal(size=attn.params["wq"].shape)
    attn.params["wk"][...] = 0.0
    assert np.array_equal(attn.forward(x), before)


def test_frozen_batchnorm_identity_by_default():
    layer = nn.FrozenBatchNorm(4)
    x = rng_for(3, "fbn").normal(size=(10, 4))
    assert np.allclose(layer.forward(x), x, atol=1e-4)


def test_frozen_batchnorm_calibration_standardizes_reference():
    rng = rng_for(3, "fbn-cal")
    x = rng.normal(loc=5.0, scale=3.0, size=(200, 4))
    layer = nn.FrozenBatchNorm(4)
    layer.calibrate(x)
    y = layer.forward(x)
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(y.std(axis=0), 1.0, atol=1e-2)


def test_frozen_batchnorm_is_per_sample_after_calibration():
    rng = rng_for(3, "fbn-batch")
    ref = rng.normal(size=(50, 3))
    layer = nn.FrozenBatchNorm(3)
    layer.calibrate(ref)
    x = rng.normal(size=(8, 3))
    full = layer.forward(x)
    rowwise = np.vstack([layer.forward(x[i:i + 1]) for i in range(8)])
    assert np.array_equal(full, rowwise)


def test_sgd_zero_lr_leaves_params_unchanged():
    rng = rng_for(5, "sgd0")
    net = nn.mlp([3, 4, 2], rng)
    before = nn.snapshot(net.params())
    opt = nn.Sgd(net.params(), nn.SgdConfig(lr=0.0, momentum=0.9, weight_decay=5e-4))
    x = rng.normal(size=(6, 3))
    y = net.forward(x, train=True)
    net.backward(np.ones_like(y))
    opt.step(net.grads())
    assert nn.params_l2_delta(before, net.params()) == 0.0


def test_sgd_single_step_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    opt = nn.Sgd(p, nn.SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.01))
    g = {"w": np.array([0.5, 0.5])}
    opt.step(g)
    # v = g + wd*p = [0.51, 0.48]; p -= 0.1*v
    assert np.allclose(p["w"], [1.0 - 0.051, -2.0 - 0.048], atol=1e-15)
    opt.step(g)
    # v = 0.9*v_prev + g + wd*p_new
    v2 = 0.9 * np.array([0.51, 0.48]) + np.array([0.5, 0.5]) + 0.01 * np.array([0.949, -2.048])
    assert np.allclose(p["w"], np.array([0.949, -2.048]) - 0.1 * v2, atol=1e-15)


def test_sgd_momentum_accumulates_velocity():
    p = {"w": np.zeros(1)}
    opt = nn.Sgd(p, nn.SgdConfig(lr=1.0, momentum=0.5, weight_decay=0.0))
    g = {"w": np.ones(1)}
    opt.step(g)   # v=1, p=-1
    opt.step(g)   # v=1.5, p=-2.5
    assert p["w"][0] == pytest.approx(-2.5)


def test_params_digest_tracks_content():
    rng = rng_for(5, "digest")
    net = nn.mlp([3, 3, 1], rng)
    d1 = nn.params_digest(net.params())
    assert d1 == nn.params_digest(net.params())
    net.params()["lin0.w"][0, 0] += 1e-9
    assert nn.params_digest(net.params()) != d1


def test_chain_namespaces_parameters():
    rng = rng_for(5, "ns")
    net = nn.mlp([2, 3, 1], rng)
    assert set(net.params()) == {"lin0.w", "lin0.b", "lin1.w", "lin1.b"}
    stack = nn.transformer_stack(4, 1, 2, 8, rng)
    assert "block0.attn.wq" in stack.params()
    assert "block0.ffn.lin1.w" in stack.params()


def test_grads_accumulate_across_backward_calls():
    rng = rng_for(5, "accum")
    layer = nn.Linear(3, 2, rng)
    x1, x2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    layer.forward(x1, train=True)
    layer.backward(np.ones((4, 2)))
    g_once = layer.grads["w"].copy()
    layer.forward(x2, train=True)
    layer.backward(np.ones((4, 2)))
    expected = g_once + x2.T @ np.ones((4, 2))
    assert np.allclose(layer.grads["w"], expected, atol=1e-12)
