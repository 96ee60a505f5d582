import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from freqmark import nn


def params64(classes=3, side=8, seed=0):
    p = nn.init_params(classes, np.random.default_rng(seed), side, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for k in p:
        if k.endswith(".b"):
            p[k] = rng.normal(0, 0.1, p[k].shape)
    return p


def direct_conv(x, w, b):
    """Plain loops over output pixels: 3x3 'same' convolution, NHWC / HWIO."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i:i + 3, j:j + 3, :]
            out[:, i, j, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


def direct_forward(p, x):
    a = np.maximum(direct_conv(x, p["conv1.w"], p["conv1.b"]), 0)
    a = a.reshape(a.shape[0], a.shape[1] // 2, 2, a.shape[2] // 2, 2, -1).max(axis=(2, 4))
    a = np.maximum(direct_conv(a, p["conv2.w"], p["conv2.b"]), 0)
    a = a.reshape(a.shape[0], a.shape[1] // 2, 2, a.shape[2] // 2, 2, -1).max(axis=(2, 4))
    f = np.maximum(a.reshape(len(x), -1) @ p["fc1.w"] + p["fc1.b"], 0)
    return f @ p["fc2.w"] + p["fc2.b"], f


def test_shapes_and_order():
    shapes = nn.param_shapes(10, 32)
    assert tuple(shapes) == nn.PARAM_ORDER
    assert shapes["conv1.w"] == (3, 3, 3, 16) and shapes["conv2.w"] == (3, 3, 16, 32)
    assert shapes["fc1.w"] == (8 * 8 * 32, 64) and shapes["fc2.w"] == (64, 10)
    p = nn.init_params(10, np.random.default_rng(0))
    assert all(v.dtype == np.float32 for v in p.values())


def test_forward_matches_direct_reference():
    p = params64(4, 8, seed=3)
    x = np.random.default_rng(4).uniform(0, 1, (1, 8, 8, 3))
    logits, feats = nn.forward(p, x)
    ref_logits, ref_feats = direct_forward(p, x)
    assert np.abs(logits - ref_logits).max() < 1e-5
    assert np.abs(feats - ref_feats).max() < 1e-5
    assert feats.shape == (1, nn.FEATURES)


def test_forward_zero_params_and_duplicates():
    p = {k: np.zeros_like(v) for k, v in params64(5, 8).items()}
    logits, _ = nn.forward(p, np.random.default_rng(0).uniform(0, 1, (3, 8, 8, 3)))
    assert np.all(logits == 0)
    assert np.allclose(nn.softmax(logits), 0.2)
    p = params64(5, 8)
    x = np.random.default_rng(1).uniform(0, 1, (1, 8, 8, 3))
    logits, _ = nn.forward(p, np.concatenate([x, x]))
    assert np.array_equal(logits[0], logits[1])
    with pytest.raises(ValueError):
        nn.forward(p, np.zeros((1, 16, 16, 3)))


def test_cross_entropy_examples():
    loss, _ = nn.cross_entropy(np.zeros((4, 10)), np.arange(4))
    assert loss == pytest.approx(math.log(10))
    logits = np.zeros((1, 10))
    logits[0, 2] = 50
    assert nn.cross_entropy(logits, np.array([2]))[0] < 1e-9


def _fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def _rel(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
    _, g = nn.cross_entropy(z, y)
    assert _rel(g, _fd(lambda: nn.cross_entropy(z, y)[0], z)) < 1e-4
    p = nn.softmax(z)
    p[np.arange(5), y] -= 1
    assert np.allclose(g, p / 5)


def test_soft_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    z, t = rng.normal(size=(4, 3)), nn.softmax(rng.normal(size=(4, 3)))
    _, g = nn.soft_cross_entropy(z, t)
    assert _rel(g, _fd(lambda: nn.soft_cross_entropy(z, t)[0], z)) < 1e-4
    assert nn.soft_cross_entropy(np.log(t), t)[0] == pytest.approx(0, abs=1e-12)


def test_contrastive_examples():
    f = np.array([[0.0, 0.0], [0.5, 0.0]])
    assert nn.contrastive_loss(f, np.array([1, 1]), 1.0)[0] == pytest.approx(0.125)
    assert nn.contrastive_loss(f, np.array([1, 2]), 1.0)[0] == pytest.approx(0.125)
    far = np.array([[0.0, 0.0], [2.0, 0.0]])
    loss, g = nn.contrastive_loss(far, np.array([1, 2]), 1.0)
    assert loss == 0 and np.all(g == 0)


def test_contrastive_single_sample_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="freqmark.nn"):
        loss, g = nn.contrastive_loss(np.ones((1, 4)), np.array([0]))
    assert loss == 0 and np.all(g == 0)
    assert "batch of 1" in caplog.text


def test_contrastive_gradient():
    rng = np.random.default_rng(2)
    f = rng.normal(0, 0.4, (8, 5))
    y = np.array([0, 0, 1, 1, 0, 2, 2, 1])
    pairs = nn.random_pairs(8, rng)
    _, g = nn.contrastive_loss(f, y, 1.0, pairs)
    assert _rel(g, _fd(lambda: nn.contrastive_loss(f, y, 1.0, pairs)[0], f)) < 1e-4


@given(st.integers(0, 40), st.integers(0, 2 ** 31))
def test_random_pairs_is_matching(n, seed):
    pairs = nn.random_pairs(n, np.random.default_rng(seed))
    assert pairs.shape == (n // 2, 2)
    assert len(set(pairs.ravel().tolist())) == 2 * (n // 2)


def _batches(seed=5, classes=3):
    rng = np.random.default_rng(seed)
    mk = lambda n, y=None: (rng.uniform(0, 1, (n, 8, 8, 3)),  # noqa: E731
                            rng.integers(0, classes, n) if y is None else np.full(n, y))
    return mk(4), mk(2, 0), mk(3)


@pytest.mark.parametrize("scope", ["all", "watermark"])
def test_total_loss_gradient_all_params(scope):
    p = params64(3, 8, seed=7)
    pri, wm, att = _batches()
    pairs = nn.random_pairs(9, np.random.default_rng(0))
    w = nn.LossWeights(1.0, 0.7, 0.3, 1.0)
    _, _, grads = nn.total_loss(p, pri, wm, att, w, pairs, scope)
    f = lambda: nn.total_loss(p, pri, wm, att, w, pairs, scope)[0]  # noqa: E731
    rng = np.random.default_rng(9)
    for name in nn.PARAM_ORDER:
        # ten probes per tensor
        flat = p[name].reshape(-1)
        for idx in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + 1e-6
            hi = f()
            flat[idx] = old - 1e-6
            lo = f()
            flat[idx] = old
            num = (hi - lo) / 2e-6
            ana = grads[name].reshape(-1)[idx]
            assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-4), (name, idx, num, ana)


def test_total_loss_decomposition():
    p = params64(3, 8, seed=8)
    pri, wm, att = _batches(6)
    pairs = nn.random_pairs(9, np.random.default_rng(1))
    total, terms, _ = nn.total_loss(p, pri, wm, att, nn.LossWeights(0, 0, 0), pairs)
    assert total == terms["pri"]
    for name, w in (("wm", nn.LossWeights(1, 0, 0)), ("attk", nn.LossWeights(0, 1, 0)),
                    ("sim", nn.LossWeights(0, 0, 1))):
        total, terms, _ = nn.total_loss(p, pri, wm, att, w, pairs)
        assert total == pytest.approx(terms["pri"] + terms[name])
    total, terms, _ = nn.total_loss(p, pri, wm, None, nn.LossWeights(), nn.random_pairs(6, np.random.default_rng(2)))
    assert terms["attk"] == 0
    with pytest.raises(ValueError):
        nn.total_loss(p, None, wm, att)


def test_adam_hand_computed_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.1])}
    state = nn.AdamState.zeros_like(p)
    new, state = nn.adam_step(p, g, state, 0.01)
    # t=1: m = 0.1 g, v = 0.001 g^2, bias-corrected to g and g^2 -> step lr * g/(|g| + eps)
    expect = np.array([1.0 - 0.01 * 0.5 / (0.5 + 1e-8), -2.0 - 0.01 * 0.1 / (0.1 + 1e-8)])
    assert np.abs(new["w"] - expect).max() < 1e-7
    new2, _ = nn.adam_step(new, g, state, 0.01)
    m = 0.9 * 0.05 + 0.1 * 0.5
    v = 0.999 * 0.00025 + 0.001 * 0.25
    step = 0.01 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert new2["w"][0] == pytest.approx(expect[0] - step, abs=1e-7)


def test_adam_zero_grad_and_constant_grad():
    p = {"w": np.array([0.3, 0.4])}
    s = nn.AdamState.zeros_like(p)
    new, _ = nn.adam_step(p, {"w": np.zeros(2)}, s, 0.1)
    assert np.array_equal(new["w"], p["w"])
    cur, st_ = p, s
    for _ in range(200):
        prev = cur
        cur, st_ = nn.adam_step(cur, {"w": np.array([2.0, -3.0])}, st_, 0.01)
    assert np.allclose(np.abs(cur["w"] - prev["w"]), 0.01, rtol=1e-4)


def test_adam_rejects_non_finite_and_respects_trainable():
    p = {"a": np.ones(2), "b": np.ones(2)}
    s = nn.AdamState.zeros_like(p)
    with pytest.raises(nn.NonFiniteGradient):
        nn.adam_step(p, {"a": np.array([np.nan, 0]), "b": np.zeros(2)}, s, 0.1)
    new, _ = nn.adam_step(p, {"a": np.ones(2), "b": np.ones(2)}, s, 0.1, trainable=("a",))
    assert np.array_equal(new["b"], p["b"]) and not np.array_equal(new["a"], p["a"])


def test_step_lr():
    assert [nn.step_lr(1e-3, e, 15) for e in (0, 14, 15, 30)] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-5])


@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(z):
    assert np.allclose(nn.softmax(z).sum(axis=1), 1.0)
