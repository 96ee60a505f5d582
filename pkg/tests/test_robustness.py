import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqmark import nn
from freqmark.attacks import AttackSpec
from freqmark.metrics import accuracy, wsr
from freqmark.robustness import (AttackOutcome, default_evasion_specs, distill_extract,
                                 evasion_sweep, false_trigger_audit, finetune_last_layer, prune,
                                 quantize_tensor, quantize_weights, write_outcomes, zeroed_weights)
from freqmark.train import Checkpoint


def n_weights(ck):
    return sum(ck.params[k].size for k in nn.WEIGHT_NAMES)


def test_prune_extremes(tiny_model, tiny):
    same = prune(tiny_model, 0.0)
    assert all(same.params[k].tobytes() == tiny_model.params[k].tobytes() for k in nn.PARAM_ORDER)
    dead = prune(tiny_model, 1.0)
    assert zeroed_weights(dead) == n_weights(tiny_model)
    assert all(np.array_equal(dead.params[k], tiny_model.params[k]) for k in ("conv1.b", "fc2.b"))
    # all weights zero: the prediction is a constant, so accuracy on a balanced set is 1/C
    assert accuracy(dead, tiny) == pytest.approx(1 / 3)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_prune_exact_count_and_monotone(tiny_model, a, b):
    a, b = sorted((a, b))
    n = n_weights(tiny_model)
    pa, pb = prune(tiny_model, a), prune(tiny_model, b)
    base = zeroed_weights(tiny_model)
    assert zeroed_weights(pa) == max(base, int(np.floor(a * n + 0.5))) or base == 0
    assert zeroed_weights(pa) <= zeroed_weights(pb)


def test_prune_zeroes_smallest(tiny_model):
    pr = prune(tiny_model, 0.3)
    flat_old = np.concatenate([np.abs(tiny_model.params[k]).ravel() for k in nn.WEIGHT_NAMES])
    flat_new = np.concatenate([pr.params[k].ravel() for k in nn.WEIGHT_NAMES])
    kept = flat_old[flat_new != 0]
    cut = flat_old[flat_new == 0]
    assert cut.max() <= kept.min()
    with pytest.raises(ValueError):
        prune(tiny_model, 1.5)


def test_quantize_tensor_properties():
    w = np.random.default_rng(0).normal(size=500).astype(np.float32)
    for bits in (1, 2, 4, 8):
        q = quantize_tensor(w, bits)
        assert len(np.unique(q)) <= 2 ** bits
        assert q.dtype == np.float32
    top = np.abs(w).argmax()
    assert quantize_tensor(w, 3)[top] == w[top]
    assert np.all(quantize_tensor(np.zeros(4, np.float32), 4) == 0)
    with pytest.raises(ValueError):
        quantize_tensor(w, 17)


def test_quantize_16_bits_near_lossless(tiny_model, tiny):
    q = quantize_weights(tiny_model, 16)
    assert abs(accuracy(q, tiny) - accuracy(tiny_model, tiny)) < 0.01
    assert all(len(np.unique(q.params[k])) <= 2 ** 16 for k in nn.PARAM_ORDER)


def test_lab_ops_do_not_touch_input(tiny_model, tiny):
    before = tiny_model.to_bytes()
    prune(tiny_model, 0.5)
    quantize_weights(tiny_model, 2)
    finetune_last_layer(tiny_model, tiny, 1)
    assert tiny_model.to_bytes() == before


def test_finetune_freezes_all_but_last(tiny_model, tiny):
    out = finetune_last_layer(tiny_model, tiny, 3)
    for k in nn.PARAM_ORDER:
        assert (out.params[k].tobytes() == tiny_model.params[k].tobytes()) == (k not in nn.LAST_LAYER)
    zero = finetune_last_layer(tiny_model, tiny, 0)
    assert all(zero.params[k].tobytes() == tiny_model.params[k].tobytes() for k in nn.PARAM_ORDER)
    with pytest.raises(ValueError):
        finetune_last_layer(tiny_model, tiny.replace(num_classes=5), 1)


def test_distill_constant_victim(tiny):
    class Constant:
        num_classes = 3

        def predict(self, images):
            return np.full(len(images), 2)

    sur = distill_extract(Constant(), tiny, "hard", epochs=15, seed=1)
    assert (sur.predict(tiny.images) == 2).all()
    with pytest.raises(ValueError):
        distill_extract(Constant(), tiny, "soft", epochs=1)
    with pytest.raises(ValueError):
        distill_extract(Constant(), tiny, "medium", epochs=1)


def test_distill_soft_uses_victim_probabilities(tiny_model, tiny):
    sur = distill_extract(tiny_model, tiny, "soft", epochs=1, seed=0)
    assert isinstance(sur, Checkpoint) and sur.num_classes == 3


def test_evasion_identity_and_skips(tiny_model, tiny_split, monkeypatch):
    monkeypatch.delenv("FREQMARK_WEBP_CMD", raising=False)
    monkeypatch.delenv("FREQMARK_JPEG2000_CMD", raising=False)
    _, _, dv = tiny_split
    out = evasion_sweep(tiny_model, dv, 0, default_evasion_specs())
    byname = {o.attack: o for o in out}
    assert byname["identity"].wsr_after == wsr(tiny_model, dv, 0) == byname["identity"].wsr_before
    assert byname["webp"].status == "skipped" and byname["jpeg2000"].status == "skipped"
    again = evasion_sweep(tiny_model, dv, 0, default_evasion_specs(), workers=3)
    assert [o.wsr_after for o in again] == [o.wsr_after for o in out]


def test_outcome_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        AttackOutcome("x", "", 1.2, None, None, None)
    path = write_outcomes([AttackOutcome("prune", "rate=0.5", 0.9, 0.8, 1.0, 0.95)], tmp_path / "o.csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("attack,param,acc,wsr")
    assert lines[1].startswith("prune,rate=0.5,0.800000,0.950000")


def test_false_trigger_table(tiny_model, tiny):
    rows = false_trigger_audit(tiny_model, tiny, 0)
    names = [r["forgery"] for r in rows]
    assert names[:2] == ["clean", "jpeg"]
    assert {"gaussian_noise", "gaussian_blur", "image_quantize", "color_quantize"} <= set(names)
    assert all(r["wsr"] is None or 0 <= r["wsr"] <= 1 for r in rows)
    assert rows == false_trigger_audit(tiny_model, tiny, 0)


def test_evasion_custom_specs(tiny_model, tiny_split):
    _, _, dv = tiny_split
    out = evasion_sweep(tiny_model, dv, 0, [AttackSpec.fixed("jpeg", quality=90)], test=dv)
    assert out[0].acc_after is not None and out[0].status == "ok"
