"""Removal, extraction, evasion and false-trigger experiments on a trained checkpoint.

Every operation returns a new checkpoint or a table; the input checkpoint is
never modified.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import nn
from .attacks import (ATTACKS, EXTERNAL_KINDS, AttackRegistry, AttackSpec, CodecUnavailable,
                      attack_dataset, codec_available)
from .codec import compress_image
from .data import Dataset, derive_seed, make_rng
from .metrics import accuracy, predict_labels, wsr
from .train import Checkpoint, TrainConfig, _batches

log = logging.getLogger(__name__)


@dataclass
class AttackOutcome:
    attack: str
    params: str
    acc_before: float | None
    acc_after: float | None
    wsr_before: float | None
    wsr_after: float | None
    status: str = "ok"  # "ok" | "skipped"
    note: str = ""

    def __post_init__(self):
        for name in ("acc_before", "acc_after", "wsr_before", "wsr_after"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def write_outcomes(outcomes: Sequence[AttackOutcome], path: str | Path) -> Path:
    """CSV keyed (attack, param, acc, wsr) plus the before values and status."""
    path = Path(path)
    cols = ["attack", "param", "acc", "wsr", "acc_before", "wsr_before", "status"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        f = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        for o in outcomes:
            w.writerow([o.attack, o.params, f(o.acc_after), f(o.wsr_after), f(o.acc_before),
                        f(o.wsr_before), o.status])
    return path


# ---------------------------------------------------------------------------
# removal


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def prune(checkpoint: Checkpoint, rate: float) -> Checkpoint:
    """Zero the globally smallest-magnitude weights (biases exempt).

    Exactly ``round(rate * weight_count)`` entries are zeroed. Ties in
    magnitude are broken by tensor order, then position, so the result is
    deterministic and nested in ``rate``.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"pruning rate must lie in [0, 1], got {rate}")
    names = nn.WEIGHT_NAMES
    flat = np.concatenate([np.abs(checkpoint.params[k]).ravel() for k in names])
    count = _round_half_up(rate * flat.size)
    mask = np.ones(flat.size, dtype=bool)
    mask[np.argsort(flat, kind="stable")[:count]] = False
    params = {k: v.copy() for k, v in checkpoint.params.items()}
    start = 0
    for k in names:
        size = params[k].size
        params[k] = np.where(mask[start:start + size].reshape(params[k].shape), params[k],
                             np.float32(0)).astype(np.float32)
        start += size
    return checkpoint.with_params(params)


def zeroed_weights(checkpoint: Checkpoint) -> int:
    return int(sum((checkpoint.params[k] == 0).sum() for k in nn.WEIGHT_NAMES))


def quantize_tensor(w: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric uniform grid of ``2**bits`` levels over ``[-max|w|, max|w|]``."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in [1, 16], got {bits}")
    top = float(np.max(np.abs(w))) if w.size else 0.0
    if top == 0:
        return np.zeros_like(w)
    levels = 2 ** bits - 1
    idx = np.rint((w.astype(np.float64) / top + 1.0) * levels / 2.0)
    # written so that both endpoints reproduce +-top exactly
    return (top * (2.0 * idx / levels - 1.0)).astype(w.dtype)


def quantize_weights(checkpoint: Checkpoint, bits: int) -> Checkpoint:
    """Quantize every parameter tensor to ``bits`` and dequantize back to float."""
    return checkpoint.with_params({k: quantize_tensor(v, bits) for k, v in checkpoint.params.items()})


def _config(checkpoint: Checkpoint) -> TrainConfig:
    try:
        return TrainConfig.from_dict(checkpoint.config) if checkpoint.config else TrainConfig()
    except (ValueError, TypeError):
        return TrainConfig()


def finetune_last_layer(checkpoint: Checkpoint, data: Dataset, epochs: int = 100,
                        seed: int = 0, lr: float | None = None) -> Checkpoint:
    """Cross-entropy finetuning of the final dense layer only.

    Adam and the learning-rate schedule of the checkpoint's training config
    are reused. Since everything below the last layer is frozen, the
    features are computed once.
    """
    if data.num_classes != checkpoint.num_classes:
        raise ValueError(f"data has {data.num_classes} classes, checkpoint {checkpoint.num_classes}")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0 or not len(data):
        return checkpoint.copy()
    cfg = _config(checkpoint)
    base_lr = cfg.lr if lr is None else lr
    feats = checkpoint.features(data.images)
    labels = data.labels
    w, b = checkpoint.params["fc2.w"].copy(), checkpoint.params["fc2.b"].copy()
    sub = {"fc2.w": w, "fc2.b": b}
    state = nn.AdamState.zeros_like(sub)
    rng = make_rng(derive_seed(seed, 0xF1))
    steps = int(np.ceil(len(data) / cfg.batch_primary))
    for epoch in range(epochs):
        rate = nn.step_lr(base_lr, epoch, cfg.lr_decay_period, cfg.lr_decay_factor)
        for idx in _batches(len(data), min(cfg.batch_primary, len(data)), rng, steps):
            f = feats[idx]
            _, g = nn.cross_entropy(f @ sub["fc2.w"] + sub["fc2.b"], labels[idx])
            grads = {"fc2.w": f.T @ g, "fc2.b": g.sum(axis=0)}
            sub, state = nn.adam_step(sub, grads, state, rate)
    params = dict(checkpoint.params)
    params.update(sub)
    return checkpoint.with_params(params)


# ---------------------------------------------------------------------------
# extraction


def victim_targets(victim: Any, images: np.ndarray, mode: str, num_classes: int) -> np.ndarray:
    """Soft mode: victim softmax (temperature 1). Hard mode: one-hot victim argmax."""
    if mode == "soft":
        if hasattr(victim, "logits"):
            return nn.softmax(np.asarray(victim.logits(images), dtype=np.float64))
        if hasattr(victim, "predict_proba"):
            return np.asarray(victim.predict_proba(images), dtype=np.float64)
        raise ValueError("soft-label extraction needs an oracle exposing logits or probabilities")
    if mode == "hard":
        labels = predict_labels(victim, images)
        return np.eye(num_classes)[labels]
    raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")


def distill_extract(victim: Any, query_set: Dataset, mode: str = "soft", epochs: int = 40,
                    seed: int = 0, num_classes: int | None = None,
                    config: TrainConfig | None = None) -> Checkpoint:
    """Train a fresh surrogate of the desk architecture on the victim's answers.

    Labels of ``query_set`` are ignored. Soft mode minimizes the KL
    divergence to the victim's softmax; hard mode is cross-entropy to the
    victim's top-1 label.
    """
    num_classes = num_classes or getattr(victim, "num_classes", None) or query_set.num_classes
    cfg = config or TrainConfig(seed=seed)
    targets = victim_targets(victim, query_set.images, mode, num_classes)
    side = query_set.shape[0]
    params = nn.init_params(num_classes, make_rng(derive_seed(seed, 0xD157)), side)
    state = nn.AdamState.zeros_like(params)
    rng = make_rng(derive_seed(seed, 0xD158))
    n = len(query_set)
    steps = int(np.ceil(n / cfg.batch_primary))
    for epoch in range(epochs):
        rate = nn.step_lr(cfg.lr, epoch, cfg.lr_decay_period, cfg.lr_decay_factor)
        for idx in _batches(n, min(cfg.batch_primary, n), rng, steps):
            idx = np.sort(idx)
            logits, _, cache = nn.forward(params, nn.to_input(query_set.images[idx]), keep_cache=True)
            if mode == "soft":
                _, g = nn.soft_cross_entropy(logits, targets[idx])
            else:
                _, g = nn.cross_entropy(logits, targets[idx].argmax(axis=1))
            params, state = nn.adam_step(params, nn.backward(params, cache, g), state, rate)
    return Checkpoint(params, num_classes, side, nn.ARCH, state,
                      {"extraction": mode, "epochs": epochs, "seed": seed}, "", {"seed": seed}, epochs)


# ---------------------------------------------------------------------------
# evasion


def default_evasion_specs(jpeg_qualities: Sequence[int] = (50, 70, 90)) -> list[AttackSpec]:
    """Identity, each in-house kind at its default range, the external codecs and
    plain JPEG recompression at fixed qualities."""
    kinds = ("crop", "rotate", "scale", "gaussian_noise", "gaussian_blur", "brightness",
             "image_quantize", "color_quantize")
    specs = [AttackSpec("identity")] + [AttackSpec(k) for k in kinds]
    specs += [AttackSpec(k) for k in EXTERNAL_KINDS]
    specs += [AttackSpec.fixed("jpeg", quality=q) for q in jpeg_qualities]
    return specs


def _specs(registry: AttackRegistry | Sequence[AttackSpec] | None) -> list[AttackSpec]:
    if registry is None:
        return default_evasion_specs()
    return list(registry.specs if isinstance(registry, AttackRegistry) else registry)


def evasion_sweep(checkpoint: Any, verification: Dataset, target: int,
                  registry: AttackRegistry | Sequence[AttackSpec] | None = None,
                  test: Dataset | None = None, seed: int = 0, workers: int = 1
                  ) -> list[AttackOutcome]:
    """WSR on D_v (and optionally accuracy on ``test``) after each preprocessing attack.

    Attacks whose external codec is not configured are reported as
    ``skipped``. Results come back in spec order regardless of ``workers``.
    """
    specs = _specs(registry)
    base_wsr = wsr(checkpoint, verification, target)
    base_acc = accuracy(checkpoint, test) if test is not None else None

    def run(item):
        i, spec = item
        if spec.kind in EXTERNAL_KINDS and not codec_available(spec.kind):
            return AttackOutcome(spec.kind, spec.describe(), base_acc, None, base_wsr, None,
                                 "skipped", "codec unavailable")
        try:
            dv = attack_dataset(spec, verification, derive_seed(seed, i, 0))
            acc_after = None
            if test is not None:
                acc_after = accuracy(checkpoint, attack_dataset(spec, test, derive_seed(seed, i, 1)))
        except CodecUnavailable as exc:
            return AttackOutcome(spec.kind, spec.describe(), base_acc, None, base_wsr, None,
                                 "skipped", str(exc))
        return AttackOutcome(spec.kind, spec.describe(), base_acc, acc_after, base_wsr,
                             wsr(checkpoint, dv, target))

    items = list(enumerate(specs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, items))
    return [run(it) for it in items]


# ---------------------------------------------------------------------------
# false triggering


FORGERY_KINDS = ("gaussian_noise", "gaussian_blur", "image_quantize", "color_quantize")


def false_trigger_audit(checkpoint: Any, clean_pool: Dataset, target: int, quality: int = 90,
                        seed: int = 0) -> list[dict]:
    """WSR of candidate trigger sets forged from ``clean_pool``.

    Rows: the unmodified pool, the true recipe (compression at ``quality``)
    and one forgery per non-JPEG preprocessing op at its default magnitude,
    plus the external codecs when configured (``skipped`` otherwise).
    """
    if not len(clean_pool):
        raise ValueError("clean pool is empty")
    rows = [{"forgery": "clean", "params": "", "wsr": wsr(checkpoint, clean_pool, target),
             "status": "ok"}]
    forged = clean_pool.replace(images=compress_image(clean_pool.images, quality), provenance="forged")
    rows.append({"forgery": "jpeg", "params": f"quality={quality}",
                 "wsr": wsr(checkpoint, forged, target), "status": "ok"})
    for i, kind in enumerate(FORGERY_KINDS + EXTERNAL_KINDS):
        spec = AttackSpec(kind)
        if kind not in ATTACKS or (kind in EXTERNAL_KINDS and not codec_available(kind)):
            rows.append({"forgery": kind, "params": spec.describe(), "wsr": None, "status": "skipped"})
            continue
        try:
            ds = attack_dataset(spec, clean_pool, derive_seed(seed, 0xFA15E, i))
        except CodecUnavailable:
            rows.append({"forgery": kind, "params": spec.describe(), "wsr": None, "status": "skipped"})
            continue
        rows.append({"forgery": kind, "params": spec.describe(), "wsr": wsr(checkpoint, ds, target),
                     "status": "ok"})
    return rows


def outcome_dict(o: AttackOutcome) -> dict:
    return asdict(o)
