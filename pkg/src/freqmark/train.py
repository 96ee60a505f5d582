"""Watermarked training loop, checkpoints and feature export."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .attacks import AttackRegistry, build_attacked_epoch_set
from .data import Dataset, derive_seed, make_rng

log = logging.getLogger(__name__)

MAGIC = b"FQMKCKPT"
FORMAT_VERSION = 1
LOG_FIELDS = ("epoch", "L", "L_pri", "L_wm", "L_attk", "L_sim", "acc", "wsr", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_primary: int = 64
    batch_watermark: int = 8
    batch_attacked: int = 32
    lr: float = 1e-3
    lr_decay_period: int = 15
    lr_decay_factor: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    margin: float = 1.0
    wm_rate: float = 0.1
    quality: int = 90
    target: int = 0
    p: float = 0.5
    sim_scope: str = "all"
    seed: int = 0

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("invalid training config:\n  " + "\n  ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if min(self.batch_primary, self.batch_watermark, self.batch_attacked) < 1:
            out.append("batch sizes must be >= 1")
        if self.lr <= 0:
            out.append("lr must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            out.append("alpha, beta, gamma must be >= 0")
        if self.margin <= 0:
            out.append("margin must be > 0")
        if not 0 <= self.p <= 1:
            out.append("p must lie in [0, 1]")
        if not 0 < self.wm_rate < 1:
            out.append("wm_rate must lie in (0, 1)")
        if not 1 <= self.quality <= 100:
            out.append("quality must lie in [1, 100]")
        if self.sim_scope not in ("all", "watermark"):
            out.append("sim_scope must be 'all' or 'watermark'")
        return out

    @property
    def weights(self) -> nn.LossWeights:
        return nn.LossWeights(self.alpha, self.beta, self.gamma, self.margin)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown training option {k!r}")
            default = getattr(cls, k)
            kwargs[k] = type(default)(v)
        return cls(**kwargs)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    num_classes: int
    side: int = 32
    arch: str = nn.ARCH
    adam: nn.AdamState | None = None
    config: dict = field(default_factory=dict)
    fingerprint: str = ""
    rng_state: dict = field(default_factory=dict)
    epoch: int = 0

    def copy(self) -> "Checkpoint":
        adam = None
        if self.adam is not None:
            adam = nn.AdamState({k: v.copy() for k, v in self.adam.m.items()},
                                {k: v.copy() for k, v in self.adam.v.items()}, self.adam.t)
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.num_classes,
                          self.side, self.arch, adam, dict(self.config), self.fingerprint,
                          dict(self.rng_state), self.epoch)

    def with_params(self, params: dict) -> "Checkpoint":
        ck = self.copy()
        ck.params = {k: np.asarray(params[k], dtype=np.float32) for k in nn.PARAM_ORDER}
        return ck

    # prediction oracle interface
    def logits(self, images: np.ndarray) -> np.ndarray:
        return nn.predict_logits(self.params, images)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return argmax_lowest(self.logits(images))

    def features(self, images: np.ndarray) -> np.ndarray:
        return nn.predict_features(self.params, images)

    def descriptor(self) -> str:
        return f"{self.arch}:side={self.side}:classes={self.num_classes}"

    # --- serialization: magic, version, header length, JSON header, f32 LE tensors
    def to_bytes(self) -> bytes:
        tensors: list[tuple[str, np.ndarray]] = [(k, self.params[k]) for k in nn.PARAM_ORDER]
        if self.adam is not None:
            tensors += [(f"adam.m.{k}", self.adam.m[k]) for k in nn.PARAM_ORDER]
            tensors += [(f"adam.v.{k}", self.adam.v[k]) for k in nn.PARAM_ORDER]
        header = {
            "architecture": self.descriptor(),
            "arch": self.arch, "num_classes": self.num_classes, "side": self.side,
            "tensors": [[name, list(t.shape)] for name, t in tensors],
            "adam_t": None if self.adam is None else self.adam.t,
            "config": self.config, "fingerprint": self.fingerprint,
            "rng_state": self.rng_state, "epoch": self.epoch,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        out.write(hb)
        for _, t in tensors:
            out.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = len(MAGIC) + 8
        header = json.loads(blob[off:off + hlen])
        off += hlen
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape))
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off) \
                .astype(np.float32).reshape(shape)
            off += 4 * count
        if off != len(blob):
            raise ValueError("checkpoint has trailing or missing bytes")
        params = {k: tensors[k] for k in nn.PARAM_ORDER}
        adam = None
        if header["adam_t"] is not None:
            adam = nn.AdamState({k: tensors[f"adam.m.{k}"] for k in nn.PARAM_ORDER},
                                {k: tensors[f"adam.v.{k}"] for k in nn.PARAM_ORDER},
                                header["adam_t"])
        return cls(params, header["num_classes"], header["side"], header["arch"], adam,
                   header["config"], header["fingerprint"], header["rng_state"], header["epoch"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row argmax with ties resolved to the lowest class index."""
    return np.argmax(logits, axis=1)  # numpy returns the first maximum


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


def _batches(n: int, size: int, rng: np.random.Generator, count: int) -> list[np.ndarray]:
    """``count`` index batches cycling through fresh permutations of ``range(n)``."""
    out, pool = [], np.zeros(0, dtype=np.int64)
    for _ in range(count):
        while len(pool) < size:
            pool = np.concatenate([pool, rng.permutation(n)])
        out.append(pool[:size])
        pool = pool[size:]
    return out


def _batch(ds: Dataset, idx: np.ndarray):
    return nn.to_input(ds.images[idx]), ds.labels[idx]


def train(config: TrainConfig, primary: Dataset, watermark: Dataset | None,
          registry: AttackRegistry | None, test: Dataset | None = None,
          verification: Dataset | None = None, *, init: Checkpoint | None = None,
          trainable: Sequence[str] | None = None, progress: bool = False
          ) -> tuple[Checkpoint, list[dict]]:
    """Train from scratch (or from ``init``) and return the checkpoint and epoch log.

    Every step draws one primary, one watermark and one attacked minibatch.
    The attacked set is rebuilt each epoch from a fresh draw of a fraction
    ``p`` of both training sets. An epoch covers the primary set once.
    ``watermark=None`` (or empty) trains a clean control model; ``p=0`` or
    ``registry=None`` disables attack simulation.
    """
    if not len(primary):
        raise ValueError("primary training set is empty")
    side = primary.shape[0]
    num_classes = primary.num_classes
    watermark = watermark if watermark is not None and len(watermark) else None
    if init is None:
        params = nn.init_params(num_classes, make_rng(derive_seed(config.seed, 0xC0FFEE)), side)
        adam = nn.AdamState.zeros_like(params)
    else:
        params = {k: v.copy() for k, v in init.params.items()}
        adam = nn.AdamState.zeros_like(params)
    trainable = tuple(trainable) if trainable is not None else None
    weights = config.weights
    steps = int(np.ceil(len(primary) / config.batch_primary))
    history: list[dict] = []

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint({k: v.copy() for k, v in params.items()}, num_classes, side, nn.ARCH,
                          adam, asdict(config), config.fingerprint(),
                          {"seed": config.seed, "next_epoch": epoch}, epoch)

    for epoch in range(config.epochs):
        lr = nn.step_lr(config.lr, epoch, config.lr_decay_period, config.lr_decay_factor)
        epoch_seed = derive_seed(config.seed, epoch)
        rng = make_rng(derive_seed(epoch_seed, 1))
        attacked = None
        if registry is not None and config.p > 0:
            wm_src = watermark if watermark is not None else primary.take([])
            attacked = build_attacked_epoch_set(primary, wm_src, config.p, registry,
                                                derive_seed(epoch_seed, 2))
            if not len(attacked):
                attacked = None
        pri_idx = _batches(len(primary), config.batch_primary, rng, steps)
        pri_idx = [np.sort(b) for b in pri_idx]
        wm_idx = _batches(len(watermark), config.batch_watermark, rng, steps) if watermark else None
        at_idx = _batches(len(attacked), config.batch_attacked, rng, steps) if attacked else None
        sums = np.zeros(5)
        for s in range(steps):
            pb = _batch(primary, pri_idx[s])
            wb = _batch(watermark, wm_idx[s]) if wm_idx else None
            ab = _batch(attacked, at_idx[s]) if at_idx else None
            n_rows = len(pb[1]) + (len(wb[1]) if wb else 0) + (len(ab[1]) if ab else 0)
            pairs = nn.random_pairs(n_rows, rng)
            loss, terms, grads = nn.total_loss(params, pb, wb, ab, weights, pairs, config.sim_scope)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}, step {s}",
                                       snapshot(epoch))
            try:
                params, adam = nn.adam_step(params, grads, adam, lr, trainable)
            except nn.NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), snapshot(epoch)) from exc
            sums += [loss, terms["pri"], terms["wm"], terms["attk"], terms["sim"]]
        sums /= max(steps, 1)
        row = dict(zip(LOG_FIELDS, [epoch, *sums.tolist(), float("nan"), float("nan"), lr]))
        if test is not None and len(test):
            row["acc"] = float((argmax_lowest(nn.predict_logits(params, test.images)) == test.labels).mean())
        if verification is not None and len(verification):
            pred = argmax_lowest(nn.predict_logits(params, verification.images))
            row["wsr"] = float((pred == config.target).mean())
        history.append(row)
        if progress:
            log.info("epoch %d  L=%.4f  acc=%.4f  wsr=%.4f  lr=%.2g", epoch, row["L"], row["acc"],
                     row["wsr"], lr)
    return snapshot(config.epochs), history


def write_log(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{row[k]:.6g}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})
    return path


def export_features(checkpoint: Checkpoint, dataset: Dataset, path: str | Path | None = None) -> np.ndarray:
    """Penultimate (64-wide) features per sample; optionally written as CSV with labels."""
    feats = checkpoint.features(dataset.images)
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", *[f"f{i}" for i in range(feats.shape[1])]])
            for sid, lab, row in zip(dataset.ids, dataset.labels, feats):
                w.writerow([int(sid), int(lab), *[f"{v:.6g}" for v in row]])
    return feats


def watermark_centroid_distance(checkpoint: Checkpoint, watermark: Dataset, clean: Dataset,
                                target: int) -> float:
    """Mean feature distance from watermark samples to the clean target-class centroid."""
    clean_t = clean.images[clean.labels == target]
    if not len(clean_t) or not len(watermark):
        raise ValueError("need clean target-class samples and watermark samples")
    centroid = checkpoint.features(clean_t).astype(np.float64).mean(axis=0)
    fw = checkpoint.features(watermark.images).astype(np.float64)
    return float(np.linalg.norm(fw - centroid, axis=1).mean())
