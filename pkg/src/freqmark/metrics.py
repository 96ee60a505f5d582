"""Covertness (PSNR, SSIM) and utility (accuracy, WSR) metrics, plus table output."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .data import Dataset

# distinguished value for identical images
PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SETTINGS = f"luma BT.601, gaussian {SSIM_WINDOW}x{SSIM_WINDOW} sigma={SSIM_SIGMA}, K1={SSIM_K1}, K2={SSIM_K2}, L=255"


def _same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all channels (peak 255)."""
    a, b = _same_shape(a, b)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(255.0 ** 2 / mse))


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the luminance planes with an 11x11 Gaussian window.

    Local statistics use population (not sample) variances; a border of half
    a window is excluded, as in the usual reference implementation.
    """
    a, b = _same_shape(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    x, y = _luma(a), _luma(b)
    radius = SSIM_WINDOW // 2
    blur = lambda z: ndimage.gaussian_filter(z, SSIM_SIGMA, truncate=radius / SSIM_SIGMA)  # noqa: E731
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    c1, c2 = (SSIM_K1 * 255) ** 2, (SSIM_K2 * 255) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s[radius:-radius, radius:-radius].mean())


# ---------------------------------------------------------------------------
# prediction oracles


class Oracle(Protocol):
    def predict(self, images: np.ndarray) -> np.ndarray: ...


def predict_labels(oracle: Any, images: np.ndarray) -> np.ndarray:
    """Hard labels from any oracle.

    Accepts objects with ``logits`` (argmax, ties to the lowest index) or
    ``predict``, or a plain callable returning labels (1-D) or scores (2-D).
    """
    if hasattr(oracle, "logits"):
        return np.argmax(oracle.logits(images), axis=1)
    out = oracle.predict(images) if hasattr(oracle, "predict") else oracle(images)
    out = np.asarray(out)
    return np.argmax(out, axis=1) if out.ndim == 2 else out.astype(np.int64)


def accuracy(oracle: Any, dataset: Dataset) -> float:
    if not len(dataset):
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict_labels(oracle, dataset.images) == dataset.labels))


def wsr(oracle: Any, verification: Dataset, target: int) -> float:
    """Watermark success rate: fraction of queries answered with ``target``."""
    if not len(verification):
        raise ValueError("WSR of an empty verification set is undefined")
    return float(np.mean(predict_labels(oracle, verification.images) == target))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    acc: float | None = None
    wsr: float | None = None
    counts: dict = field(default_factory=dict)
    lpips: str = "unavailable"
    ssim_settings: str = SSIM_SETTINGS

    def __post_init__(self):
        for name in ("acc", "wsr"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.ssim is not None and not -1 <= self.ssim <= 1:
            raise ValueError("ssim must lie in [-1, 1]")


def covertness(originals: np.ndarray, forged: np.ndarray) -> MetricReport:
    """Mean PSNR and SSIM over paired image batches."""
    if len(originals) != len(forged) or not len(originals):
        raise ValueError("need equally many (>0) original and forged images")
    ps = [psnr(a, b) for a, b in zip(originals, forged)]
    finite = [p for p in ps if math.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if finite else PSNR_IDENTICAL
    mean_ssim = float(np.mean([ssim(a, b) for a, b in zip(originals, forged)]))
    return MetricReport(psnr=mean_psnr, ssim=mean_ssim,
                        counts={"images": len(ps), "identical": len(ps) - len(finite)})


def fmt(value: Any, digits: int = 4) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return "n/a"
        return f"{value:.{digits}f}"
    return str(value)


def write_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: fmt(row.get(k), 6) if isinstance(row.get(k), float) else row.get(k)
                        for k in columns})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def markdown_table(rows: Iterable[dict], columns: Sequence[str], headers: Sequence[str] | None = None,
                   percent: Sequence[str] = ()) -> str:
    """Render rows as a GitHub markdown table; ``percent`` columns are shown x100."""
    headers = list(headers or columns)
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c)
            if isinstance(v, str):
                try:
                    v = float(v)
                except ValueError:
                    pass
            if c in percent and isinstance(v, float) and math.isfinite(v):
                cells.append(f"{100 * v:.2f}")
            else:
                cells.append(fmt(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def report_dict(report: MetricReport) -> dict:
    return asdict(report)
