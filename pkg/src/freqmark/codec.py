"""JPEG-style compress-and-reconstruct used to forge watermark samples.

The pipeline is colour transform, 8x8 block DCT, quality-scaled
quantization followed immediately by dequantization, inverse DCT and
reassembly. Nothing is entropy coded; the output is an ordinary 8-bit
image whose only change is the loss of coarsely quantized frequencies.
"""
from __future__ import annotations

import numpy as np

from .data import Dataset, make_rng, relabel, sample_rand

BLOCK = 8

# ITU-T T.81 Annex K, tables K.1 (luminance) and K.2 (chrominance).
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

CHROMINANCE_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)

LUMINANCE_TABLE.setflags(write=False)
CHROMINANCE_TABLE.setflags(write=False)


def round_half_away(x):
    """Round to nearest integer, ties away from zero (np.round is half-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _pixels(x) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# colour transform (full-range BT.601, as in JFIF)

_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC2RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])


def rgb_to_ycbcr(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split an RGB uint8 image (or batch) into float Y, Cb, Cr planes."""
    image = np.asarray(image)
    if image.shape[-1] != 3:
        raise ValueError(f"expected 3 channels, got shape {image.shape}")
    ycc = image.astype(np.float64) @ _RGB2YCC.T
    ycc[..., 1:] += 128.0
    return ycc[..., 0], ycc[..., 1], ycc[..., 2]


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr`, clamped and rounded to uint8."""
    y, cb, cr = (np.asarray(p, dtype=np.float64) for p in (y, cb, cr))
    if not (y.shape == cb.shape == cr.shape):
        raise ValueError(f"plane shapes differ: {y.shape}, {cb.shape}, {cr.shape}")
    ycc = np.stack([y, cb - 128.0, cr - 128.0], axis=-1)
    return _pixels(ycc @ _YCC2RGB.T)


# ---------------------------------------------------------------------------
# 8x8 DCT


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis: row u holds alpha(u) cos((2i+1) u pi / 2n)."""
    i = np.arange(n)
    basis = np.cos((2 * i[None, :] + 1) * i[:, None] * np.pi / (2 * n))
    alpha = np.full(n, np.sqrt(2.0 / n))
    alpha[0] = np.sqrt(1.0 / n)
    return alpha[:, None] * basis


_C = dct_matrix()


def _check_block(block) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.shape[-2:] != (BLOCK, BLOCK):
        raise ValueError(f"expected trailing 8x8 block(s), got shape {block.shape}")
    return block


def dct8x8(block) -> np.ndarray:
    """2-D orthonormal DCT-II of one 8x8 block (or any stack of them)."""
    return _C @ _check_block(block) @ _C.T


def idct8x8(coeffs) -> np.ndarray:
    return _C.T @ _check_block(coeffs) @ _C


def to_blocks(plane: np.ndarray) -> np.ndarray:
    """``(..., H, W)`` -> ``(..., H/8, W/8, 8, 8)``."""
    *lead, h, w = plane.shape
    if h % BLOCK or w % BLOCK:
        raise ValueError(f"plane {h}x{w} is not divisible into 8x8 blocks; resize first")
    b = plane.reshape(*lead, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    return np.swapaxes(b, -3, -2)


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    *lead, bh, bw, _, _ = blocks.shape
    return np.swapaxes(blocks, -3, -2).reshape(*lead, bh * BLOCK, bw * BLOCK)


# ---------------------------------------------------------------------------
# quantization


def check_quality(factor: int) -> int:
    if isinstance(factor, bool) or int(factor) != factor or not 1 <= factor <= 100:
        raise ValueError(f"quality factor must be an integer in [1, 100], got {factor!r}")
    return int(factor)


def scale_quant_table(base: np.ndarray, factor: int) -> np.ndarray:
    """Scale a base table to a quality factor, clamped to [1, 255]."""
    factor = check_quality(factor)
    base = np.asarray(base)
    if base.shape != (BLOCK, BLOCK) or base.min() < 1 or base.max() > 255:
        raise ValueError("base table must be 8x8 with entries in [1, 255]")
    if factor <= 50:
        scaled = 50.0 * base / factor
    else:
        scaled = (200 - 2 * factor) * base / 100.0
    return np.clip(round_half_away(scaled), 1, 255).astype(np.int64)


def quantize_dequantize(coeffs, table) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if table.min() < 1:
        raise ValueError("quantization divisors must be >= 1")
    return round_half_away(np.asarray(coeffs, dtype=np.float64) / table) * table


def compress_plane(plane: np.ndarray, table: np.ndarray, level_shift: float = 128.0) -> np.ndarray:
    """Blockwise DCT -> quantize/dequantize -> IDCT; returns rounded, clamped floats."""
    blocks = to_blocks(np.asarray(plane, dtype=np.float64) - level_shift)
    rec = idct8x8(quantize_dequantize(dct8x8(blocks), table))
    return np.clip(round_half_away(from_blocks(rec) + level_shift), 0, 255)


def compress_image(image: np.ndarray, factor: int = 90, *, level_shift: float = 128.0) -> np.ndarray:
    """Compress-and-reconstruct an RGB uint8 image or a ``(N, H, W, 3)`` batch.

    Y uses the scaled luminance table, Cb and Cr the chrominance table; no
    chroma subsampling. Output has the input's shape and dtype.
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("compress_image expects uint8 pixels")
    h, w = image.shape[-3:-1]
    if h % BLOCK or w % BLOCK:
        raise ValueError(f"image {h}x{w} must have sides divisible by 8; resize first")
    qy = scale_quant_table(LUMINANCE_TABLE, factor)
    qc = scale_quant_table(CHROMINANCE_TABLE, factor)
    y, cb, cr = rgb_to_ycbcr(image)
    return ycbcr_to_rgb(compress_plane(y, qy, level_shift),
                        compress_plane(cb, qc, level_shift),
                        compress_plane(cr, qc, level_shift))


# ---------------------------------------------------------------------------
# watermark forging


def forge(dataset: Dataset, factor: int, target: int) -> Dataset:
    """Compress every image and relabel to ``target``; ids are kept."""
    forged = dataset.replace(images=compress_image(dataset.images, factor), provenance="forged")
    return relabel(forged, target)


def forge_watermark_split(dataset: Dataset, rate: float, factor: int, target: int,
                          rng: np.random.Generator | int, holdout: Dataset | None = None,
                          verify_size: int | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Split training data into primary and watermark parts and forge a verification set.

    ``rate * len(dataset)`` samples are drawn, compressed and relabelled to
    ``target`` (the watermark set); the rest is the primary set, untouched.
    The verification set is forged the same way from ``holdout``, a pool
    disjoint from ``dataset``. Without ``holdout`` there is no D_v and an
    empty dataset is returned in its place.

    Returns ``(D_p, D_w, D_v)``.
    """
    if not 0 < rate < 1:
        raise ValueError(f"watermark rate must lie strictly between 0 and 1, got {rate}")
    check_quality(factor)
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(int(rng))
    n_wm = int(round_half_away(rate * len(dataset)))
    if n_wm == 0:
        raise ValueError(f"rate {rate} on {len(dataset)} samples yields no watermark samples")
    source, primary = sample_rand(dataset, n_wm, rng)
    watermark = forge(source, factor, target)
    if holdout is None:
        verification = forge(source.take([]), factor, target)
    else:
        overlap = np.intersect1d(holdout.ids, dataset.ids)
        if len(overlap):
            raise ValueError(f"holdout pool shares {len(overlap)} sample ids with the training data")
        if verify_size is not None and verify_size < len(holdout):
            holdout, _ = sample_rand(holdout, verify_size, rng)
        verification = forge(holdout, factor, target)
    return primary, watermark, verification


__all__ = [
    "LUMINANCE_TABLE", "CHROMINANCE_TABLE", "round_half_away", "rgb_to_ycbcr", "ycbcr_to_rgb",
    "dct_matrix", "dct8x8", "idct8x8", "to_blocks", "from_blocks", "scale_quant_table",
    "quantize_dequantize", "compress_plane", "compress_image", "forge", "forge_watermark_split",
    "check_quality",
]
