"""Forge watermark samples from a synthetic set and measure how visible they are.

Run: python demos/forge_and_measure.py
"""
import numpy as np

from freqmark.codec import compress_image, forge_watermark_split, scale_quant_table, LUMINANCE_TABLE
from freqmark.data import synth_dataset
from freqmark.metrics import covertness

ds = synth_dataset(10, 20, 32, seed=1)
holdout = synth_dataset(10, 5, 32, seed=2)
holdout = holdout.replace(ids=holdout.ids + 100_000)

# the luminance divisors shrink as the quality factor grows
for factor in (10, 50, 90, 100):
    print(f"factor {factor:3d}  first luminance row {scale_quant_table(LUMINANCE_TABLE, factor)[0].tolist()}")

primary, watermark, verification = forge_watermark_split(ds, 0.1, 90, 0, 0, holdout)
print(f"\nprimary {len(primary)}  watermark {len(watermark)}  verification {len(verification)}")
print("watermark labels:", np.unique(watermark.labels).tolist())

for factor in (50, 70, 90, 95):
    rep = covertness(ds.images, compress_image(ds.images, factor))
    print(f"factor {factor}: PSNR {rep.psnr:.2f} dB  SSIM {rep.ssim:.4f}")
