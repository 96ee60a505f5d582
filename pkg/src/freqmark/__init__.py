"""Black-box model watermarking with frequency-domain compression triggers.

Watermark samples are clean images pushed through 8x8 block DCT
quantization and relabelled to a target class. A model trained on them
answers the target class for compressed queries, which an owner can test
through a plain prediction API.
"""
__version__ = "0.1.0"

from .attacks import AttackRegistry, AttackSpec, default_registry
from .codec import compress_image, forge, forge_watermark_split
from .data import Dataset, synth_dataset
from .metrics import accuracy, psnr, ssim, wsr
from .train import Checkpoint, TrainConfig, train
from .verify import compute_threshold, verify_ownership

__all__ = [
    "AttackRegistry", "AttackSpec", "Checkpoint", "Dataset", "TrainConfig", "accuracy",
    "compress_image", "compute_threshold", "default_registry", "forge", "forge_watermark_split",
    "psnr", "ssim", "synth_dataset", "train", "verify_ownership", "wsr",
]
