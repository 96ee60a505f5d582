"""Input preprocessing attacks and the per-epoch attacked training set.

Each attack kind maps to a function ``(image, rng, **magnitudes) -> image``;
an :class:`AttackSpec` holds the ranges magnitudes are drawn from, one draw
per sample. Two kinds (``jpeg2000``, ``webp``) are delegated to an external
codec process and fail with :class:`CodecUnavailable` when none is set up.
"""
from __future__ import annotations

import io
import logging
import os
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .codec import compress_image
from .data import Dataset, concat, derive_seed, make_rng, partition_subset, resize_bilinear, \
    sample_bilinear, sample_rand

log = logging.getLogger(__name__)

TRAINING_KINDS = ("crop", "rotate", "scale", "gaussian_noise", "gaussian_blur", "brightness",
                  "image_quantize", "color_quantize", "jpeg2000", "webp")
EXTERNAL_KINDS = ("jpeg2000", "webp")
# evaluation-only kinds: never part of a training registry
EVAL_KINDS = ("identity", "jpeg")

DEFAULT_PARAMS: dict[str, dict[str, tuple]] = {
    "crop": {"keep": (0.8, 1.0)},
    "rotate": {"angle": (-15.0, 15.0)},
    "scale": {"factor": (0.7, 1.3)},
    "gaussian_noise": {"sigma": (2.0, 10.0)},
    "gaussian_blur": {"sigma": (0.5, 1.0)},
    "brightness": {"factor": (0.7, 1.3)},
    "image_quantize": {"bits": (4, 5, 6)},
    "color_quantize": {"colors": (16, 32, 64)},
    "jpeg2000": {"quality": (20.0, 40.0)},
    "webp": {"quality": (50, 90)},
    "jpeg": {"quality": (50, 90)},
    "identity": {},
}
# parameters listed here are a set of choices; the rest are closed [lo, hi] ranges
_DISCRETE = {"bits", "colors"}
_INTEGER = {"quality"}


class CodecUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULT_PARAMS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        for name, value in dict(self.params).items():
            if name not in merged:
                raise ValueError(f"attack {self.kind!r} has no parameter {name!r}")
            merged[name] = tuple(np.atleast_1d(value).tolist())
        for name, value in merged.items():
            _validate(self.kind, name, value)
        object.__setattr__(self, "params", merged)

    @classmethod
    def fixed(cls, kind: str, **values) -> "AttackSpec":
        """Spec whose magnitudes are pinned, e.g. ``fixed("rotate", angle=10)``."""
        params = {k: ((v,) if k in _DISCRETE else (v, v)) for k, v in values.items()}
        return cls(kind, params)

    def draw(self, rng: np.random.Generator) -> dict:
        out = {}
        for name, rng_range in self.params.items():
            if name in _DISCRETE:
                out[name] = rng_range[int(rng.integers(len(rng_range)))]
            else:
                lo, hi = rng_range
                value = rng.uniform(lo, hi) if hi > lo else lo
                out[name] = int(round(value)) if name in _INTEGER else float(value)
        return out

    def describe(self) -> str:
        parts = [f"{k}={'|'.join(str(x) for x in v)}" for k, v in self.params.items()]
        return f"{self.kind}({', '.join(parts)})"


def _validate(kind: str, name: str, value: tuple) -> None:
    if name in _DISCRETE:
        if not value:
            raise ValueError(f"{kind}.{name} needs at least one choice")
        lo_ok = {"bits": 1, "colors": 2}[name]
        hi_ok = {"bits": 8, "colors": 256}[name]
        if any(not lo_ok <= v <= hi_ok for v in value):
            raise ValueError(f"{kind}.{name} choices must lie in [{lo_ok}, {hi_ok}]")
        return
    if len(value) != 2 or value[0] > value[1]:
        raise ValueError(f"{kind}.{name} must be a (lo, hi) range, got {value}")
    bounds = {
        ("crop", "keep"): (0.1, 1.0), ("rotate", "angle"): (-180, 180),
        ("scale", "factor"): (0.1, 4.0), ("gaussian_noise", "sigma"): (0, 128),
        ("gaussian_blur", "sigma"): (0.0, 5.0), ("brightness", "factor"): (0.0, 4.0),
        ("jpeg", "quality"): (1, 100), ("webp", "quality"): (1, 100),
        ("jpeg2000", "quality"): (1, 100),
    }[(kind, name)]
    if value[0] < bounds[0] or value[1] > bounds[1]:
        raise ValueError(f"{kind}.{name} range {value} outside [{bounds[0]}, {bounds[1]}]")


# ---------------------------------------------------------------------------
# the transforms


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def crop(image, rng, keep: float):
    h, w = image.shape[:2]
    ch, cw = max(1, int(round(h * keep))), max(1, int(round(w * keep)))
    if (ch, cw) == (h, w):
        return image.copy()
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return resize_bilinear(image[y0:y0 + ch, x0:x0 + cw], h, w)


def rotate(image, rng, angle: float):
    if angle == 0:
        return image.copy()
    h, w = image.shape[:2]
    t = np.deg2rad(angle)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys = cy + (yy - cy) * np.cos(t) - (xx - cx) * np.sin(t)
    xs = cx + (yy - cy) * np.sin(t) + (xx - cx) * np.cos(t)
    return sample_bilinear(image, ys, xs)


def scale(image, rng, factor: float):
    h, w = image.shape[:2]
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (sh, sw) == (h, w):
        return image.copy()
    return resize_bilinear(resize_bilinear(image, sh, sw), h, w)


def gaussian_noise(image, rng, sigma: float):
    return _to_u8(image + rng.normal(0.0, sigma, size=image.shape))


def gaussian_kernel3(sigma: float) -> np.ndarray:
    g = np.exp(-np.arange(-1, 2) ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_blur(image, rng, sigma: float):
    if sigma <= 0:
        return image.copy()
    g = gaussian_kernel3(sigma)
    out = ndimage.correlate1d(image.astype(np.float64), g, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, g, axis=1, mode="nearest")
    return _to_u8(out)


def brightness(image, rng, factor: float):
    return _to_u8(image * factor)


def image_quantize(image, rng, bits: int):
    """Uniform requantization of every channel to ``2**bits`` evenly spaced levels."""
    top = 2 ** bits - 1
    return _to_u8(np.floor(image / 255.0 * top + 0.5) * (255.0 / top))


def color_quantize(image, rng, colors: int):
    """Adaptive palette of ``colors`` entries (median cut), no dithering."""
    pal = Image.fromarray(image).quantize(colors=colors, method=Image.Quantize.MEDIANCUT,
                                          dither=Image.Dither.NONE)
    return np.asarray(pal.convert("RGB"), dtype=np.uint8)


def jpeg(image, rng, quality: int):
    return compress_image(image, int(quality))


def identity(image, rng):
    return image.copy()


# ---------------------------------------------------------------------------
# external codecs: PNG on stdin, re-encoded-then-decoded PNG on stdout


ENV_CODEC = {"jpeg2000": "FREQMARK_JPEG2000_CMD", "webp": "FREQMARK_WEBP_CMD"}
_codec_commands: dict[str, list[str]] = {}


def set_codec_command(kind: str, command: Sequence[str] | str | None) -> None:
    """Register (or clear, with None) the process used for an external kind.

    The quality is appended as the final argument. ``python -m
    freqmark.codec_hook <kind>`` is a ready-made Pillow-backed command.
    """
    if kind not in EXTERNAL_KINDS:
        raise ValueError(f"{kind!r} is not an external codec kind")
    if command is None:
        _codec_commands.pop(kind, None)
    else:
        _codec_commands[kind] = shlex.split(command) if isinstance(command, str) else list(command)


def codec_command(kind: str) -> list[str] | None:
    if kind in _codec_commands:
        return _codec_commands[kind]
    env = os.environ.get(ENV_CODEC[kind])
    return shlex.split(env) if env else None


def codec_available(kind: str) -> bool:
    return kind not in EXTERNAL_KINDS or codec_command(kind) is not None


def _external(kind: str):
    def run(image, rng, quality):
        cmd = codec_command(kind)
        if cmd is None:
            raise CodecUnavailable(
                f"codec unavailable: no external {kind} encoder configured "
                f"(set {ENV_CODEC[kind]} or call set_codec_command)")
        buf = io.BytesIO()
        Image.fromarray(image).save(buf, format="PNG")
        proc = subprocess.run([*cmd, str(quality)], input=buf.getvalue(), capture_output=True,
                              check=False)
        if proc.returncode:
            raise CodecUnavailable(f"{kind} codec failed: {proc.stderr.decode(errors='replace')}")
        with Image.open(io.BytesIO(proc.stdout)) as im:
            out = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if out.shape != image.shape:
            out = resize_bilinear(out, *image.shape[:2])
        return out
    run.__name__ = kind
    return run


ATTACKS: dict[str, Callable] = {
    "crop": crop, "rotate": rotate, "scale": scale, "gaussian_noise": gaussian_noise,
    "gaussian_blur": gaussian_blur, "brightness": brightness,
    "image_quantize": image_quantize, "color_quantize": color_quantize,
    "jpeg2000": _external("jpeg2000"), "webp": _external("webp"),
    "jpeg": jpeg, "identity": identity,
}


def apply_attack(spec: AttackSpec, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply one attack with magnitudes drawn from ``spec``; shape and dtype preserved."""
    if spec.kind not in ATTACKS:
        raise ValueError(f"unknown attack kind {spec.kind!r}")
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3:
        raise ValueError("apply_attack expects one (H, W, 3) uint8 image")
    out = ATTACKS[spec.kind](image, rng, **spec.draw(rng))
    assert out.shape == image.shape and out.dtype == np.uint8
    return out


def attack_dataset(spec: AttackSpec, dataset: Dataset, seed: int) -> Dataset:
    """Attack every image; labels and ids are kept."""
    if not len(dataset):
        return dataset.replace(provenance="attacked")
    rng = make_rng(seed)
    images = np.stack([apply_attack(spec, img, rng) for img in dataset.images])
    return dataset.replace(images=images, provenance="attacked")


# ---------------------------------------------------------------------------
# registry and per-epoch set


@dataclass(frozen=True)
class AttackRegistry:
    specs: tuple[AttackSpec, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        if not specs:
            raise ValueError("attack registry must hold at least one attack")
        kinds = [s.kind for s in specs]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"attack kinds must be unique: {kinds}")
        object.__setattr__(self, "specs", specs)

    @property
    def k(self) -> int:
        return len(self.specs)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.specs)

    def __iter__(self):
        return iter(self.specs)

    def __len__(self):
        return len(self.specs)


def default_registry(include_external: bool | None = None) -> AttackRegistry:
    """The training registry: all ten kinds when external codecs are set up, else eight.

    ``include_external=None`` decides by codec availability and logs a
    warning when the external kinds are dropped.
    """
    kinds = list(TRAINING_KINDS)
    if include_external is None:
        include_external = all(codec_available(k) for k in EXTERNAL_KINDS)
        if not include_external:
            log.warning("external jpeg2000/webp codecs not configured; training registry uses k=8")
    if not include_external:
        kinds = [k for k in kinds if k not in EXTERNAL_KINDS]
    return AttackRegistry(tuple(AttackSpec(k) for k in kinds))


def registry_from_config(section: Mapping[str, str]) -> AttackRegistry:
    """Build a registry from ``attacks.<kind>.<param> = lo, hi`` style entries.

    ``attacks.kinds`` lists the kinds in order; parameters not mentioned keep
    their defaults.
    """
    kinds = [k.strip() for k in section.get("kinds", ",".join(TRAINING_KINDS[:8])).split(",") if k.strip()]
    specs = []
    for kind in kinds:
        params = {}
        for key, value in section.items():
            if key.startswith(kind + "."):
                params[key[len(kind) + 1:]] = tuple(float(v) if "." in v else int(v)
                                                    for v in value.replace(" ", "").split(","))
        specs.append(AttackSpec(kind, params))
    return AttackRegistry(tuple(specs))


def build_attacked_epoch_set(primary: Dataset, watermark: Dataset, p: float,
                             registry: AttackRegistry, epoch_seed: int) -> Dataset:
    """Attacked copies of a fraction ``p`` of both training sets, labels kept.

    Draws ``round(p*|D_p|)`` and ``round(p*|D_w|)`` samples, splits each draw
    into ``k`` interleaved subsets and applies the i-th registry attack to the
    i-th subset.
    """
    if not 0 <= p <= 1:
        raise ValueError(f"attack fraction p must lie in [0, 1], got {p}")
    if not len(registry):
        raise ValueError("empty attack registry")
    rng = make_rng(epoch_seed)
    parts = []
    for which, source in enumerate((primary, watermark)):
        n = int(np.floor(p * len(source) + 0.5))
        drawn, _ = sample_rand(source, n, rng)
        split_seed = derive_seed(epoch_seed, which)
        for i, spec in enumerate(registry):
            subset = partition_subset(drawn, i, registry.k, seed=split_seed)
            parts.append(attack_dataset(spec, subset, derive_seed(epoch_seed, which, i)))
    return concat(parts, provenance="attacked")
