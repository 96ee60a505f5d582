"""Labeled image containers, seeded randomness and dataset plumbing.

Images are stored as one ``(N, H, W, 3)`` uint8 array per dataset; every
sample also carries an integer identity so that held-out contracts
(verification samples never seen in training) can be checked by identity
rather than by pixel equality.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

PROVENANCES = ("synthetic", "imported", "forged", "attacked")


class LabeledSample(NamedTuple):
    image: np.ndarray
    label: int
    sample_id: int


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based (Philox) generator; ``split_rng`` derives child streams."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of integers (e.g. base seed, epoch)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = "synthetic"
    ids: np.ndarray | None = None
    class_names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4 or images.shape[-1] != 3:
            if images.size == 0 and images.ndim != 4:
                images = images.reshape(0, 0, 0, 3)
            else:
                raise ValueError(f"images must be (N, H, W, 3), got {images.shape}")
        if images.dtype != np.uint8:
            raise ValueError(f"images must be uint8, got {images.dtype}")
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        ids = np.arange(len(labels), dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != labels.shape:
            raise ValueError("ids and labels differ in length")
        object.__setattr__(self, "images", _frozen(images))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "ids", _frozen(ids))

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledSample]:
        for img, lab, sid in zip(self.images, self.labels, self.ids):
            yield LabeledSample(img, int(lab), int(sid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def take(self, index: Sequence[int] | np.ndarray) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.num_classes,
                       self.provenance, self.ids[index], self.class_names)

    def replace(self, **changes) -> "Dataset":
        fields = dict(images=self.images, labels=self.labels, num_classes=self.num_classes,
                      provenance=self.provenance, ids=self.ids, class_names=self.class_names)
        fields.update(changes)
        return Dataset(**fields)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def empty_like(dataset: Dataset) -> Dataset:
    return dataset.take(np.zeros(0, dtype=np.int64))


def concat(parts: Sequence[Dataset], provenance: str | None = None) -> Dataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    nonempty = [p for p in parts if len(p)] or [parts[0]]
    shapes = {p.shape for p in nonempty}
    if len(shapes) > 1:
        raise ValueError(f"image shapes differ: {sorted(shapes)}")
    return Dataset(
        np.concatenate([p.images for p in nonempty]),
        np.concatenate([p.labels for p in nonempty]),
        max(p.num_classes for p in parts),
        provenance or parts[0].provenance,
        np.concatenate([p.ids for p in nonempty]),
        parts[0].class_names,
    )


# ---------------------------------------------------------------------------
# sampling primitives


def sample_rand(dataset: Dataset, n: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Draw ``n`` samples uniformly without replacement.

    Returns ``(selected, remainder)``; ``selected`` is in draw order, the
    remainder keeps the original order.
    """
    if not 0 <= n <= len(dataset):
        raise ValueError(f"cannot sample {n} from a dataset of {len(dataset)}")
    perm = rng.permutation(len(dataset))
    chosen = perm[:n]
    rest = np.sort(perm[n:])
    return dataset.take(chosen), dataset.take(rest)


def partition_subset(dataset: Dataset, i: int, k: int, seed: int | None = None) -> Dataset:
    """Return the samples at positions ``j`` with ``j % k == i``.

    When ``seed`` is given the positions are taken after a seeded shuffle, so
    the sample-to-subset assignment changes with the seed (one per epoch).
    """
    if not 0 <= i < k:
        raise ValueError(f"subset index {i} outside [0, {k})")
    order = np.arange(len(dataset))
    if seed is not None:
        order = make_rng(seed).permutation(len(dataset))
    return dataset.take(order[i::k])


def relabel(dataset: Dataset, target: int) -> Dataset:
    if not 0 <= target < dataset.num_classes:
        raise ValueError(f"target {target} outside [0, {dataset.num_classes})")
    return dataset.replace(labels=np.full(len(dataset), target, dtype=np.int64))


# ---------------------------------------------------------------------------
# resizing


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment, edges replicated."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    return sample_bilinear(image, *np.meshgrid(ys, xs, indexing="ij"))


def sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional coordinates; out-of-range clamps to edge."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    out = np.empty(ys.shape + image.shape[2:], dtype=np.float64)
    src = image.astype(np.float64)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.map_coordinates(src[..., c], [ys, xs], order=1, mode="nearest")
    if image.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

_SHAPES = ("disc", "square", "triangle", "cross", "ring", "hbars", "vbars",
           "diamond", "checker", "xshape", "star", "crescent")


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, radius: float, phase: float,
                edge: float = 1.0) -> np.ndarray:
    """Soft (anti-aliased) coverage in [0, 1] of one glyph centred at the origin."""
    r = np.hypot(yy, xx)
    soft = lambda d: np.clip(0.5 - d / edge, 0.0, 1.0)  # noqa: E731  signed distance -> coverage
    if kind == "disc":
        return soft(r - radius)
    if kind == "square":
        return soft(np.maximum(abs(yy), abs(xx)) - radius * 0.85)
    if kind == "diamond":
        return soft((abs(yy) + abs(xx)) / np.sqrt(2) - radius * 0.75)
    if kind == "ring":
        return soft(abs(r - radius * 0.75) - radius * 0.22)
    if kind == "cross":
        arm = radius * 0.3
        a = soft(np.maximum(abs(yy) - arm, abs(xx) - radius))
        b = soft(np.maximum(abs(xx) - arm, abs(yy) - radius))
        return np.maximum(a, b)
    if kind == "xshape":
        u, v = (yy + xx) / np.sqrt(2), (yy - xx) / np.sqrt(2)
        arm = radius * 0.28
        a = soft(np.maximum(abs(u) - arm, abs(v) - radius))
        b = soft(np.maximum(abs(v) - arm, abs(u) - radius))
        return np.maximum(a, b)
    if kind == "triangle":
        d = np.maximum.reduce([
            -yy - radius * 0.5,
            (yy * 0.5 + xx * np.sqrt(3) / 2) - radius * 0.5,
            (yy * 0.5 - xx * np.sqrt(3) / 2) - radius * 0.5,
        ])
        return soft(d)
    if kind == "hbars":
        stripes = np.abs(((yy / (radius * 0.5) + phase) % 2.0) - 1.0) * radius * 0.5 - radius * 0.22
        return soft(np.maximum(stripes, np.maximum(abs(yy), abs(xx)) - radius))
    if kind == "vbars":
        stripes = np.abs(((xx / (radius * 0.5) + phase) % 2.0) - 1.0) * radius * 0.5 - radius * 0.22
        return soft(np.maximum(stripes, np.maximum(abs(yy), abs(xx)) - radius))
    if kind == "checker":
        cell = radius * 0.5
        sign = np.sign(np.sin(np.pi * yy / cell + phase) * np.sin(np.pi * xx / cell + phase))
        return soft(np.maximum(-sign * 0.6, np.maximum(abs(yy), abs(xx)) - radius))
    if kind == "star":
        theta = np.arctan2(yy, xx) + phase
        edge = radius * (0.62 + 0.38 * np.cos(5 * theta))
        return soft(r - edge)
    if kind == "crescent":
        inner = np.hypot(yy, xx - radius * 0.45)
        return np.clip(soft(r - radius) - soft(inner - radius * 0.8), 0.0, 1.0)
    raise ValueError(kind)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _value_noise(rng: np.random.Generator, side: int, cells: int) -> np.ndarray:
    """Smooth random field in roughly [-1, 1] (bilinear upsampled lattice)."""
    lattice = rng.uniform(-1, 1, size=(cells + 1, cells + 1, 1))
    return resize_bilinear(lattice, side, side)[..., 0]


def render_glyph(kind: str, side: int, rng: np.random.Generator, noise_sigma: float = 1.0,
                 edge: float = 2.0, saturation: tuple[float, float] = (0.3, 0.7),
                 grain: float = 0.0) -> np.ndarray:
    """One natural-style sample: textured background plus a jittered glyph."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    cy, cx = side / 2 + rng.uniform(-0.12, 0.12, 2) * side
    radius = side * rng.uniform(0.26, 0.36)
    phase = rng.uniform(0, 2 * np.pi)
    ang = rng.uniform(-0.3, 0.3)
    ry = (yy - cy) * np.cos(ang) - (xx - cx) * np.sin(ang)
    rx = (yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
    mask = _shape_mask(kind, ry, rx, radius, phase, edge)[..., None]

    bg_a = _hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.3, 0.9)) * 255
    bg_b = _hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.3, 0.9)) * 255
    grad_dir = rng.uniform(0, 2 * np.pi)
    t = ((yy * np.cos(grad_dir) + xx * np.sin(grad_dir)) / side + 1) / 2
    background = bg_a * (1 - t[..., None]) + bg_b * t[..., None]
    background += 18 * _value_noise(rng, side, 4)[..., None]
    background += 8 * _value_noise(rng, side, side // 4)[..., None]

    fg = _hsv_to_rgb(rng.uniform(), rng.uniform(*saturation), rng.uniform(0.5, 1.0)) * 255
    shading = 1 + 0.15 * _value_noise(rng, side, 3)[..., None]
    image = background * (1 - mask) + fg * shading * mask
    image += rng.normal(0, noise_sigma, size=(side, side, 1))
    if grain > 0:
        g = rng.normal(size=(side, side))
        g -= ndimage.gaussian_filter(g, 1.0, mode="wrap")
        image += (grain / g.std()) * g[..., None]
    return np.clip(np.floor(image + 0.5), 0, 255).astype(np.uint8)


def synth_dataset(classes: int, per_class: int, side: int = 32, seed: int = 0,
                  noise_sigma: float = 1.0) -> Dataset:
    """Balanced procedural glyph dataset, one shape family per class.

    Deterministic in all arguments. Sample ``j`` of class ``c`` sits at index
    ``j * classes + c`` so any prefix is close to balanced.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if classes > len(_SHAPES):
        raise ValueError(f"at most {len(_SHAPES)} shape families are available")
    if side <= 0 or side % 8:
        raise ValueError(f"side={side} must be a positive multiple of 8 for 8x8 block coding")
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    n = classes * per_class
    images = np.empty((n, side, side, 3), dtype=np.uint8)
    labels = np.tile(np.arange(classes), per_class)
    streams = np.random.SeedSequence(int(seed)).spawn(n)
    for idx in range(n):
        rng = make_rng(streams[idx])
        images[idx] = render_glyph(_SHAPES[labels[idx]], side, rng, noise_sigma)
    return Dataset(images, labels, classes, "synthetic",
                   class_names=tuple(_SHAPES[:classes]))


# ---------------------------------------------------------------------------
# on-disk layout: PNG files plus a `relative_path<TAB>class_index` manifest

MANIFEST_NAME = "manifest.tsv"


class ImportError_(ValueError):
    """Raised when an image folder cannot be imported; lists every bad file."""

    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        lines = "\n".join(f"  {p}: {why}" for p, why in failures.items())
        super().__init__(f"{len(failures)} file(s) could not be imported:\n{lines}")


def _load_png(path: Path, side: int | None) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if side is not None and arr.shape[:2] != (side, side):
        arr = resize_bilinear(arr, side, side)
    return arr


def import_image_folder(root: str | Path, manifest: str | Path | None = None, side: int = 32,
                        skip_bad: bool = False) -> Dataset:
    """Read ``root/<class_name>/<image>.png`` (or an explicit manifest).

    Class indices follow lexicographic class-directory order. Undecodable
    files are collected and reported together; pass ``skip_bad=True`` to
    import the valid remainder instead of failing.
    """
    root = Path(root)
    if side % 8:
        raise ValueError(f"side={side} must be a multiple of 8")
    entries: list[tuple[str, int]] = []
    class_names = None
    if manifest is None and (root / MANIFEST_NAME).exists():
        manifest = root / MANIFEST_NAME
    if manifest is not None:
        for line in Path(manifest).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            rel, cls = line.rsplit("\t", 1)
            entries.append((rel, int(cls)))
        num_classes = max(c for _, c in entries) + 1 if entries else 0
    else:
        class_names = tuple(sorted(p.name for p in root.iterdir() if p.is_dir()))
        if not class_names:
            raise ValueError(f"no class directories under {root}")
        for idx, name in enumerate(class_names):
            files = sorted(p for p in (root / name).iterdir() if p.is_file())
            if not files:
                raise ValueError(f"class directory {name!r} is empty")
            entries.extend((f"{name}/{p.name}", idx) for p in files)
        num_classes = len(class_names)

    images, labels, failures = [], [], {}
    for rel, cls in entries:
        try:
            images.append(_load_png(root / rel, side))
            labels.append(cls)
        except Exception as exc:  # PIL raises a variety of types
            failures[rel] = f"{type(exc).__name__}: {exc}"
    if failures:
        if not skip_bad:
            raise ImportError_(failures)
        log.warning("skipped %d undecodable file(s)", len(failures))
    if class_names is not None:
        present = set(labels)
        missing = [n for i, n in enumerate(class_names) if i not in present]
        if missing:
            raise ValueError(f"class(es) without any valid image: {missing}")
    if not images:
        raise ValueError(f"no images imported from {root}")
    # files written by save_image_folder are named by sample id; keep those ids
    stems = [Path(rel).stem for rel, _ in entries if rel not in failures]
    ids = None
    if all(s.isdigit() for s in stems) and len(set(stems)) == len(stems):
        ids = np.array([int(s) for s in stems], dtype=np.int64)
    return Dataset(np.stack(images), np.array(labels), num_classes, "imported", ids,
                   class_names=class_names)


def save_image_folder(dataset: Dataset, root: str | Path) -> Path:
    """Write PNGs plus manifest; :func:`import_image_folder` reads it back."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in dataset:
        rel = f"{sample.label:03d}/{sample.sample_id:07d}.png"
        (root / rel).parent.mkdir(exist_ok=True)
        Image.fromarray(sample.image).save(root / rel, optimize=False)
        lines.append(f"{rel}\t{sample.label}")
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return root / MANIFEST_NAME
