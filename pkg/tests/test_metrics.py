import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freqmark.data import Dataset, make_rng, synth_dataset
from freqmark.metrics import (PSNR_IDENTICAL, MetricReport, accuracy, covertness, markdown_table,
                              psnr, read_csv, ssim, write_csv, wsr)


def test_psnr_examples():
    a = np.zeros((4, 4, 3), np.uint8)
    assert psnr(a, a) == PSNR_IDENTICAL == math.inf
    assert psnr(a, np.full_like(a, 255)) == pytest.approx(0.0)
    b = a.copy()
    b[...] = 1
    assert psnr(a, b) == pytest.approx(20 * math.log10(255), abs=0.01)
    assert psnr(a, b) == pytest.approx(48.13, abs=0.01)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5, 3), np.uint8))


def test_psnr_decreases_with_noise():
    img = synth_dataset(2, 1, 32, seed=1).images[0].astype(float)
    rng = make_rng(2)
    means = []
    for sigma in (2, 4, 8, 16):
        vals = [psnr(img.astype(np.uint8), np.clip(img + rng.normal(0, sigma, img.shape), 0, 255).round().astype(np.uint8))
                for _ in range(30)]
        means.append(np.mean(vals))
    assert all(x > y for x, y in zip(means, means[1:]))


def test_ssim_examples():
    ds = synth_dataset(3, 2, 32, seed=4)
    a = ds.images[0]
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, 255 - a) < 0
    noise = make_rng(0).integers(0, 256, a.shape).astype(np.uint8)
    assert all(ssim(img, noise) < 0.5 for img in ds.images)
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10, 3), np.uint8), np.zeros((10, 10, 3), np.uint8))


def test_ssim_matches_reference_implementation():
    skm = pytest.importorskip("skimage.metrics")
    ds = synth_dataset(3, 2, 32, seed=6)
    a, b = ds.images[0], ds.images[1]
    ya = a.astype(float) @ [0.299, 0.587, 0.114]
    yb = b.astype(float) @ [0.299, 0.587, 0.114]
    ref = skm.structural_similarity(ya, yb, data_range=255, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


SSIM_FROZEN = 0.3025014327048639


def test_ssim_frozen_value():
    # frozen from the reference implementation above (skimage, Gaussian sigma 1.5, population variance)
    ds = synth_dataset(3, 2, 32, seed=6)
    assert ssim(ds.images[0], ds.images[1]) == pytest.approx(SSIM_FROZEN, abs=1e-9)


@given(st.integers(0, 2 ** 31))
def test_symmetry(seed):
    r = make_rng(seed)
    a = r.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    b = np.clip(a.astype(int) + r.integers(-20, 21, a.shape), 0, 255).astype(np.uint8)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


class Echo:
    def __init__(self, labels):
        self.labels = labels

    def predict(self, images):
        return self.labels[: len(images)]


def test_accuracy_and_wsr():
    ds = synth_dataset(4, 5, 8, seed=1)
    assert accuracy(Echo(ds.labels), ds) == 1.0
    const = lambda imgs: np.full(len(imgs), 2)  # noqa: E731
    assert accuracy(const, ds) == pytest.approx(0.25)
    assert wsr(const, ds, 2) == 1.0 and wsr(const, ds, 1) == 0.0
    with pytest.raises(ValueError):
        accuracy(const, ds.take([]))
    with pytest.raises(ValueError):
        wsr(const, ds.take([]), 0)


def test_score_oracle_ties_lowest():
    ds = Dataset(np.zeros((2, 8, 8, 3), np.uint8), [0, 1], 3)
    scores = lambda imgs: np.ones((len(imgs), 3))  # noqa: E731
    assert accuracy(scores, ds) == 0.5  # ties resolve to class 0


@given(st.permutations(list(range(12))))
def test_permutation_invariance(perm):
    ds = synth_dataset(3, 4, 8, seed=2)
    model = lambda imgs: (imgs[:, 0, 0, 0].astype(int) % 3)  # noqa: E731
    p = ds.take(perm)
    assert accuracy(model, p) == accuracy(model, ds)
    assert wsr(model, p, 1) == wsr(model, ds, 1)


def test_report_and_tables(tmp_path):
    with pytest.raises(ValueError):
        MetricReport(acc=1.5)
    ds = synth_dataset(2, 2, 16, seed=3)
    rep = covertness(ds.images, ds.images)
    assert rep.psnr == math.inf and rep.ssim == pytest.approx(1.0) and rep.counts["identical"] == 4
    rows = [{"model": "m", "acc": 0.5, "wsr": 0.25}]
    path = write_csv(rows, tmp_path / "x.csv")
    back = read_csv(path)
    assert back[0]["acc"] == "0.500000"
    table = markdown_table(back, ["model", "acc", "wsr"], percent=("acc", "wsr"))
    assert table.splitlines()[2] == "| m | 50.00 | 25.00 |"
