import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from freqmark.data import (Dataset, ImportError_, concat, derive_seed, import_image_folder,
                           make_rng, partition_subset, relabel, resize_bilinear, sample_rand,
                           save_image_folder, synth_dataset)


def _toy(n, classes=4):
    imgs = np.arange(n * 8 * 8 * 3, dtype=np.int64).reshape(n, 8, 8, 3) % 256
    return Dataset(imgs.astype(np.uint8), np.arange(n) % classes, classes)


def test_synth_shape_and_balance():
    ds = synth_dataset(10, 200, 32, seed=7)
    assert len(ds) == 2000 and ds.num_classes == 10
    assert ds.images.shape == (2000, 32, 32, 3) and ds.images.dtype == np.uint8
    assert (ds.class_counts() == 200).all()


def test_synth_deterministic_and_seed_sensitive():
    a, b = synth_dataset(3, 4, 16, seed=5), synth_dataset(3, 4, 16, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert (a.labels == b.labels).all()
    assert synth_dataset(3, 4, 16, seed=6).images.tobytes() != a.images.tobytes()


def test_synth_minimal_and_errors():
    ds = synth_dataset(2, 1, 8, seed=1)
    assert len(ds) == 2 and ds.labels[0] != ds.labels[1]
    with pytest.raises(ValueError, match="multiple of 8"):
        synth_dataset(2, 1, 30)
    with pytest.raises(ValueError):
        synth_dataset(1, 5)


def test_dataset_arrays_read_only():
    ds = _toy(4)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1
    with pytest.raises(ValueError):
        Dataset(ds.images, np.array([0, 1, 2, 9]), 4)


def test_rng_determinism():
    assert make_rng(3).integers(1 << 30, size=5).tolist() == make_rng(3).integers(1 << 30, size=5).tolist()
    assert derive_seed(1, 2) == derive_seed(1, 2) != derive_seed(2, 1)
    assert 0 <= derive_seed(9, 9, 9) < 2 ** 63


def test_sample_rand_boundaries():
    ds = _toy(10)
    sel, rest = sample_rand(ds, 10, make_rng(0))
    assert sorted(sel.ids) == list(range(10)) and len(rest) == 0
    sel, rest = sample_rand(ds, 0, make_rng(0))
    assert len(sel) == 0 and rest.ids.tolist() == list(range(10))
    with pytest.raises(ValueError):
        sample_rand(ds, 11, make_rng(0))
    a, _ = sample_rand(ds, 4, make_rng(9))
    b, _ = sample_rand(ds, 4, make_rng(9))
    assert a.ids.tolist() == b.ids.tolist()


def test_partition_examples():
    ds = _toy(10)
    assert all(len(partition_subset(ds, i, 10)) == 1 for i in range(10))
    assert partition_subset(_toy(7), 0, 3).ids.tolist() == [0, 3, 6]
    shuffled = partition_subset(_toy(7), 0, 3, seed=4)
    assert len(shuffled) == 3
    with pytest.raises(ValueError):
        partition_subset(ds, 3, 3)


@given(n=st.integers(0, 40), frac=st.floats(0, 1), k=st.integers(1, 12), seed=st.integers(0, 2 ** 32))
def test_sample_then_partition_reconstructs(n, frac, k, seed):
    ds = _toy(n)
    m = int(frac * n)
    sel, rest = sample_rand(ds, m, make_rng(seed))
    assert sorted(np.concatenate([sel.ids, rest.ids]).tolist()) == list(range(n))
    parts = [partition_subset(sel, i, k, seed=seed) for i in range(k)]
    ids = np.concatenate([p.ids for p in parts])
    assert sorted(ids.tolist()) == sorted(sel.ids.tolist())
    assert len(set(ids.tolist())) == len(ids)


def test_relabel():
    ds = _toy(6)
    out = relabel(ds, 3)
    assert (out.labels == 3).all() and out.images.tobytes() == ds.images.tobytes()
    assert (ds.labels == np.arange(6) % 4).all()  # input untouched
    assert len(relabel(ds.take([]), 1)) == 0
    with pytest.raises(ValueError):
        relabel(ds, 4)


def test_concat_and_shape_mismatch():
    a, b = _toy(3), _toy(2)
    assert len(concat([a, b])) == 5
    big = Dataset(np.zeros((1, 16, 16, 3), np.uint8), [0], 4)
    with pytest.raises(ValueError):
        concat([a, big])


def test_resize_constant_and_identity():
    img = np.full((31, 31, 3), 77, np.uint8)
    out = resize_bilinear(img, 32, 32)
    assert out.shape == (32, 32, 3) and (out == 77).all()
    x = make_rng(1).integers(0, 256, (8, 8, 3)).astype(np.uint8)
    assert (resize_bilinear(x, 8, 8) == x).all()


def test_folder_roundtrip(tmp_path):
    ds = synth_dataset(3, 2, 16, seed=2)
    save_image_folder(ds, tmp_path)
    back = import_image_folder(tmp_path, side=16)
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tolist() == ds.labels.tolist() and back.ids.tolist() == ds.ids.tolist()


def test_import_class_dirs_sorted_and_resized(tmp_path):
    for name, colour in (("zebra", 10), ("apple", 200), ("mango", 90)):
        (tmp_path / name).mkdir()
        Image.fromarray(np.full((31, 31, 3), colour, np.uint8)).save(tmp_path / name / "a.png")
    ds = import_image_folder(tmp_path, side=32)
    assert ds.num_classes == 3 and ds.class_names == ("apple", "mango", "zebra")
    assert ds.images.shape == (3, 32, 32, 3)
    assert ds.images[ds.labels == 0][0, 0, 0, 0] == 200


def test_import_reports_bad_files(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "a" / "ok.png")
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "b" / "ok.png")
    (tmp_path / "b" / "broken.png").write_bytes(b"not a png")
    with pytest.raises(ImportError_, match="broken.png"):
        import_image_folder(tmp_path, side=8)
    ds = import_image_folder(tmp_path, side=8, skip_bad=True)
    assert len(ds) == 2
    (tmp_path / "c").mkdir()
    with pytest.raises(ValueError, match="empty"):
        import_image_folder(tmp_path, side=8, skip_bad=True)
