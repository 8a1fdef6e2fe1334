import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from simsid import layout as L
from simsid.data import (ANOMALY_TYPES, DataError, baseline_scores, contaminate_training_set, export_split,
                         gen_synthetic, inject_anomaly, labels, load_image_dir, read_image, render_normal, stack,
                         synthetic_split)
from simsid.scoring import roc_auc


def shuffled_tiles(img, rng, side=4):
    t = L.SIZE // side
    tiles = img.reshape(side, t, side, t).transpose(0, 2, 1, 3).reshape(side * side, t, t)
    tiles = tiles[rng.permutation(side * side)]
    return tiles.reshape(side, side, t, t).transpose(0, 2, 1, 3).reshape(L.SIZE, L.SIZE)


def mean_pairwise_correlation(images):
    flat = images.reshape(len(images), -1)
    c = np.corrcoef(flat)
    iu = np.triu_indices(len(images), 1)
    return c[iu].mean()


# -- synthetic generation ---------------------------------------------------------------


def test_generation_is_deterministic():
    a = gen_synthetic(3, seed=5, abnormal=True)
    b = gen_synthetic(3, seed=5, abnormal=True)
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels)
        assert x.anomaly == y.anomaly and x.source_id == y.source_id


def test_samples_depend_on_index_not_batch():
    whole = gen_synthetic(4, seed=1)
    tail = gen_synthetic(2, seed=1, start=2)
    assert np.array_equal(whole[3].pixels, tail[1].pixels)


def test_normals_are_labelled_normal():
    for s in gen_synthetic(5, seed=0):
        assert s.label == 0 and s.anomaly is None
        assert s.pixels.shape == (128, 128)
        assert -1.0 <= s.pixels.min() and s.pixels.max() <= 1.0


def test_abnormals_carry_meta():
    for s in gen_synthetic(6, seed=0, abnormal=True):
        assert s.label == 1 and s.anomaly.kind in ANOMALY_TYPES


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        gen_synthetic(0, seed=0)


def test_layout_is_shared_across_samples():
    imgs = stack(gen_synthetic(50, seed=0))
    rng = np.random.default_rng(0)
    shuffled = np.stack([shuffled_tiles(x, rng) for x in imgs])
    assert mean_pairwise_correlation(imgs) > mean_pairwise_correlation(shuffled)


def test_layout_regions_have_expected_intensity_order():
    img, _ = render_normal(np.random.default_rng(0))
    lung = img[64, 40]
    column = img[64, 64]
    background = img[2, 2]
    assert lung < background < column


# -- anomaly injection --------------------------------------------------------------------


def _base(seed=0):
    return render_normal(np.random.default_rng(seed))


@pytest.mark.parametrize("kind", ANOMALY_TYPES)
@pytest.mark.parametrize("seed", range(8))
def test_injection_is_visible_local_and_small(kind, seed):
    img, info = _base(seed)
    out, meta = inject_anomaly(img, seed, kind=kind, layout_info=info)
    diff = np.abs(out - img)
    assert (diff >= 0.1).sum() >= 100
    rr, cc = np.mgrid[: L.SIZE, : L.SIZE]
    far = (rr - meta.center[0]) ** 2 + (cc - meta.center[1]) ** 2 > (meta.radius + 2) ** 2
    assert np.array_equal(out[far], img[far])
    assert (diff > 0).mean() <= 0.10


def test_blob_radius_range():
    for seed in range(10):
        img, info = _base(seed)
        _, meta = inject_anomaly(img, seed, kind="blob", layout_info=info)
        assert L.BLOB_RADIUS[0] <= meta.radius <= L.BLOB_RADIUS[1]


def test_injection_is_deterministic_and_seed_dependent():
    img, info = _base()
    a = inject_anomaly(img, 42, layout_info=info)
    b = inject_anomaly(img, 42, layout_info=info)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    kinds = {inject_anomaly(img, s, layout_info=info)[1].kind for s in range(30)}
    assert kinds == set(ANOMALY_TYPES)


def test_unknown_kind_rejected():
    img, info = _base()
    with pytest.raises(ValueError):
        inject_anomaly(img, 0, kind="scratch", layout_info=info)


# -- splits and contamination -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_split():
    return synthetic_split(100, 10, 10, seed=0, pool=60)


def test_split_shapes_and_disjointness(small_split):
    sp = small_split.validate()
    assert len(sp.train) == 100 and labels(sp.train).sum() == 0
    assert labels(sp.val).tolist() == [0] * 10 + [1] * 10
    assert labels(sp.test).sum() == 10


def test_contamination_zero_is_identity(small_split):
    assert contaminate_training_set(small_split, 0.0, seed=0) is small_split


def test_contamination_half(small_split):
    out = contaminate_training_set(small_split, 0.5, seed=0)
    y = labels(out.train)
    assert y.sum() == 50 and (y == 0).sum() == 50
    assert out.contamination == 0.5
    assert out.val is small_split.val and out.test is small_split.test
    out.validate()


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 1000))
def test_contamination_fraction_within_one_sample(small_split, ratio, seed):
    out = contaminate_training_set(small_split, ratio, seed)
    assert abs(labels(out.train).sum() - ratio * 100) <= 1


def test_contamination_is_deterministic(small_split):
    a = contaminate_training_set(small_split, 0.25, seed=3)
    b = contaminate_training_set(small_split, 0.25, seed=3)
    assert [s.source_id for s in a.train] == [s.source_id for s in b.train]


def test_contamination_errors(small_split):
    with pytest.raises(ValueError):
        contaminate_training_set(small_split, 0.6, seed=0)
    tight = synthetic_split(20, 2, 2, seed=0, pool=3)
    with pytest.raises(DataError):
        contaminate_training_set(tight, 0.5, seed=0)


def test_baseline_window():
    sp = synthetic_split(100, 10, 100, seed=3, pool=0)
    auc = roc_auc(baseline_scores(stack(sp.train), stack(sp.test)), labels(sp.test))
    assert 0.55 < auc < 0.95


# -- image directories ----------------------------------------------------------------------


def _write(path, arr, mode="L"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path)


def _dir_corpus(root, n_train=10, size=64):
    rng = np.random.default_rng(0)
    for i in range(n_train):
        _write(root / "train" / "normal" / f"{i:02d}.png", rng.integers(0, 256, (size, size), dtype=np.uint8))
    for split in ("val", "test"):
        for cls in ("normal", "abnormal"):
            rgb = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            _write(root / split / cls / "a.png", rgb, mode="RGB")
            _write(root / split / cls / "b.png", rgb[..., 0])


def test_load_directory(tmp_path):
    _dir_corpus(tmp_path)
    sp = load_image_dir(tmp_path)
    assert len(sp.train) == 10 and labels(sp.train).sum() == 0
    assert [s.source_id for s in sp.train] == sorted(s.source_id for s in sp.train)
    assert all(s.pixels.shape == (128, 128) for s in sp.train + sp.val + sp.test)
    again = load_image_dir(tmp_path)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(sp.test, again.test))


def test_resize_and_luminance(tmp_path):
    rgb = np.zeros((256, 256, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 200, 100, 50
    _write(tmp_path / "x.png", rgb, mode="RGB")
    px = read_image(tmp_path / "x.png")
    assert px.shape == (128, 128)
    y = 0.299 * 200 + 0.587 * 100 + 0.114 * 50
    np.testing.assert_allclose(px, y / 127.5 - 1.0, atol=1e-5)


def test_unreadable_file_is_skipped(tmp_path, caplog):
    _dir_corpus(tmp_path)
    (tmp_path / "train" / "normal" / "zz.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        sp = load_image_dir(tmp_path)
    assert len(sp.train) == 10
    assert "unreadable" in caplog.text


def test_empty_eval_class_rejected(tmp_path):
    _dir_corpus(tmp_path)
    for p in (tmp_path / "test" / "abnormal").iterdir():
        p.unlink()
    with pytest.raises(DataError):
        load_image_dir(tmp_path)


def test_export_round_trip(tmp_path):
    sp = synthetic_split(4, 2, 2, seed=0, pool=0)
    counts = export_split(sp, tmp_path)
    assert counts == {"train/normal": 4, "val/normal": 2, "val/abnormal": 2, "test/normal": 2, "test/abnormal": 2}
    back = load_image_dir(tmp_path)
    for a, b in zip(sp.train, back.train):
        assert np.abs(a.pixels - b.pixels).max() <= 1 / 127.5
