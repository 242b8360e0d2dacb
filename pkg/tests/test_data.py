import numpy as np
import pytest
from PIL import Image

from ensembleseg.core import InvalidArgumentError, Mask, RasterImage, Sample
from ensembleseg.data import (DatasetError, SplitSpec, SyntheticSpec, load_dataset, preprocess, split,
                              synth_generate, write_dataset)
from ensembleseg.metrics import confusion, dice


def _write_pairs(tmp_path, stems, mask_stems):
    (tmp_path / "img").mkdir()
    (tmp_path / "msk").mkdir()
    for s in stems:
        Image.fromarray(np.full((6, 6, 3), 100, np.uint8)).save(tmp_path / "img" / f"{s}.png")
    for s in mask_stems:
        Image.fromarray(np.zeros((6, 6), np.uint8)).save(tmp_path / "msk" / f"{s}.png")


def test_load_dataset_pairs(tmp_path):
    _write_pairs(tmp_path, ["c", "a", "b"], ["a", "b", "c"])
    samples = load_dataset(tmp_path / "img", tmp_path / "msk")
    assert [s.id for s in samples] == ["a", "b", "c"]
    assert samples[0].image.channels == 3 and samples[0].mask.labels.shape == (6, 6)


def test_load_dataset_unmatched(tmp_path):
    _write_pairs(tmp_path, ["a", "b"], ["a"])
    with pytest.raises(DatasetError, match="b"):
        load_dataset(tmp_path / "img", tmp_path / "msk")


def test_load_dataset_empty(tmp_path):
    (tmp_path / "img").mkdir()
    with pytest.raises(DatasetError, match="no images"):
        load_dataset(tmp_path / "img")


def test_preprocess_normalizes():
    v = np.zeros((32, 32, 3), np.float32) + 0.2
    v[:, 16:] += 0.5
    out, _ = preprocess(RasterImage(v), None, 16)
    assert out.values.shape == (16, 16, 3)
    assert np.abs(out.values.mean(axis=(0, 1))).max() < 1e-6
    assert np.abs(out.values.std(axis=(0, 1)) - 1).max() < 1e-4


def test_preprocess_fixed_point_and_idempotent(rng):
    v = rng.normal(size=(16, 16, 3))
    v = (v - v.mean(axis=(0, 1))) / v.std(axis=(0, 1))
    out, _ = preprocess(RasterImage(v), None, 16)
    assert np.allclose(out.values, v, atol=1e-5)
    raw = RasterImage(rng.random((40, 40, 3)))
    once, _ = preprocess(raw, None, 16)
    twice, _ = preprocess(once, None, 16)
    assert np.allclose(once.values, twice.values, atol=1e-5)


def test_preprocess_constant_image_warns():
    with pytest.warns(RuntimeWarning):
        out, _ = preprocess(RasterImage(np.ones((8, 8, 3))), None, 8)
    assert np.isfinite(out.values).all()


def test_mask_nearest_downscale():
    m = np.zeros((256, 256), np.uint8)
    m[64:192, 64:192] = 1
    _, out = preprocess(RasterImage(np.random.default_rng(0).random((256, 256, 3))), Mask(m), 128)
    expected = np.zeros((128, 128), np.uint8)
    expected[32:96, 32:96] = 1
    assert np.array_equal(out.labels, expected)
    assert set(np.unique(out.labels)) <= {0, 1}


def _fake(n):
    return [Sample(f"i{k:05d}", RasterImage(np.zeros((1, 1, 3))), Mask(np.zeros((1, 1)))) for k in range(n)]


def test_split_full_scale_counts():
    ds = split(_fake(2594), SplitSpec())
    assert (len(ds.test), len(ds.labeled), len(ds.validation), len(ds.unlabeled)) == (500, 100, 50, 1944)
    assert all(s.mask is None for s in ds.unlabeled) and len(ds.unlabeled_truth) == 1944


def test_split_deterministic_and_partition(rng):
    for _ in range(20):
        n = int(rng.integers(10, 200))
        lab = int(rng.integers(0, n // 3))
        val = int(rng.integers(0, n // 3))
        spec = SplitSpec(labeled_count=lab, validation_count=val, test_fraction=0.2, seed=int(rng.integers(1000)))
        samples = _fake(n)
        ds = split(samples, spec)
        ids = ds.ids()
        flat = [i for v in ids.values() for i in v]
        assert len(flat) == len(set(flat)) == n
        assert split(samples[::-1], spec).ids() == ids


def test_split_unsatisfiable():
    with pytest.raises(DatasetError, match="needs"):
        split(_fake(10), SplitSpec(labeled_count=20))


def test_synth_contract():
    samples = synth_generate(SyntheticSpec(count=10, image_size=32, seed=3))
    assert len(samples) == 10 and all(s.mask.labels.any() for s in samples)
    again = synth_generate(SyntheticSpec(count=10, image_size=32, seed=3))
    assert all(np.array_equal(a.image.values, b.image.values) and np.array_equal(a.mask.labels, b.mask.labels)
               for a, b in zip(samples, again))
    with pytest.raises(InvalidArgumentError):
        synth_generate(SyntheticSpec(image_size=40))


def threshold_oracle(image):
    """Segment by the mid-level between background median and brightest value."""
    gray = image.values.mean(axis=2)
    level = 0.5 * (np.median(gray) + gray.max())
    return (gray >= level).astype(np.uint8)


def test_synth_threshold_recovery():
    spec = SyntheticSpec(count=20, image_size=64, noise=0.0, contrast=(0.55, 0.55), edge=0.02, distractors=0, seed=5)
    scores = [dice(confusion(threshold_oracle(s.image), s.mask)) for s in synth_generate(spec)]
    assert np.mean(scores) > 0.99 and min(scores) > 0.98


def test_write_dataset_bytes_identical(tmp_path):
    spec = SyntheticSpec(count=3, image_size=16, seed=1)
    write_dataset(synth_generate(spec), tmp_path / "a")
    write_dataset(synth_generate(spec), tmp_path / "b")
    for sub in ("images", "masks"):
        for p in sorted((tmp_path / "a" / sub).iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
    back = load_dataset(tmp_path / "a" / "images", tmp_path / "a" / "masks")
    assert len(back) == 3
