import dataclasses
import json

import numpy as np
import pytest

from fairfader import data
from fairfader.data import FilenameError, SampleRecord, SynthConfig


def synth(**kw):
    return data.gen_synthetic(dataclasses.replace(SynthConfig(n_samples=400, image_size=16), **kw))


# filenames


def test_parse_utk_filename():
    assert data.parse_utk_filename("25_0_1_20170116174525125.jpg.chip.jpg") == (25, 0, 1)
    assert data.parse_utk_filename("/some/dir/3_1_4_x.png") == (3, 1, 4)


@pytest.mark.parametrize("name,why", [
    ("25_2_1_x.jpg", "gender"),
    ("25_0_5_x.jpg", "race"),
    ("25_0_x.jpg", "expected"),
    ("abc.jpg", "expected"),
])
def test_parse_utk_filename_rejects(name, why):
    with pytest.raises(FilenameError, match=why):
        data.parse_utk_filename(name)


# loader


def test_load_dataset_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    recs = [SampleRecord(rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32), i % 2, i % 5, 20 + i, f"s{i}")
            for i in range(6)]
    data.write_images(recs, tmp_path)
    (tmp_path / "9_7_1_bad.png").write_bytes((tmp_path / "20_0_0_s0.png").read_bytes())
    (tmp_path / "30_1_2_broken.jpg").write_bytes(b"not an image")
    loaded = data.load_dataset(tmp_path, target_size=8)
    assert len(loaded) == 6
    assert sorted(n for n, _ in loaded.errors) == ["30_1_2_broken.jpg", "9_7_1_bad.png"]
    by_id = {r.source_id: r for r in loaded}
    r = by_id["20_0_0_s0.png"]
    assert (r.age, r.gender, r.race) == (20, 0, 0)
    assert r.image.shape == (3, 8, 8) and r.image.dtype == np.float32
    # 8-bit quantization only
    np.testing.assert_allclose(r.image, recs[0].image, atol=1 / 127.5)


def test_load_dataset_resizes(tmp_path):
    recs = [SampleRecord(np.zeros((1, 20, 20), np.float32), 0, 0, 1, "a")]
    data.write_images(recs, tmp_path)
    loaded = data.load_dataset(tmp_path, target_size=16, channels=1)
    assert loaded[0].image.shape == (1, 16, 16)


def test_to_unit_range_endpoints():
    np.testing.assert_allclose(data.to_unit_range([0, 255]), [-1, 1])


# splits


def test_make_splits_protocol():
    recs = synth(n_samples=2000, class_fractions=(0.5, 0.2, 0.1, 0.1, 0.1))
    s = data.make_splits(recs, 20, 0.1, seed=3)
    assert np.bincount([r.race for r in s.test], minlength=5).tolist() == [20] * 5
    rest = len(recs) - 100
    assert len(s.validation) == round(0.1 * rest)
    assert len(s.train) + len(s.validation) == rest
    ids = [set(r.source_id for r in part) for part in (s.train, s.validation, s.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert s.manifest_hash == data.make_splits(list(reversed(recs)), 20, 0.1, seed=3).manifest_hash
    assert s.manifest_hash != data.make_splits(recs, 20, 0.1, seed=4).manifest_hash


def test_474_per_race_test_size():
    recs = [SampleRecord(np.zeros((1, 2, 2), np.float32), i % 2, i % 5, None, f"r{i:05d}") for i in range(5000)]
    s = data.make_splits(recs, 474, 0.1, seed=0)
    assert len(s.test) == 2370


def test_make_splits_degenerate():
    recs = synth(n_samples=50)
    s = data.make_splits(recs, 0, 0.0)
    assert len(s.train) == 50 and not s.validation and not s.test


def test_make_splits_too_few_records():
    recs = synth(n_samples=100)
    with pytest.raises(ValueError, match="race class"):
        data.make_splits(recs, 10, 0.1)


def test_make_splits_duplicate_ids():
    recs = synth(n_samples=20)
    recs[1] = dataclasses.replace(recs[1], source_id=recs[0].source_id)
    with pytest.raises(ValueError, match="unique"):
        data.make_splits(recs, 0, 0.1)


# synthetic generator


def test_gen_synthetic_is_deterministic():
    a, b = synth(seed=5), synth(seed=5)
    assert data.manifest_hash(a) == data.manifest_hash(b)
    assert data.manifest_hash(a) != data.manifest_hash(synth(seed=6))


def test_gen_synthetic_contract():
    recs = synth()
    assert len(recs) == 400
    x, g, r = data.stack(recs)
    assert x.shape == (400, 1, 16, 16) and x.dtype == np.float32
    assert x.min() >= -1 and x.max() <= 1
    assert set(g) <= {0, 1} and set(r) <= set(range(5))


def test_gen_synthetic_fractions_and_gender_balance():
    recs = data.gen_synthetic(SynthConfig(n_samples=20000, image_size=16, seed=1,
                                          class_fractions=(0.2,) * 5))
    _, g, r = data.stack(recs)
    np.testing.assert_allclose(data.race_fractions(recs, 5), 0.2, atol=0.015)
    for k in range(5):
        assert abs(g[r == k].mean() - 0.5) < 0.02


def orientation(img):
    """0 if the brightest structure is a vertical bar, 1 if horizontal."""
    img = img[0]
    cols, rows = img.mean(axis=0), img.mean(axis=1)
    return int(np.ptp(rows) > np.ptp(cols))


def test_uncorrupted_cue_is_perfectly_readable():
    recs = synth(n_samples=1000, nuisance_correlation=0.0, noise_std=0.0)
    _, g, r = data.stack(recs)
    pred = np.array([orientation(rec.image) for rec in recs])
    for k in range(5):
        assert np.all(pred[r == k] == g[r == k])


def test_confound_weakens_minority_cue_only():
    base = dict(n_samples=3000, noise_std=0.0, seed=2)
    clean, conf = synth(nuisance_correlation=0.0, **base), synth(nuisance_correlation=1.0, **base)

    def contrast(rec):
        return rec.image.max() - rec.image.min()

    for a, b in zip(clean, conf):
        if a.race == 0:
            np.testing.assert_array_equal(a.image, b.image)
        else:
            assert contrast(b) < contrast(a)


def test_background_encodes_race():
    recs = synth(noise_std=0.0, n_samples=500)
    lv = data.background_levels(5)
    for rec in recs:
        assert abs(np.median(rec.image) - lv[rec.race]) <= 0.05 + 1e-6


@pytest.mark.parametrize("bad,field", [
    (dict(class_fractions=(0.5, 0.5, 0.0, 0.0, 0.0)), "class_fractions"),
    (dict(class_fractions=(0.5, 0.5)), "class_fractions"),
    (dict(nuisance_correlation=1.5), "nuisance_correlation"),
    (dict(image_size=12), "image_size"),
    (dict(noise_std=-1.0), "noise_std"),
])
def test_synth_config_validation_names_field(bad, field):
    with pytest.raises(ValueError, match=field):
        data.gen_synthetic(dataclasses.replace(SynthConfig(), **bad))


def test_synthetic_files_round_trip(tmp_path):
    recs = synth(n_samples=30)
    data.write_synthetic(recs, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest) == 30 and set(manifest[0]) == {"source_id", "gender", "race", "shape"}
    raw = np.fromfile(tmp_path / f"{recs[0].source_id}.f32", dtype="<f4")
    assert raw.size == 16 * 16
    back = data.read_synthetic(tmp_path)
    assert data.manifest_hash(back) == data.manifest_hash(recs)


def test_bar_must_fit():
    with pytest.raises(ValueError, match="bar_length"):
        data.gen_synthetic(SynthConfig(image_size=8))
