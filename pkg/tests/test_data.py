import numpy as np
import pytest

from xviewgeo import data, fileio
from xviewgeo.evaluation import chance_band
from xviewgeo.transforms import cyclic_shift


def oracle_r1(spec, theta=0.0):
    recs = data.generate_synthetic(spec)
    grounds = [cyclic_shift(r.ground_image(), theta) for r in recs]
    q, r = data.direction_oracle_embeddings(grounds, [r.aerial_image() for r in recs])
    return float(np.mean(np.argmax(q @ r.T, axis=1) == np.arange(len(recs))))


def small(**kw):
    base = dict(n_train=0, n_test=128)
    base.update(kw)
    return data.SyntheticSpec(**base)


@pytest.fixture(scope="module")
def oracle_scores():
    return {s: oracle_r1(small(shortcut_strength=s)) for s in (0.0, 0.5, 1.0)}


def test_generation_is_deterministic():
    a = data.generate_synthetic(small(n_test=6, seed=3))
    b = data.generate_synthetic(small(n_test=6, seed=3))
    for x, y in zip(a, b):
        assert np.array_equal(x.ground, y.ground) and np.array_equal(x.aerial, y.aerial)
        assert x.id == y.id and x.split == y.split
    c = data.generate_synthetic(small(n_test=6, seed=4))
    assert not np.array_equal(a[0].ground, c[0].ground)


def test_shapes_and_ranges():
    spec = small(n_test=4, pano_size=(16, 64), aerial_size=32)
    for r in data.generate_synthetic(spec):
        assert r.ground.shape == (16, 64, 3) and r.aerial.shape == (32, 32, 3)
        assert r.ground.min() >= 0 and r.ground.max() <= 1


def test_splits_are_disjoint():
    recs = data.generate_synthetic(data.SyntheticSpec(n_train=10, n_val=3, n_test=5))
    ids = {s: {r.id for r in data.split(recs, s)} for s in data.SPLITS}
    assert [len(ids[s]) for s in data.SPLITS] == [10, 3, 5]
    assert not (ids["train"] & ids["val"]) and not (ids["train"] & ids["test"]) and not (ids["val"] & ids["test"])
    assert len({r.id for r in recs}) == len(recs)


def test_panorama_wraps_horizontally():
    # the seam between the last and first column is no rougher than any other column step
    g = data.generate_synthetic(small(n_test=1, pixel_noise=0.0))[0].ground
    steps = np.abs(np.diff(g, axis=1)).mean(axis=(0, 2))
    seam = np.abs(g[:, 0] - g[:, -1]).mean()
    assert seam <= steps.max()


@pytest.mark.parametrize("kw", [dict(pano_size=(32, 126)), dict(shortcut_strength=1.5), dict(n_train=0, n_test=0)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        data.SyntheticSpec(**kw)


def test_oracle_at_full_shortcut(oracle_scores):
    assert oracle_scores[1.0] >= 0.9


def test_oracle_collapses_under_shift():
    # fixed non-zero offsets; a uniform draw leaves a few queries within one histogram bin of North
    offsets = [30.0 * k for k in range(1, 12)]
    mean = np.mean([oracle_r1(small(shortcut_strength=1.0), t) for t in offsets])
    lo, hi = chance_band(128, 128 * len(offsets))
    assert lo <= mean <= hi


def test_oracle_at_chance_without_shortcut(oracle_scores):
    lo, hi = chance_band(128, 128)
    assert lo <= oracle_scores[0.0] <= hi


def test_oracle_monotone_in_strength(oracle_scores):
    assert oracle_scores[0.0] <= oracle_scores[0.5] <= oracle_scores[1.0]


# ---------------------------------------------------------------- manifest


def write_fixture(tmp_path, rows, header="id,ground_path,aerial_path,split,peers"):
    p = tmp_path / "manifest.csv"
    p.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return p


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("")
    assert data.load_manifest(p) == []


def test_three_row_fixture(tmp_path):
    p = write_fixture(tmp_path, ["a,g/a.png,s/a.png,train,", "b,g/b.png,s/b.png,val,", "c,g/c.png,s/c.png,test,a;b"])
    recs = data.load_manifest(p)
    assert [r.id for r in recs] == ["a", "b", "c"]
    assert [r.split for r in recs] == ["train", "val", "test"]
    assert recs[2].peers == ["a", "b"]
    # files do not exist: loading is deferred until access
    with pytest.raises(FileNotFoundError):
        recs[0].ground_image()


def test_duplicate_id_names_both_lines(tmp_path):
    p = write_fixture(tmp_path, ["a,g,s,train,", "b,g,s,train,", "a,g,s,test,"])
    with pytest.raises(data.ManifestError) as e:
        data.load_manifest(p)
    msg = str(e.value)
    assert "'a'" in msg and ":4:" in msg and "line 2" in msg


def test_malformed_row_reports_line(tmp_path):
    p = write_fixture(tmp_path, ["a,g,s,train,", "b,g,s"])
    with pytest.raises(data.ManifestError, match=":3:"):
        data.load_manifest(p)


def test_bad_split_rejected(tmp_path):
    p = write_fixture(tmp_path, ["a,g,s,holdout,"])
    with pytest.raises(data.ManifestError, match="split"):
        data.load_manifest(p)


def test_missing_column_rejected(tmp_path):
    p = write_fixture(tmp_path, ["a,g,train"], header="id,ground_path,split")
    with pytest.raises(data.ManifestError, match="aerial_path"):
        data.load_manifest(p)


def test_export_round_trip(tmp_path):
    recs = data.generate_synthetic(small(n_test=3))
    recs[2].peers = ["loc00000"]
    m = data.export_dataset(recs, tmp_path / "ds")
    back = data.load_manifest(m)
    assert [r.id for r in back] == [r.id for r in recs]
    assert back[2].peers == ["loc00000"]
    for a, b in zip(recs, back):
        # 8-bit PNG quantisation
        assert np.abs(a.ground - b.ground_image()).max() <= 0.5 / 255 + 1e-6
        assert np.abs(a.aerial - b.aerial_image()).max() <= 0.5 / 255 + 1e-6


def test_raw_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    fileio.write_raw(tmp_path / "x.raw", img)
    assert np.array_equal(fileio.read_image(tmp_path / "x.raw"), img)
    assert (tmp_path / "x.raw").stat().st_size == 8 + 5 * 7 * 3 * 4


def test_raw_rejects_bad_payload(tmp_path):
    (tmp_path / "bad.raw").write_bytes(b"\x02\x00\x00\x00\x02\x00\x00\x00" + b"\x00" * 12)
    with pytest.raises(ValueError):
        fileio.read_raw(tmp_path / "bad.raw")


# ---------------------------------------------------------------- street pairs


def street_records(n_peers):
    recs = [data.LocationRecord(f"s{i}", np.full((2, 4, 3), i, dtype=np.float32), None) for i in range(n_peers)]
    recs[0].peers = [r.id for r in recs[1:]]
    return recs


def test_two_images_forced_pair():
    recs = street_records(2)
    for seed in range(5):
        a, b = data.sample_street_positive_pair(recs, "s0", np.random.default_rng(seed))
        assert a[0, 0, 0] == 0 and b[0, 0, 0] == 1


def test_single_image_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        data.sample_street_positive_pair(street_records(1), "s0", np.random.default_rng(0))


def test_five_images_reproducible():
    recs = street_records(5)
    a = data.sample_street_positive_pair(recs, "s0", np.random.default_rng(7))
    b = data.sample_street_positive_pair(recs, "s0", np.random.default_rng(7))
    assert a[0][0, 0, 0] == b[0][0, 0, 0] and a[1][0, 0, 0] == b[1][0, 0, 0]
    assert a[0][0, 0, 0] != a[1][0, 0, 0]
