import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from octshift.dataset import Dataset
from octshift.errors import DataError
from octshift.phantom import PhantomParams, as_dataset, generate_dataset
from octshift.transforms import (
    TemplateRef,
    choose_template,
    histogram_map,
    histogram_match,
    histogram_w1,
    median2d,
    median_axial,
    transform_t1,
    transform_t2,
)
from octshift.volume import Domain, Volume


def brute_median2d(img, k):
    r = k // 2
    rows, cols = img.shape
    out = np.empty_like(img)
    for i in range(rows):
        for j in range(cols):
            vals = sorted(
                img[min(max(i + di, 0), rows - 1), min(max(j + dj, 0), cols - 1)]
                for di in range(-r, r + 1)
                for dj in range(-r, r + 1)
            )
            out[i, j] = vals[len(vals) // 2]
    return out


def brute_median_axial(arr):
    s = arr.shape[2]
    out = np.empty_like(arr)
    for k in range(s):
        trio = np.stack([arr[:, :, max(k - 1, 0)], arr[:, :, k], arr[:, :, min(k + 1, s - 1)]])
        out[:, :, k] = np.sort(trio, axis=0)[1]
    return out


def brute_histogram_match(values, template, bins):
    """Per-voxel Q_t(F_s(v)) with CDFs evaluated by counting, template bins represented by their means."""
    vb = np.minimum((values * bins).astype(int), bins - 1)
    tb = np.minimum((template * bins).astype(int), bins - 1)
    out = np.empty(values.shape)
    for idx, b in np.ndenumerate(vb):
        f = (vb <= b).sum() / vb.size
        j = next(j for j in range(bins) if (tb <= j).sum() / tb.size >= f)
        out[idx] = template[tb == j].mean()
    return out


def test_median2d_impulse_example():
    img = np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], np.float32)
    assert np.array_equal(median2d(img, 3), brute_median2d(img, 3))
    assert median2d(img, 3)[1, 1] == 0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_median2d_matches_oracle(k):
    rng = np.random.default_rng(k)
    for _ in range(10):
        img = rng.random((9, 9)).astype(np.float32)
        assert np.array_equal(median2d(img, k), brute_median2d(img, k))


def test_median2d_trivia():
    img = np.full((5, 4), 0.3, np.float32)
    assert np.array_equal(median2d(img, 3), img)
    rnd = np.random.default_rng(0).random((6, 6))
    assert np.array_equal(median2d(rnd, 1), rnd)
    out = median2d(rnd, 5)
    assert out.min() >= rnd.min() and out.max() <= rnd.max()
    with pytest.raises(ValueError):
        median2d(rnd, 2)


def test_median_axial_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        arr = rng.random((9, 9, 5)).astype(np.float32)
        assert np.array_equal(median_axial(Volume(arr)).voxels, brute_median_axial(arr))


def test_median_axial_examples():
    v = np.zeros((1, 1, 3), np.float32)
    v[0, 0, 1] = 1
    assert median_axial(Volume(v)).voxels[0, 0, 1] == 0
    single = Volume(np.random.default_rng(1).random((4, 4, 1)).astype(np.float32))
    assert np.array_equal(median_axial(single).voxels, single.voxels)


def test_histogram_match_eight_voxels():
    vol = Volume(np.array([0.0] * 4 + [1.0] * 4, np.float32).reshape(2, 2, 2))
    tmpl = Volume(np.array([0.25] * 4 + [0.75] * 4, np.float32).reshape(2, 2, 2))
    out = histogram_match(vol, tmpl, 256).voxels
    oracle = brute_histogram_match(vol.voxels.astype(np.float64), tmpl.voxels.astype(np.float64), 256)
    assert np.array_equal(out, oracle.astype(np.float32))
    assert sorted(out.ravel().tolist()) == [0.25] * 4 + [0.75] * 4
    assert np.all(out[vol.voxels == 0] == 0.25)


@pytest.mark.parametrize("seed", range(5))
def test_histogram_match_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    vals = rng.random((6, 5, 3)) ** 2
    tmpl = rng.random((4, 4, 4)) ** 0.5
    out = histogram_match(Volume(vals.astype(np.float32)), Volume(tmpl.astype(np.float32)), 16).voxels
    oracle = brute_histogram_match(vals.astype(np.float32).astype(np.float64), tmpl.astype(np.float32).astype(np.float64), 16)
    np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_histogram_map_is_monotone(seed):
    rng = np.random.default_rng(seed)
    lut = histogram_map(rng.random(500) ** 3, rng.random(300), 64)
    assert np.all(np.diff(lut) >= 0)
    assert lut.min() >= 0 and lut.max() <= 1


def test_histogram_match_constant_and_self():
    rng = np.random.default_rng(2)
    tmpl = Volume(rng.random((5, 5, 2)).astype(np.float32))
    const = histogram_match(Volume(np.full((3, 3, 2), 0.4, np.float32)), tmpl, 256).voxels
    assert np.unique(const).size == 1
    centers = ((np.arange(8) + 0.5) / 8).astype(np.float32)
    v = Volume(np.repeat(centers, 2).reshape(4, 2, 2))
    assert np.array_equal(histogram_match(v, v, 8).voxels, v.voxels)
    with pytest.raises(ValueError):
        histogram_map(v.voxels, v.voxels, 1)


def test_t1_is_the_composition():
    arr = np.random.default_rng(4).random((10, 8, 4)).astype(np.float32)
    sliced = np.stack([brute_median2d(arr[:, :, s], 3) for s in range(4)], axis=2)
    out = transform_t1(Volume(arr))
    assert np.array_equal(out.voxels, brute_median_axial(sliced))
    assert out.provenance["transform"]["method"] == "t1"
    const = Volume(np.full((4, 4, 3), 0.7, np.float32))
    assert np.array_equal(transform_t1(const).voxels, const.voxels)


def test_t1_reduces_impulse_variance():
    rng = np.random.default_rng(9)
    pairs, _ = generate_dataset(5, 1, PhantomParams(shape=(64, 64, 8), seed=9))
    lower = total = 0
    for vol, _ in pairs:
        noisy = vol.voxels.copy()
        hits = rng.random(noisy.shape) < 0.05
        noisy[hits] = rng.integers(0, 2, hits.sum())
        filtered = transform_t1(Volume(noisy)).voxels
        for k in range(noisy.shape[2]):
            lower += filtered[:, :, k].var() < noisy[:, :, k].var()
            total += 1
    assert lower / total >= 0.95


@pytest.fixture(scope="module")
def small_ds():
    pairs, manifest = generate_dataset(6, 1, PhantomParams(shape=(64, 64, 4), seed=2))
    return as_dataset(pairs, manifest)


def test_t2_is_match_then_filter(small_ds):
    ref = choose_template(small_ds, 17)
    assert ref.volume_id in small_ds.ids("train", Domain.SOURCE)
    assert choose_template(small_ds, 17) == ref
    vid = small_ds.ids("test", Domain.TARGET)[0]
    vol = small_ds.volumes[vid]
    out = transform_t2(vol, ref, small_ds)
    manual = transform_t1(histogram_match(vol, small_ds.volumes[ref.volume_id], 256))
    assert np.array_equal(out.voxels, manual.voxels)
    assert out.provenance["transform"]["template"] == ref.to_json()
    assert out.shape == vol.shape and out.volume_id == vol.volume_id


def test_t2_identity_on_constant_self_template():
    const = Volume(np.full((4, 4, 2), 0.5, np.float32), domain=Domain.SOURCE, volume_id="c")
    ds = Dataset({"c": const}, {})
    out = transform_t2(const, TemplateRef("c", 0), ds)
    assert np.allclose(out.voxels, const.voxels)


def test_t2_missing_template(small_ds):
    vol = next(iter(small_ds.volumes.values()))
    with pytest.raises(DataError):
        transform_t2(vol, TemplateRef("nope", 0), small_ds)


def w1_oracle(a, b, bins=256):
    centers = (np.arange(bins) + 0.5) / bins
    ha = np.bincount(np.minimum((np.ravel(a) * bins).astype(int), bins - 1), minlength=bins)
    hb = np.bincount(np.minimum((np.ravel(b) * bins).astype(int), bins - 1), minlength=bins)
    return wasserstein_distance(centers, centers, ha, hb)


def test_w1_matches_transport_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random(1000) ** 2, rng.random(700)
    assert histogram_w1(a, b) == pytest.approx(w1_oracle(a, b), abs=1e-12)
    assert histogram_w1(a, a) == 0


def test_t2_moves_target_toward_template(small_ds):
    ref = choose_template(small_ds, 3)
    tmpl = small_ds.volumes[ref.volume_id].voxels
    for vid in small_ds.ids(None, Domain.TARGET):
        raw = small_ds.volumes[vid]
        out = transform_t2(raw, ref, small_ds)
        assert w1_oracle(out.voxels, tmpl) <= w1_oracle(raw.voxels, tmpl)
