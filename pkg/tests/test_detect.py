import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mvcells.detect import (MeanShiftConfig, SeedConfig, ThresholdPair, detect_substack,
                            find_seeds, foreground, intensity_levels, kapur_thresholds,
                            local_average, local_maxima, max_entropy_thresholds, mean_shift)
from mvcells.volume import Volume

from oracles import brute_kapur


def test_kapur_matches_brute_force_random():
    rng = np.random.default_rng(0)
    for i in range(100):
        hist = rng.integers(0, 50, 64)
        hist[rng.random(64) < 0.3] = 0
        if hist.sum() == 0:
            hist[3] = 1
        assert kapur_thresholds(hist) == brute_kapur(hist), i


def test_kapur_three_spikes():
    hist = np.zeros(256)
    hist[[10, 100, 200]] = [500, 300, 200]
    t1, t2 = kapur_thresholds(hist)
    assert 10 <= t1 < 100 <= t2 < 200


def test_kapur_constant_volume():
    vol = Volume(np.full((5, 5, 5), 80 / 255))
    assert max_entropy_thresholds(vol) == ThresholdPair(80, 80)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_thresholds_invariant_to_permutation(seed):
    rng = np.random.default_rng(seed)
    data = rng.random((6, 7, 8)) ** 3
    perm = rng.permutation(data.size)
    shuffled = data.reshape(-1)[perm].reshape(data.shape)
    assert max_entropy_thresholds(Volume(data)) == max_entropy_thresholds(Volume(shuffled))


def test_threshold_pair_invariants():
    with pytest.raises(ValueError):
        ThresholdPair(10, 5)


def test_foreground_cardinality_matches_histogram():
    vol = Volume(np.random.default_rng(1).random((10, 10, 10)))
    levels = intensity_levels(vol).astype(int)
    hist = np.bincount(levels.ravel(), minlength=256)
    for theta in (0, 37, 128, 255, 256):
        assert foreground(vol, theta).sum() == hist[theta:].sum()
    assert foreground(vol, 0).all()
    assert not foreground(vol, 256).any()


# ---------------------------------------------------------------------------
# seeds

def test_local_maxima_plateau_representative():
    levels = np.zeros((5, 5, 5))
    levels[1:3, 1:3, 1:3] = 9
    levels[4, 4, 4] = 3
    peaks = local_maxima(levels, levels > 0)
    assert peaks.tolist() == [[1, 1, 1], [4, 4, 4]]


def test_local_maxima_plateau_centre():
    levels = np.zeros((9, 9, 9))
    levels[2:7, 2:7, 2:7] = 1
    assert local_maxima(levels, levels > 0).tolist() == [[4, 4, 4]]


def test_constant_substack_single_seed():
    vol = Volume(np.full((6, 6, 6), 0.5))
    fg = np.ones(vol.dims, dtype=bool)
    assert len(find_seeds(vol, fg, SeedConfig(), 100)) <= 1


def test_cube_center_passes_hard_criterion():
    data = np.zeros((15, 15, 15))
    data[5:10, 5:10, 5:10] = 1.0
    vol = Volume(data)
    avg = local_average(intensity_levels(vol), np.array([[7, 7, 7]]), 1.9, "hard")
    assert avg[0] == 255
    seeds = find_seeds(vol, foreground(vol, 254), SeedConfig(1.9, "hard"), 254)
    assert [7, 7, 7] in seeds.points.tolist()


def test_single_voxel_soft_average():
    data = np.zeros((21, 21, 21))
    data[10, 10, 10] = 1.0
    levels = intensity_levels(Volume(data))
    r = 1.9
    # direct evaluation of the truncated exponential average
    g = np.stack(np.meshgrid(*[np.arange(21)] * 3, indexing="ij"), -1) - 10
    d = np.linalg.norm(g, axis=-1)
    w = np.where(d <= 4 * r, np.exp(-d / r), 0)
    expected = 255 / w.sum()
    got = local_average(levels, np.array([[10, 10, 10]]), r, "soft")[0]
    assert got == pytest.approx(expected)
    vol = Volume(data)
    assert len(find_seeds(vol, foreground(vol, 1), SeedConfig(r), expected - 1)) == 1
    assert len(find_seeds(vol, foreground(vol, 1), SeedConfig(r), expected + 1)) == 0


def test_soft_average_clipped_at_boundary():
    levels = np.full((4, 4, 4), 100.0)
    avg = local_average(levels, np.array([[0, 0, 0], [3, 3, 3]]), 1.9, "soft")
    assert np.allclose(avg, 100.0)


def blob_field(seed, n_blobs=4, size=40, sigma=1.2):
    rng = np.random.default_rng(seed)
    centers = []
    while len(centers) < n_blobs:
        c = rng.uniform(6, size - 6, 3)
        if all(np.linalg.norm(c - o) > 10 for o in centers):
            centers.append(c)
    g = np.stack(np.meshgrid(*[np.arange(size)] * 3, indexing="ij"), -1).astype(float)
    data = np.zeros((size,) * 3)
    for c in centers:
        data = np.maximum(data, np.exp(-np.sum((g - c) ** 2, -1) / (2 * sigma ** 2)))
    return Volume(data), np.array(centers)


def test_seeds_subset_of_foreground():
    vol, _ = blob_field(2)
    th = max_entropy_thresholds(vol)
    fg = foreground(vol, th.theta1)
    seeds = find_seeds(vol, fg, SeedConfig(1.0), th.theta1)
    assert len(seeds) > 0
    idx = seeds.points.astype(int)
    assert fg[idx[:, 0], idx[:, 1], idx[:, 2]].all()


# ---------------------------------------------------------------------------
# mean shift

def test_mean_shift_symmetric_cube():
    g = np.argwhere(np.ones((9, 9, 9), dtype=bool)).astype(float) + 10
    w = np.exp(-np.sum((g - 14) ** 2, axis=1) / 8.0)
    res = mean_shift([[14.0, 14, 14], [13.2, 14.7, 13.9]], g, w, MeanShiftConfig(bandwidth=2.5))
    assert len(res.modes) == 1
    assert np.allclose(res.modes.points[0], [14, 14, 14], atol=0.05)


def test_mean_shift_two_blobs():
    size = 30
    g = np.stack(np.meshgrid(*[np.arange(size)] * 3, indexing="ij"), -1).astype(float)
    centers = np.array([[10.0, 15.3, 14.6], [20.0, 15.3, 14.6]])
    data = sum(np.exp(-np.sum((g - c) ** 2, -1) / 2.0) for c in centers)
    fg = data > 0.05
    coords = np.argwhere(fg).astype(float)
    seeds = np.array([[11, 16, 14], [9, 15, 15], [19, 14, 15], [21, 16, 14]], dtype=float)
    res = mean_shift(seeds, coords, data[fg], MeanShiftConfig(bandwidth=2.5))
    assert len(res.modes) == 2
    # brute-force oracle: weighted centroid of each blob's own foreground voxels
    for c in centers:
        own = np.linalg.norm(coords - c, axis=1) < 5
        w = data[fg][own]
        oracle = w @ coords[own] / w.sum()
        d = np.linalg.norm(res.modes.points - oracle, axis=1)
        assert d.min() < 0.5


def test_mean_shift_stationary_and_converged():
    vol, _ = blob_field(3)
    th = max_entropy_thresholds(vol)
    fg = foreground(vol, th.theta1)
    levels = intensity_levels(vol)
    coords = np.argwhere(fg).astype(float)
    cfg = MeanShiftConfig()
    res = mean_shift(coords[::7], coords, levels[fg], cfg)
    assert np.all(res.iterations < cfg.max_iterations)
    w = levels[fg]
    for m in res.modes.points:
        near = np.linalg.norm(coords - m, axis=1) <= cfg.bandwidth
        again = w[near] @ coords[near] / w[near].sum()
        assert np.linalg.norm(again - m) < cfg.epsilon


def test_mean_shift_empty_window_flagged():
    coords = np.array([[0.0, 0, 0], [1, 0, 0]])
    res = mean_shift([[50.0, 50, 50]], coords, np.ones(2))
    assert res.flagged.tolist() == [True]
    assert res.modes.points.tolist() == [[50.0, 50, 50]]
    assert res.modes.mass.tolist() == [0.0]


def test_mean_shift_duplicates_collapse():
    g = np.argwhere(np.ones((7, 7, 7), dtype=bool)).astype(float)
    seeds = g[np.linalg.norm(g - 3, axis=1) < 2]
    res = mean_shift(seeds, g, np.ones(len(g)))
    assert len(res.modes) == 1


def test_detect_dark_substack_empty():
    assert len(detect_substack(Volume.zeros((16, 16, 16)))) == 0


def test_detect_blob_field_recovers_centers():
    vol, centers = blob_field(4)
    found = detect_substack(vol, SeedConfig(1.0), MeanShiftConfig())
    assert len(found) == len(centers)
    for c in centers:
        assert np.linalg.norm(found.points - c, axis=1).min() < 0.5


def test_detect_deterministic():
    vol, _ = blob_field(5)
    a = detect_substack(vol, SeedConfig(1.0))
    b = detect_substack(vol, SeedConfig(1.0))
    assert np.array_equal(a.points, b.points)
