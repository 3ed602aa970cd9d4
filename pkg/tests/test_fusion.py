import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mvcells.fusion import fuse_content_based, fuse_views, local_entropy
from mvcells.volume import Volume


def brute_entropy(levels, x, y, z, window):
    h = window // 2
    block = levels[max(x - h, 0):x + h + 1, max(y - h, 0):y + h + 1, max(z - h, 0):z + h + 1]
    _, counts = np.unique(block, return_counts=True)
    p = counts / counts.sum()
    return -sum(q * math.log(q) for q in p) / math.log(256)


def test_local_entropy_matches_brute_force():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 6, (7, 8, 6)).astype(np.uint8) * 40
    vol = Volume.from_uint8(raw)
    h = local_entropy(vol, 3)
    levels = vol.to_uint8()
    for x, y, z in [(0, 0, 0), (3, 4, 2), (6, 7, 5), (1, 7, 3)]:
        assert h[x, y, z] == pytest.approx(brute_entropy(levels, x, y, z, 3), abs=1e-9)


def test_local_entropy_constant_is_zero():
    assert np.allclose(local_entropy(Volume(np.full((10, 10, 10), 0.3))), 0)


def test_local_entropy_bad_window():
    with pytest.raises(ValueError):
        local_entropy(Volume.zeros((5, 5, 5)), 4)


def test_fuse_formula_pointwise():
    vi, vj = np.array([[[0.2]]]), np.array([[[0.8]]])
    hi, hj = np.array([[[0.5]]]), np.array([[[0.25]]])
    wi, wj = 100 ** 0.5, 100 ** 0.25
    got = fuse_content_based(vi, vj, hi, hj).data[0, 0, 0]
    assert got == pytest.approx((wi * 0.2 + wj * 0.8) / (wi + wj))


def test_equal_entropy_gives_average():
    rng = np.random.default_rng(1)
    a, b = rng.random((4, 4, 4)), rng.random((4, 4, 4))
    h = np.full((4, 4, 4), 0.3)
    assert np.allclose(fuse_content_based(a, b, h, h).data, (a + b) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_fused_within_inputs(seed):
    rng = np.random.default_rng(seed)
    a, b, hi, hj = (rng.random((5, 5, 5)) for _ in range(4))
    f = fuse_content_based(a, b, hi, hj).data
    assert np.all(f >= np.minimum(a, b)) and np.all(f <= np.maximum(a, b))


def test_fuse_self_is_identity():
    vol = Volume(np.random.default_rng(2).random((9, 9, 9)))
    assert np.allclose(fuse_views(vol, vol).data, vol.data)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_content_based(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)),
                           np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_textured_view_dominates():
    rng = np.random.default_rng(3)
    sharp = Volume(rng.random((12, 12, 12)))
    flat = Volume(np.full((12, 12, 12), 0.5))
    fused = fuse_views(sharp, flat)
    # weights 100^H favour the high-entropy view by orders of magnitude
    assert np.mean(np.abs(fused.data - sharp.data)) < 0.1 * np.mean(np.abs(flat.data - sharp.data))
