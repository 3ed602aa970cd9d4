import hashlib
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mvcells.volume import (MarkerList, Volume, VolumeFormatError, extract_substack,
                            load_markers_csv, load_volume, local_to_world, save_markers_csv,
                            save_markers_ply, save_volume, split_substacks, world_to_local)


def test_roundtrip_constant(tmp_path):
    vol = Volume.from_uint8(np.full((4, 4, 4), 7, dtype=np.uint8))
    save_volume(vol, str(tmp_path / "v"))
    back = load_volume(str(tmp_path / "v"))
    assert np.array_equal(back.to_uint8(), vol.to_uint8())
    assert back.voxel_size == vol.voxel_size


def test_roundtrip_hash_random_seeds(tmp_path):
    for seed in range(100):
        raw = np.random.default_rng(seed).integers(0, 256, (16, 16, 16), dtype=np.uint8)
        path = str(tmp_path / f"v{seed}")
        save_volume(Volume.from_uint8(raw), path)
        back = load_volume(path).to_uint8()
        assert hashlib.sha1(back.tobytes()).digest() == hashlib.sha1(raw.tobytes()).digest()


def test_non_cubic_axes_keep_orientation(tmp_path):
    raw = np.arange(3 * 5 * 2, dtype=np.uint8).reshape(3, 5, 2)
    save_volume(Volume.from_uint8(raw), str(tmp_path / "v"))
    assert np.array_equal(load_volume(str(tmp_path / "v")).to_uint8(), raw)


def test_missing_slice_is_error(tmp_path):
    path = str(tmp_path / "v")
    save_volume(Volume.zeros((4, 4, 10)), path)
    os.remove(os.path.join(path, "slice_00009.png"))
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_missing_sidecar_is_error(tmp_path):
    path = str(tmp_path / "v")
    save_volume(Volume.zeros((4, 4, 2)), path)
    os.remove(os.path.join(path, "volume.json"))
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_slice_shape_mismatch_is_error(tmp_path):
    path = str(tmp_path / "v")
    save_volume(Volume.zeros((4, 4, 2)), path)
    with open(os.path.join(path, "volume.json")) as f:
        meta = json.load(f)
    meta["dims"] = [5, 4, 2]
    with open(os.path.join(path, "volume.json"), "w") as f:
        json.dump(meta, f)
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_volume_rejects_bad_shape():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)))


# ---------------------------------------------------------------------------
# tiling

def test_exact_fit_single_tile():
    g = split_substacks((91, 90, 90))
    assert len(g) == 1
    assert g.origins == [(0, 0, 0)]


def test_two_tiles_along_x():
    g = split_substacks((166, 90, 90), (91, 90, 90), 16)
    assert g.axis_origins[0] == (0, 75)
    assert len(g) == 2


def test_small_volume_is_clamped():
    g = split_substacks((50, 50, 50))
    assert len(g) == 1
    assert g.tile_dims == (50, 50, 50)


def test_overlap_too_large():
    with pytest.raises(ValueError):
        split_substacks((100, 100, 100), (20, 20, 20), 20)


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(1, 60)] * 3), st.tuples(*[st.integers(4, 20)] * 3),
       st.integers(0, 3))
def test_cover_and_overlap(dims, sub, overlap):
    g = split_substacks(dims, sub, overlap)
    cover = np.zeros(dims, dtype=int)
    for i in range(len(g)):
        lo, hi = g.bounds(i)
        lo, hi = lo.astype(int), hi.astype(int)
        assert np.all(hi <= np.array(dims))
        cover[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += 1
    assert cover.min() >= 1
    for ax in range(3):
        o = g.axis_origins[ax]
        size = g.tile_dims[ax]
        for k in range(len(o) - 2):
            assert o[k + 1] - o[k] == size - overlap
        if len(o) > 1:
            assert o[-1] + size == dims[ax]


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(5, 40)] * 3), st.integers(5, 15))
def test_core_regions_partition(dims, size):
    g = split_substacks(dims, (size,) * 3, 4)
    owners = np.zeros(dims, dtype=int)
    grid = np.stack(np.meshgrid(*[np.arange(d) + 0.5 for d in dims], indexing="ij"), -1)
    for i in range(len(g)):
        lo, hi = g.core_bounds(i)
        owners += np.all((grid >= lo) & (grid < hi), axis=-1)
    assert np.all(owners == 1)


def test_extract_second_tile():
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((166, 90, 90)))
    g = split_substacks(vol.dims)
    sub = extract_substack(vol, g, 1)
    assert sub.data[0, 0, 0] == vol.data[75, 0, 0]
    assert sub.dims == (91, 90, 90)
    with pytest.raises(IndexError):
        extract_substack(vol, g, 2)


def test_identity_grid_copy():
    vol = Volume(np.random.default_rng(1).random((10, 11, 12)))
    sub = extract_substack(vol, split_substacks(vol.dims), 0)
    assert np.array_equal(sub.data, vol.data)
    sub.data[0, 0, 0] = -1
    assert vol.data[0, 0, 0] != -1


def test_local_world_roundtrip():
    g = split_substacks((166, 90, 90))
    assert np.allclose(local_to_world(g, 1, (3, 4, 5)), (78, 4, 5))
    pts = np.random.default_rng(2).uniform(-5, 100, (1000, 3))
    for i in range(len(g)):
        assert np.allclose(world_to_local(g, i, local_to_world(g, i, pts)), pts)


# ---------------------------------------------------------------------------
# markers

def test_marker_csv_roundtrip(tmp_path):
    m = MarkerList([[1.25, 2.5, 3.0], [4.0, 5.0, 6.125]], mass=[10.0, 20.5], labels=["a", "b"])
    save_markers_csv(m, str(tmp_path / "m.csv"))
    back = load_markers_csv(str(tmp_path / "m.csv"))
    assert np.allclose(back.points, m.points)
    assert np.allclose(back.mass, m.mass)
    assert back.labels == ["a", "b"]


def test_marker_csv_blank_mass(tmp_path):
    save_markers_csv(MarkerList([[1, 2, 3]]), str(tmp_path / "m.csv"))
    assert load_markers_csv(str(tmp_path / "m.csv")).mass is None


def test_marker_csv_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(VolumeFormatError):
        load_markers_csv(str(tmp_path / "m.csv"))


def test_ply_header(tmp_path):
    m = MarkerList([[1, 2, 3], [4, 5, 6]], mass=[1, 2])
    save_markers_ply(m, str(tmp_path / "m.ply"))
    text = (tmp_path / "m.ply").read_text().splitlines()
    assert text[0] == "ply"
    assert "element vertex 2" in text
    assert "property float mass" in text
    assert text[-1] == "4.000 5.000 6.000 2.000"


def test_markers_reject_nonfinite():
    with pytest.raises(ValueError):
        MarkerList([[np.nan, 0, 0]])


def test_sorted_zyx():
    m = MarkerList([[0, 0, 2], [5, 0, 1], [1, 0, 1]])
    assert np.array_equal(m.sorted_zyx().points, [[1, 0, 1], [5, 0, 1], [0, 0, 2]])
