"""Dense 3D volumes, marker lists and overlapping substack tiling.

Volumes are indexed ``data[x, y, z]`` and hold intensities normalized to
[0, 1]; on disk they are a directory of 8-bit PNG slices (one per z) plus
a JSON sidecar.
"""
from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image

SIDECAR = "volume.json"
SLICE_PATTERN = "slice_{:05d}.png"


class VolumeFormatError(ValueError):
    """Raised when a volume directory or marker file is malformed."""


@dataclass
class Volume:
    data: np.ndarray
    voxel_size: float = 4.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @classmethod
    def zeros(cls, dims, voxel_size=4.0) -> "Volume":
        return cls(np.zeros(tuple(dims)), voxel_size)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray, voxel_size=4.0) -> "Volume":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0, voxel_size)

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.voxel_size)


def save_volume(volume: Volume, path: str) -> None:
    """Write `volume` as PNG slices along z plus a JSON sidecar."""
    os.makedirs(path, exist_ok=True)
    raw = volume.to_uint8()
    width, height, depth = raw.shape
    meta = {
        "dims": [width, height, depth],
        "voxel_size": float(volume.voxel_size),
        "dtype": "uint8",
        "slice_pattern": SLICE_PATTERN,
    }
    with open(os.path.join(path, SIDECAR), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    # stale slices from an earlier, deeper volume would break the count check
    for name in os.listdir(path):
        if name.startswith("slice_") and name.endswith(".png"):
            os.remove(os.path.join(path, name))
    for z in range(depth):
        # rows are y, columns are x
        Image.fromarray(np.ascontiguousarray(raw[:, :, z].T), mode="L").save(
            os.path.join(path, SLICE_PATTERN.format(z)), optimize=False)


def load_volume(path: str) -> Volume:
    sidecar = os.path.join(path, SIDECAR)
    if not os.path.isfile(sidecar):
        raise VolumeFormatError(f"missing sidecar {sidecar}")
    try:
        with open(sidecar) as f:
            meta = json.load(f)
        width, height, depth = (int(d) for d in meta["dims"])
        voxel_size = float(meta.get("voxel_size", 4.0))
        pattern = meta.get("slice_pattern", SLICE_PATTERN)
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"corrupt sidecar {sidecar}: {exc}") from exc
    if meta.get("dtype", "uint8") != "uint8":
        raise VolumeFormatError(f"unsupported dtype {meta.get('dtype')!r}")

    n_slices = sum(1 for n in os.listdir(path) if n.startswith("slice_") and n.endswith(".png"))
    if n_slices != depth:
        raise VolumeFormatError(f"sidecar declares depth {depth} but found {n_slices} slices")

    raw = np.empty((width, height, depth), dtype=np.uint8)
    for z in range(depth):
        fname = os.path.join(path, pattern.format(z))
        if not os.path.isfile(fname):
            raise VolumeFormatError(f"missing slice {fname}")
        img = np.asarray(Image.open(fname))
        if img.ndim != 2:
            raise VolumeFormatError(f"slice {fname} is not grayscale")
        if img.shape != (height, width):
            raise VolumeFormatError(
                f"slice {fname} has shape {img.shape}, expected {(height, width)}")
        # 16-bit files are accepted as long as the content fits in 8 bits
        if img.max(initial=0) > 255:
            raise VolumeFormatError(f"slice {fname} holds values above 255")
        raw[:, :, z] = img.T
    return Volume.from_uint8(raw, voxel_size)


# ---------------------------------------------------------------------------
# Markers

@dataclass
class MarkerList:
    """Soma centers as real-valued voxel coordinates ``(x, y, z)``.

    `mass` holds the accumulated intensity of each detection when known and
    `labels` an optional name per point.  `frame` is a free-form tag such
    as ``"local"`` or ``"world"``.
    """

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    mass: Optional[np.ndarray] = None
    labels: Optional[list] = None
    frame: str = "local"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("marker coordinates must be finite")
        self.points = pts
        if self.mass is not None:
            self.mass = np.asarray(self.mass, dtype=np.float64).reshape(-1)
            if len(self.mass) != len(pts):
                raise ValueError("mass length does not match points")
        if self.labels is not None:
            self.labels = list(self.labels)
            if len(self.labels) != len(pts):
                raise ValueError("labels length does not match points")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "MarkerList":
        idx = np.asarray(idx, dtype=int).reshape(-1)
        return MarkerList(
            self.points[idx],
            None if self.mass is None else self.mass[idx],
            None if self.labels is None else [self.labels[i] for i in idx],
            self.frame,
        )

    def translated(self, offset) -> "MarkerList":
        return MarkerList(self.points + np.asarray(offset, dtype=float), self.mass,
                          self.labels, self.frame)

    @staticmethod
    def concatenate(lists: Sequence["MarkerList"], frame: Optional[str] = None) -> "MarkerList":
        lists = [m for m in lists if m is not None]
        if not lists:
            return MarkerList(frame=frame or "local")
        pts = np.concatenate([m.points for m in lists], axis=0)
        mass = None
        if all(m.mass is not None for m in lists):
            mass = np.concatenate([m.mass for m in lists])
        labels = None
        if all(m.labels is not None for m in lists):
            labels = [lab for m in lists for lab in m.labels]
        return MarkerList(pts, mass, labels, frame or lists[0].frame)

    def sorted_zyx(self) -> "MarkerList":
        if len(self) == 0:
            return self
        order = np.lexsort((self.points[:, 0], self.points[:, 1], self.points[:, 2]))
        return self.subset(order)


def save_markers_csv(markers: MarkerList, path: str, precision: int = 3) -> None:
    """Write markers as CSV with header ``name,x,y,z,mass``."""
    fmt = "{:.%df}" % precision
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "x", "y", "z", "mass"])
        for i, p in enumerate(markers.points):
            name = markers.labels[i] if markers.labels is not None else str(i)
            mass = "" if markers.mass is None else fmt.format(markers.mass[i])
            w.writerow([name, fmt.format(p[0]), fmt.format(p[1]), fmt.format(p[2]), mass])


def load_markers_csv(path: str, frame: str = "local") -> MarkerList:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"x", "y", "z"} <= set(reader.fieldnames):
            raise VolumeFormatError(f"{path}: header must contain x,y,z")
        names, pts, masses = [], [], []
        for row in reader:
            try:
                pts.append([float(row["x"]), float(row["y"]), float(row["z"])])
            except (TypeError, ValueError) as exc:
                raise VolumeFormatError(f"{path}: bad coordinate row {row}") from exc
            names.append(row.get("name") or str(len(names)))
            m = (row.get("mass") or "").strip()
            masses.append(float(m) if m else np.nan)
    masses = np.array(masses, dtype=float)
    mass = None if len(masses) == 0 or np.all(np.isnan(masses)) else masses
    return MarkerList(np.array(pts).reshape(-1, 3), mass, names, frame)


def save_markers_ply(markers: MarkerList, path: str) -> None:
    """ASCII PLY point cloud; includes a ``mass`` property when available."""
    has_mass = markers.mass is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(markers)}",
             "property float x", "property float y", "property float z"]
    if has_mass:
        lines.append("property float mass")
    lines.append("end_header")
    for i, p in enumerate(markers.points):
        row = f"{p[0]:.3f} {p[1]:.3f} {p[2]:.3f}"
        if has_mass:
            row += f" {markers.mass[i]:.3f}"
        lines.append(row)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Substack tiling

def _axis_origins(n: int, size: int, overlap: int) -> list[int]:
    if n <= size:
        return [0]
    stride = size - overlap
    origins = [0]
    while origins[-1] + size < n:
        # the last tile is shifted back so it ends on the boundary
        origins.append(min(origins[-1] + stride, n - size))
    return origins


@dataclass(frozen=True)
class SubstackGrid:
    parent_dims: tuple
    substack_dims: tuple
    overlap: int
    axis_origins: tuple  # one tuple of origins per axis

    @property
    def tile_dims(self) -> tuple:
        """Actual tile size, clamped to the parent along short axes."""
        return tuple(min(s, n) for s, n in zip(self.substack_dims, self.parent_dims))

    @property
    def origins(self) -> list[tuple]:
        return list(itertools.product(*self.axis_origins))

    def __len__(self):
        return int(np.prod([len(o) for o in self.axis_origins]))

    def origin(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self):
            raise IndexError(f"substack index {index} out of range [0, {len(self)})")
        return np.array(self.origins[index], dtype=float)

    def bounds(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin(index)
        return lo, lo + np.array(self.tile_dims, dtype=float)

    def core_bounds(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Half-open world box owned by tile `index`.

        Neighbouring tiles split their shared slab at its midpoint, so the
        cores of all tiles partition space (outer faces extend to infinity).
        """
        lo = self.origin(index)
        pos = np.unravel_index(index, [len(o) for o in self.axis_origins])
        core_lo, core_hi = np.full(3, -np.inf), np.full(3, np.inf)
        for ax in range(3):
            origins = self.axis_origins[ax]
            k = pos[ax]
            size = self.tile_dims[ax]
            if k > 0:
                core_lo[ax] = 0.5 * (origins[k] + origins[k - 1] + size)
            if k < len(origins) - 1:
                core_hi[ax] = 0.5 * (origins[k + 1] + lo[ax] + size)
        return core_lo, core_hi


def split_substacks(dims, substack_dims=(91, 90, 90), overlap=16) -> SubstackGrid:
    """Decompose a volume of shape `dims` into overlapping tiles.

    Consecutive origins along an axis are ``size - overlap`` apart; the final
    tile is clamped so it ends exactly on the volume boundary.  Axes shorter
    than the tile yield a single tile of the axis length.
    """
    dims = tuple(int(d) for d in dims)
    substack_dims = tuple(int(s) for s in substack_dims)
    if len(dims) != 3 or len(substack_dims) != 3:
        raise ValueError("dims and substack_dims must be 3-tuples")
    if min(dims) <= 0 or min(substack_dims) <= 0:
        raise ValueError("dims must be positive")
    if overlap < 0 or any(overlap >= s for s in substack_dims):
        raise ValueError(f"overlap {overlap} must be smaller than every substack dimension")
    axis_origins = tuple(tuple(_axis_origins(n, s, overlap)) for n, s in zip(dims, substack_dims))
    return SubstackGrid(dims, substack_dims, int(overlap), axis_origins)


def extract_substack(volume: Volume, grid: SubstackGrid, index: int) -> Volume:
    lo = grid.origin(index).astype(int)
    sx, sy, sz = grid.tile_dims
    block = volume.data[lo[0]:lo[0] + sx, lo[1]:lo[1] + sy, lo[2]:lo[2] + sz]
    return Volume(block.copy(), volume.voxel_size)


def local_to_world(grid: SubstackGrid, index: int, point) -> np.ndarray:
    return np.asarray(point, dtype=float) + grid.origin(index)


def world_to_local(grid: SubstackGrid, index: int, point) -> np.ndarray:
    return np.asarray(point, dtype=float) - grid.origin(index)
