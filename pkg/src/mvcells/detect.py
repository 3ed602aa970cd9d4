"""Soma identification on a substack: two-level maximum-entropy
thresholding, seed selection and flat-kernel mean shift.

Intensities are handled in 0-255 units (``round(255 * data)``) so that the
thresholds apply directly to the 8-bit histogram.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import MarkerList, Volume

log = logging.getLogger(__name__)

_TIE_TOL = 1e-10


@dataclass(frozen=True)
class ThresholdPair:
    theta1: int
    theta2: int

    def __post_init__(self):
        if not 0 <= self.theta1 <= self.theta2 <= 255:
            raise ValueError(f"invalid thresholds {self.theta1}, {self.theta2}")


@dataclass
class SeedConfig:
    radius: float = 1.9
    criterion: str = "soft"  # "soft" or "hard"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("seed radius must be positive")
        if self.criterion not in ("soft", "hard"):
            raise ValueError(f"unknown criterion {self.criterion!r}")


@dataclass
class MeanShiftConfig:
    bandwidth: float = 2.5
    epsilon: float = 1e-3
    max_iterations: int = 100
    collapse_distance: float = 1.0

    def __post_init__(self):
        if self.bandwidth <= 0 or self.epsilon <= 0:
            raise ValueError("bandwidth and epsilon must be positive")


def intensity_levels(volume: Volume) -> np.ndarray:
    """Voxel intensities on the 0-255 scale as float."""
    return np.clip(np.rint(volume.data * 255.0), 0, 255)


def _class_entropy(mass, plogp):
    # H = -sum (p/P) log(p/P) = log P - (sum p log p) / P, zero for empty classes
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.log(mass) - plogp / mass
    return np.where(mass > 0, h, 0.0)


def kapur_thresholds(histogram) -> tuple[int, int]:
    """Two-threshold maximum-entropy (Kapur) partition of a histogram.

    Classes are ``[0, t1]``, ``(t1, t2]`` and ``(t2, L-1]``.  All ordered
    pairs are searched; pairs leaving a class without mass are only
    considered when the histogram has fewer than three occupied levels, in
    which case thresholds are restricted to the occupied range.  Ties go to
    the lexicographically smallest pair.
    """
    h = np.asarray(histogram, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        return 0, 0
    p = h / total
    n = len(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    cp = np.cumsum(p)
    cq = np.cumsum(plogp)

    t1 = np.arange(n)[:, None]
    t2 = np.arange(n)[None, :]
    m1 = np.broadcast_to(cp[:, None], (n, n))
    q1 = np.broadcast_to(cq[:, None], (n, n))
    m2 = cp[None, :] - cp[:, None]
    q2 = cq[None, :] - cq[:, None]
    m3 = np.broadcast_to(1.0 - cp[None, :], (n, n))
    q3 = np.broadcast_to(cq[-1] - cq[None, :], (n, n))
    # guard against round-off in cumulative differences
    eps = 1e-15
    m2 = np.where(m2 > eps, m2, 0.0)
    m3 = np.where(m3 > eps, m3, 0.0)
    score = _class_entropy(m1, q1) + _class_entropy(m2, q2) + _class_entropy(m3, q3)

    valid = t1 <= t2
    occupied = np.flatnonzero(h > 0)
    nonempty = valid & (m1 > 0) & (m2 > 0) & (m3 > 0)
    if nonempty.any():
        valid = nonempty
    else:
        lo, hi = occupied[0], occupied[-1]
        valid = valid & (t1 >= lo) & (t2 <= hi)
    score = np.where(valid, score, -np.inf)
    best = score.max()
    cand = np.argwhere(score >= best - _TIE_TOL * max(1.0, abs(best)))
    a, b = cand[0]  # argwhere is row-major, hence lexicographic
    return int(a), int(b)


def max_entropy_thresholds(substack: Volume) -> ThresholdPair:
    hist = np.bincount(intensity_levels(substack).astype(np.int64).ravel(), minlength=256)
    return ThresholdPair(*kapur_thresholds(hist))


def foreground(substack: Volume, theta1: float) -> np.ndarray:
    """Boolean mask of voxels with intensity >= `theta1` (0-255 units)."""
    return intensity_levels(substack) >= theta1


def local_maxima(levels: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Coordinates of 26-neighbourhood local maxima, one per plateau.

    A voxel qualifies when it is >= all its neighbours. Each connected group
    of qualifying voxels is represented by its member nearest the group
    centroid (lexicographically smallest on ties), returned in lexicographic
    order.
    """
    peak = levels >= ndimage.maximum_filter(levels, size=3, mode="nearest")
    if mask is not None:
        peak &= mask
    labels, n = ndimage.label(peak, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64)
    coords = np.argwhere(labels)  # lexicographic order
    lab = labels[tuple(coords.T)] - 1
    counts = np.bincount(lab, minlength=n)
    centroid = np.stack([np.bincount(lab, coords[:, k], n) for k in range(3)], 1) / counts[:, None]
    d = np.sum((coords - centroid[lab]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(coords)), d, lab))
    _, first = np.unique(lab[order], return_index=True)
    return coords[np.sort(order[first])]


def _ball_offsets(radius: float, criterion: str):
    if criterion == "hard":
        reach = int(np.ceil(radius))
    else:
        reach = int(np.floor(4.0 * radius))
    g = np.arange(-reach, reach + 1)
    off = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    d = np.linalg.norm(off, axis=1)
    if criterion == "hard":
        keep = d < radius
        w = np.ones(keep.sum())
    else:
        keep = d <= 4.0 * radius
        w = np.exp(-d[keep] / radius)
    return off[keep], w


def local_average(levels: np.ndarray, points: np.ndarray, radius: float,
                  criterion: str = "soft", chunk: int = 2048) -> np.ndarray:
    """Average intensity around integer `points` under the hard or soft criterion.

    Sums run over voxels inside the substack only; the soft weights
    ``exp(-d / r)`` are truncated at ``d <= 4 r``.
    """
    off, w = _ball_offsets(radius, criterion)
    shape = np.array(levels.shape)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        q = p[:, None, :] + off[None, :, :]
        inside = np.all((q >= 0) & (q < shape), axis=2)
        qc = np.clip(q, 0, shape - 1)
        vals = levels[qc[..., 0], qc[..., 1], qc[..., 2]] * inside
        wi = w[None, :] * inside
        out[s:s + chunk] = (vals * w[None, :]).sum(axis=1) / wi.sum(axis=1)
    return out


def find_seeds(substack: Volume, fg: np.ndarray, cfg: SeedConfig, theta1: float) -> MarkerList:
    """Local maxima inside the foreground whose neighbourhood average exceeds theta1."""
    levels = intensity_levels(substack)
    cand = local_maxima(levels, fg)
    if len(cand) == 0:
        return MarkerList()
    avg = local_average(levels, cand, cfg.radius, cfg.criterion)
    keep = avg > theta1
    return MarkerList(cand[keep].astype(float))


@dataclass
class MeanShiftResult:
    modes: MarkerList
    iterations: np.ndarray      # per seed
    flagged: np.ndarray         # seeds whose window held no foreground mass


def _shift(tree, coords, weights, pts, bandwidth):
    out = pts.copy()
    mass = np.zeros(len(pts))
    empty = np.zeros(len(pts), dtype=bool)
    for i, nb in enumerate(tree.query_ball_point(pts, bandwidth)):
        if not nb:
            empty[i] = True
            continue
        w = weights[nb]
        m = w.sum()
        if m <= 0:
            empty[i] = True
            continue
        out[i] = w @ coords[nb] / m
        mass[i] = m
    return out, mass, empty


def _run(tree, coords, weights, start, cfg):
    pts = start.copy()
    active = np.ones(len(pts), dtype=bool)
    iters = np.zeros(len(pts), dtype=int)
    empty = np.zeros(len(pts), dtype=bool)
    for _ in range(cfg.max_iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        new, _, emp = _shift(tree, coords, weights, pts[idx], cfg.bandwidth)
        disp = np.linalg.norm(new - pts[idx], axis=1)
        pts[idx] = new
        iters[idx] += 1
        empty[idx] |= emp
        done = (disp < cfg.epsilon) | emp
        active[idx[done]] = False
    return pts, iters, empty


def _collapse(points, mass, dist):
    """Single-linkage groups of points closer than `dist`, order independent."""
    if len(points) == 0:
        return []
    pairs = cKDTree(points).query_pairs(dist, output_type="ndarray")
    parent = np.arange(len(points))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(len(points))])
    return [np.flatnonzero(roots == r) for r in np.unique(roots)]


def mean_shift(seeds, coords: np.ndarray, weights: np.ndarray,
               cfg: MeanShiftConfig = MeanShiftConfig()) -> MeanShiftResult:
    """Flat-kernel mean shift of `seeds` over weighted foreground voxels.

    Each seed moves to the intensity-weighted barycenter of the foreground
    voxels within `cfg.bandwidth` until its displacement drops below
    `cfg.epsilon`.  Modes closer than `cfg.collapse_distance` are merged at
    their mass-weighted mean and re-converged, so every returned mode is a
    fixed point.  A mode's mass is the total intensity in its final window.
    Seeds whose window holds no foreground are returned unmoved with zero
    mass and flagged.
    """
    seeds = np.asarray(getattr(seeds, "points", seeds), dtype=float).reshape(-1, 3)
    coords = np.asarray(coords, dtype=float).reshape(-1, 3)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if len(seeds) == 0 or len(coords) == 0:
        return MeanShiftResult(MarkerList(np.zeros((0, 3)), np.zeros(0)),
                               np.zeros(len(seeds), dtype=int),
                               np.ones(len(seeds), dtype=bool))
    tree = cKDTree(coords)
    pts, iters, empty = _run(tree, coords, weights, seeds, cfg)
    if empty.any():
        log.debug("mean_shift: %d seeds had an empty window", int(empty.sum()))

    modes = pts[~empty]
    for _ in range(10):
        _, mass, _ = _shift(tree, coords, weights, modes, cfg.bandwidth)
        groups = _collapse(modes, mass, cfg.collapse_distance)
        if all(len(g) == 1 for g in groups):
            break
        merged = np.array([
            (mass[g] @ modes[g]) / mass[g].sum() if mass[g].sum() > 0 else modes[g[0]]
            for g in groups
        ])
        modes, _, _ = _run(tree, coords, weights, merged, cfg)
    _, mass, _ = _shift(tree, coords, weights, modes, cfg.bandwidth)
    if empty.any():
        modes = np.vstack([modes, seeds[empty]])
        mass = np.concatenate([mass, np.zeros(int(empty.sum()))])
    order = np.lexsort((modes[:, 0], modes[:, 1], modes[:, 2])) if len(modes) else []
    return MeanShiftResult(MarkerList(modes[order], mass[order]), iters, empty)


def detect_substack(deconvolved: Volume, seed_cfg: SeedConfig = SeedConfig(),
                    ms_cfg: MeanShiftConfig = MeanShiftConfig(),
                    thresholds: ThresholdPair | None = None) -> MarkerList:
    """Threshold, seed and mean-shift a (deconvolved) substack."""
    th = thresholds or max_entropy_thresholds(deconvolved)
    levels = intensity_levels(deconvolved)
    fg = levels >= th.theta1
    if th.theta2 == 0 or not fg.any():
        return MarkerList(np.zeros((0, 3)), np.zeros(0))
    seeds = find_seeds(deconvolved, fg, seed_cfg, th.theta1)
    if len(seeds) == 0:
        return MarkerList(np.zeros((0, 3)), np.zeros(0))
    coords = np.argwhere(fg).astype(float)
    return mean_shift(seeds, coords, levels[fg], ms_cfg).modes
