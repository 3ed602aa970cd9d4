"""Marker-set algebra: bipartite matching, ground-truth merging, ICP merging
of detection lists, per-substack fusion of the four view-pair lists and
whole-volume assembly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .registration import RegistrationError, RigidTransform3D, horn_absolute_orientation
from .volume import MarkerList, SubstackGrid

log = logging.getLogger(__name__)

PAIR_KEYS = ("0-90", "0-270", "180-90", "180-270")
GT_MERGE_DISTANCE = 3.0


@dataclass
class MatchSet:
    pairs: list = field(default_factory=list)        # (index_a, index_b, distance)
    unmatched_a: list = field(default_factory=list)
    unmatched_b: list = field(default_factory=list)

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for _, _, d in self.pairs], dtype=float)


def _points(m) -> np.ndarray:
    return np.asarray(getattr(m, "points", m), dtype=float).reshape(-1, 3)


def edge_weight(d: np.ndarray, coincident_weight: float) -> np.ndarray:
    """``1/d`` with coincident points mapped to `coincident_weight`."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), coincident_weight)


def coincident_weight_for(d: np.ndarray) -> float:
    """A weight exceeding the sum of all finite candidate weights."""
    pos = np.asarray(d, dtype=float)
    pos = pos[pos > 0]
    return float((1.0 / pos).sum() + 1.0) if len(pos) else 1.0


def match_bipartite(a, b, max_dist: float) -> MatchSet:
    """Maximum-weight matching with weights ``1/d`` over pairs closer than `max_dist`.

    The candidate graph is split into connected components, each solved
    exactly with the Hungarian algorithm.  Coincident pairs outweigh any
    combination of finite edges, so they are always matched.
    """
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        return MatchSet([], list(range(len(pa))), list(range(len(pb))))
    ta, tb = cKDTree(pa), cKDTree(pb)
    dm = ta.sparse_distance_matrix(tb, max_dist, output_type="coo_matrix")
    rows, cols = dm.row, dm.col
    dist = np.linalg.norm(pa[rows] - pb[cols], axis=1)
    keep = dist < max_dist
    rows, cols, dist = rows[keep], cols[keep], dist[keep]

    pairs = []
    if len(rows):
        w = edge_weight(dist, coincident_weight_for(dist))
        na = len(pa)
        graph = sparse.coo_matrix((np.ones(len(rows)), (rows, na + cols)),
                                  shape=(na + len(pb), na + len(pb)))
        _, label = connected_components(graph, directed=False)
        comp = label[rows]
        order = np.argsort(comp, kind="stable")
        bounds = np.flatnonzero(np.diff(comp[order])) + 1
        for grp in np.split(order, bounds):
            ra, ia = np.unique(rows[grp], return_inverse=True)
            rb, ib = np.unique(cols[grp], return_inverse=True)
            mat = np.zeros((len(ra), len(rb)))
            mat[ia, ib] = w[grp]
            dmat = np.full((len(ra), len(rb)), np.inf)
            dmat[ia, ib] = dist[grp]
            ri, ci = linear_sum_assignment(mat, maximize=True)
            for i, j in zip(ri, ci):
                if mat[i, j] > 0:
                    pairs.append((int(ra[i]), int(rb[j]), float(dmat[i, j])))
    pairs.sort()
    used_a = {p[0] for p in pairs}
    used_b = {p[1] for p in pairs}
    return MatchSet(pairs,
                    [i for i in range(len(pa)) if i not in used_a],
                    [j for j in range(len(pb)) if j not in used_b])


def matching_weight(ms: MatchSet, coincident_weight: float) -> float:
    return float(edge_weight(ms.distances, coincident_weight).sum()) if ms.pairs else 0.0


def _mean_mass(ma, ia, mb, ib):
    if ma is None or mb is None:
        return None
    return 0.5 * (ma[ia] + mb[ib])


def _combine(a: MarkerList, b_points: np.ndarray, b: MarkerList, pairs, unmatched_a,
             unmatched_b, frame) -> MarkerList:
    pa = a.points
    pts, mass = [], []
    have_mass = a.mass is not None and b.mass is not None
    for i in unmatched_a:
        pts.append(pa[i])
        mass.append(a.mass[i] if have_mass else np.nan)
    for i, j, _ in pairs:
        pts.append(0.5 * (pa[i] + b_points[j]))
        mass.append(0.5 * (a.mass[i] + b.mass[j]) if have_mass else np.nan)
    for j in unmatched_b:
        pts.append(b_points[j])
        mass.append(b.mass[j] if have_mass else np.nan)
    out = MarkerList(np.asarray(pts).reshape(-1, 3),
                     np.asarray(mass) if have_mass else None, frame=frame)
    return out


def merge_ground_truth(a: MarkerList, b: MarkerList, d_star: float = GT_MERGE_DISTANCE) -> MarkerList:
    """Merge two annotation sets: matched pairs within `d_star` become midpoints."""
    ms = match_bipartite(a, b, np.nextafter(d_star, np.inf))
    near = [p for p in ms.pairs if p[2] <= d_star]
    far = [p for p in ms.pairs if p[2] > d_star]
    ua = sorted(ms.unmatched_a + [p[0] for p in far])
    ub = sorted(ms.unmatched_b + [p[1] for p in far])
    return _combine(a, b.points, b, near, ua, ub, a.frame)


# ---------------------------------------------------------------------------
# ICP

def _translation_fit(src, dst, w) -> RigidTransform3D:
    w = w / w.sum()
    return RigidTransform3D(np.eye(3), w @ dst - w @ src)


def icp_merge(a: MarkerList, b: MarkerList, max_corr_dist: float = 3.5, max_iter: int = 50,
              min_rigid_pairs: int = 6, report: Optional[dict] = None):
    """Align `b` onto `a` by ICP, then replace correspondences by midpoints.

    Correspondences are one-to-one matches closer than `max_corr_dist`;
    the rigid update is a weighted Horn fit (weights ``1/d``) when at least
    `min_rigid_pairs` correspondences exist, otherwise a weighted
    translation.  Iteration stops when the mean residual improves by less
    than 1e-4, would increase, or after `max_iter` rounds.

    Returns
    -------
    (MarkerList, RigidTransform3D)
        Merged list in the frame of `a` and the transform applied to `b`.
    """
    report = {} if report is None else report
    report.update(flagged=False, residuals=[], iterations=0)
    frame = a.frame
    if len(a) == 0 or len(b) == 0:
        return MarkerList.concatenate([a, b], frame=frame), RigidTransform3D.identity()

    pb0 = b.points
    t = RigidTransform3D.identity()
    ms = match_bipartite(a, pb0, max_corr_dist)
    if not ms.pairs:
        report["flagged"] = True
        log.debug("icp_merge: no correspondences, concatenating")
        return MarkerList.concatenate([a, b], frame=frame), t
    prev = float(ms.distances.mean())
    report["residuals"].append(prev)

    for it in range(max_iter):
        ia = np.array([p[0] for p in ms.pairs])
        ib = np.array([p[1] for p in ms.pairs])
        w = 1.0 / np.maximum(ms.distances, 0.05)
        try:
            if len(ia) >= min_rigid_pairs:
                cand = horn_absolute_orientation(pb0[ib], a.points[ia], w)
            else:
                cand = _translation_fit(pb0[ib], a.points[ia], w)
        except RegistrationError:
            cand = _translation_fit(pb0[ib], a.points[ia], w)
        cand_ms = match_bipartite(a, cand.apply(pb0), max_corr_dist)
        if not cand_ms.pairs:
            break
        res = float(cand_ms.distances.mean())
        if res > prev:
            break
        t, ms = cand, cand_ms
        report["residuals"].append(res)
        report["iterations"] = it + 1
        if prev - res < 1e-4:
            break
        prev = res

    merged = _combine(a, t.apply(pb0), b, ms.pairs, ms.unmatched_a, ms.unmatched_b, frame)
    return merged, t


# ---------------------------------------------------------------------------
# Per-substack fusion of the four pair lists

TransformProvider = Union[RigidTransform3D, Callable[[], Optional[RigidTransform3D]], None]


def _reference(key: str) -> str:
    return key.split("-")[0]


def _resolve(provider: TransformProvider) -> Optional[RigidTransform3D]:
    if provider is None or isinstance(provider, RigidTransform3D):
        return provider
    try:
        return provider()
    except Exception as exc:  # fine registration may fail for sparse substacks
        log.warning("180->0 transform unavailable: %s", exc)
        return None


def fuse_substack_lists(lists: dict, t180_to_0: TransformProvider = None,
                        max_corr_dist: float = 3.5, report: Optional[dict] = None) -> MarkerList:
    """Fuse the detections of the four view pairs of one substack.

    `lists` maps ``"0-90"``, ``"0-270"``, ``"180-90"`` and ``"180-270"`` to
    (possibly empty or missing) marker lists in their reference frames.
    Lists sharing a reference are ICP-merged; lists of the 180 degree
    reference are mapped through `t180_to_0` before the cross-reference
    merge.  If that transform cannot be obtained the cross-reference lists
    are concatenated and ``report["flagged"]`` is set.
    """
    report = {} if report is None else report
    report.update(flagged=False, case=None)
    nonempty = {k: lists[k] for k in PAIR_KEYS if lists.get(k) is not None and len(lists[k])}
    n = len(nonempty)
    report["case"] = {0: 1, 1: 2, 2: 3, 3: 4, 4: 5}[n]
    if n == 0:
        return MarkerList(frame="local")
    if n == 1:
        return next(iter(nonempty.values()))

    by_ref = {"0": [], "180": []}
    for k, m in nonempty.items():
        by_ref[_reference(k)].append(m)

    def merge_same(ms):
        if not ms:
            return None
        out = ms[0]
        for m in ms[1:]:
            out, _ = icp_merge(out, m, max_corr_dist)
        return out

    ref0 = merge_same(by_ref["0"])
    ref180 = merge_same(by_ref["180"])
    if ref0 is None or ref180 is None:
        return ref0 if ref180 is None else ref180

    t = _resolve(t180_to_0)
    if t is None:
        report["flagged"] = True
        return MarkerList.concatenate([ref0, ref180], frame=ref0.frame)
    mapped = t.apply_markers(ref180)
    out, _ = icp_merge(ref0, mapped, max_corr_dist)
    return out


# ---------------------------------------------------------------------------
# Assembly

def assemble_world(per_substack: dict, grid: SubstackGrid) -> MarkerList:
    """Translate local lists to world coordinates keeping only owned markers.

    A marker is emitted by the substack whose core box contains it, so
    detections repeated in overlapping tiles appear once.  Output is sorted
    by (z, y, x).
    """
    parts = []
    for index in sorted(per_substack):
        m = per_substack[index]
        if m is None or len(m) == 0:
            continue
        world = m.points + grid.origin(index)
        lo, hi = grid.core_bounds(index)
        own = np.all((world >= lo) & (world < hi), axis=1)
        if own.any():
            sub = m.subset(np.flatnonzero(own))
            parts.append(MarkerList(world[own], sub.mass, None, "world"))
    return MarkerList.concatenate(parts, frame="world").sorted_zyx() if parts else MarkerList(frame="world")
