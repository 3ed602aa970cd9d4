"""Rigid registration: closed-form absolute orientation, RANSAC, resampling
and Mattes mutual-information fine alignment of substack pairs.

A :class:`RigidTransform3D` maps points ``p`` (row vectors) to
``p @ R.T + t``.  ``compose(T_ab, T_bc)`` is the map a -> c.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import MarkerList, Volume

log = logging.getLogger(__name__)

BLACK_THRESHOLD = 30  # theta_2 in 0-255 units below which a view is black


class RegistrationError(RuntimeError):
    pass


class OverlapError(RegistrationError):
    """Too few MI samples map inside both volumes."""


@dataclass
class RigidTransform3D:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform3D":
        return cls()

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_markers(self, markers: MarkerList) -> MarkerList:
        return MarkerList(self.apply(markers.points), markers.mass, markers.labels, markers.frame)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rotation_angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    def is_valid(self, tol=1e-9) -> bool:
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) <= tol
                and np.all(np.isfinite(self.translation)))

    def to_dict(self, source="", target="") -> dict:
        return {
            "frames": f"{source}->{target}" if source or target else "",
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform3D":
        return cls(np.array(d["rotation"], dtype=float).reshape(3, 3), d["translation"])


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def _clean(r: np.ndarray) -> np.ndarray:
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
        return _orthonormalize(r)
    return r


def compose(t_ab: RigidTransform3D, t_bc: RigidTransform3D) -> RigidTransform3D:
    """Return the map a -> c given a -> b and b -> c."""
    r = _clean(t_bc.rotation @ t_ab.rotation)
    return RigidTransform3D(r, t_bc.rotation @ t_ab.translation + t_bc.translation)


def invert(t: RigidTransform3D) -> RigidTransform3D:
    rt = _clean(t.rotation.T)
    return RigidTransform3D(rt, -rt @ t.translation)


def rotation_about_axis(axis, angle_deg) -> np.ndarray:
    """Rotation matrix for a right-handed turn of `angle_deg` about `axis`."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    theta = np.radians(angle_deg)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def rotation_about_center(rotation, center, translation=(0.0, 0.0, 0.0)) -> RigidTransform3D:
    """``x -> R (x - c) + c + t``."""
    r = np.asarray(rotation, dtype=float)
    c = np.asarray(center, dtype=float)
    return RigidTransform3D(r, c - r @ c + np.asarray(translation, dtype=float))


def versor_to_matrix(v) -> np.ndarray:
    """Rotation matrix of the unit quaternion with vector part `v` (|v| <= 1)."""
    v = np.asarray(v, dtype=float)
    w = np.sqrt(max(0.0, 1.0 - float(v @ v)))
    return quaternion_to_matrix(np.array([w, v[0], v[1], v[2]]))


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# Closed-form absolute orientation

def _as_pairs(src, dst):
    src = np.asarray(getattr(src, "points", src), dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(getattr(dst, "points", dst), dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    return src, dst


def arun_absolute_orientation(src, dst, weights=None) -> RigidTransform3D:
    """Least-squares rigid transform mapping `src` onto `dst` via SVD.

    Parameters
    ----------
    src, dst : (N, 3) array-like
        Corresponding points, N >= 3 and not collinear.
    weights : (N,) array-like, optional
        Non-negative per-pair weights.

    Returns
    -------
    RigidTransform3D
        Proper rotation (det +1); reflections are corrected by flipping the
        last singular vector.
    """
    src, dst = _as_pairs(src, dst)
    if len(src) < 3:
        raise RegistrationError(f"need at least 3 pairs, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise RegistrationError("degenerate (collinear) point configuration")
    v = vt.T
    r = v @ u.T
    if np.linalg.det(r) < 0:
        v[:, -1] *= -1
        r = v @ u.T
    return RigidTransform3D(r, cd - r @ cs)


def horn_absolute_orientation(src, dst, weights=None) -> RigidTransform3D:
    """Weighted least-squares rigid transform via Horn's unit quaternion method."""
    src, dst = _as_pairs(src, dst)
    if len(src) < 3:
        raise RegistrationError(f"need at least 3 pairs, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    m = (src - cs).T @ ((dst - cd) * w[:, None])
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-12 * sv[0]:
        raise RegistrationError("degenerate (collinear) point configuration")
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    evals, evecs = np.linalg.eigh(n)
    r = quaternion_to_matrix(evecs[:, np.argmax(evals)])
    return RigidTransform3D(r, cd - r @ cs)


def residuals(t: RigidTransform3D, src, dst) -> np.ndarray:
    src, dst = _as_pairs(src, dst)
    return np.linalg.norm(t.apply(src) - dst, axis=1)


def estimate_rigid_ransac(src, dst, inlier_tol=3.0, n_iter=1000, seed=0):
    """Robust rigid fit between index-aligned landmark lists.

    Minimal 3-point samples are scored by inlier count (residual below
    `inlier_tol`); the best consensus set is refit with Arun's method and
    re-scored until the inlier set stops changing.

    Returns
    -------
    (RigidTransform3D, ndarray of inlier indices)
    """
    src, dst = _as_pairs(src, dst)
    n = len(src)
    if n < 3:
        raise RegistrationError(f"need at least 3 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    # every minimal sample at once: batched Arun fits, first best count wins
    samples = np.argsort(rng.random((n_iter, n)), axis=1)[:, :3]
    a, b = src[samples], dst[samples]
    ca, cb = a.mean(axis=1), b.mean(axis=1)
    h = np.einsum("kni,knj->kij", a - ca[:, None], b - cb[:, None])
    u, sv, vt = np.linalg.svd(h)
    ok = (sv[:, 0] > 0) & (sv[:, 1] > 1e-12 * sv[:, 0])
    v = np.swapaxes(vt, 1, 2)
    flip = np.linalg.det(v @ np.swapaxes(u, 1, 2)) < 0
    v[flip, :, -1] *= -1
    rot = v @ np.swapaxes(u, 1, 2)
    trans = cb - np.einsum("kij,kj->ki", rot, ca)
    counts = np.zeros(n_iter, dtype=int)
    for s in range(0, n_iter, 256):
        pred = np.einsum("kij,nj->kni", rot[s:s + 256], src) + trans[s:s + 256, None]
        counts[s:s + 256] = np.sum(np.linalg.norm(pred - dst, axis=2) < inlier_tol, axis=1)
    counts[~ok] = -1
    k = int(np.argmax(counts))
    best_count = int(counts[k])
    best = RigidTransform3D(rot[k], trans[k]) if best_count >= 3 else None
    if best is None:
        raise RegistrationError("no consensus set of size >= 3")

    inliers = np.flatnonzero(residuals(best, src, dst) < inlier_tol)
    t = best
    for _ in range(10):
        t = arun_absolute_orientation(src[inliers], dst[inliers])
        new = np.flatnonzero(residuals(t, src, dst) < inlier_tol)
        if len(new) < 3 or np.array_equal(new, inliers):
            break
        if len(new) < len(inliers):
            # refit lost support; keep the larger consensus
            t = arun_absolute_orientation(src[inliers], dst[inliers])
            break
        inliers = new
    return t, inliers


# ---------------------------------------------------------------------------
# Resampling

def resample(volume: Volume, t: RigidTransform3D, out_dims=None) -> Volume:
    """Nearest-neighbour resampling of `volume` through `t`.

    `t` maps input coordinates to output coordinates; output voxel ``x``
    takes the input voxel nearest to ``t^-1(x)`` or 0 outside the input.
    """
    out_dims = tuple(volume.dims if out_dims is None else (int(d) for d in out_dims))
    inv = invert(t)
    src = volume.data
    out = np.zeros(out_dims)
    xs, ys = np.meshgrid(np.arange(out_dims[0]), np.arange(out_dims[1]), indexing="ij")
    plane = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1).astype(float)
    shape = np.array(src.shape)
    for z in range(out_dims[2]):
        plane[:, 2] = z
        idx = np.rint(inv.apply(plane)).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        vals = np.zeros(len(plane))
        vals[ok] = src[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
        out[:, :, z] = vals.reshape(out_dims[0], out_dims[1])
    return Volume(out, volume.voxel_size)


# ---------------------------------------------------------------------------
# Mattes mutual information

@dataclass
class MIConfig:
    n_samples: int = 100_000
    n_bins: int = 32
    seed: int = 0
    initial_step: float = 2.0   # voxels of translation / boundary motion
    final_step: float = 0.05
    max_iterations: int = 200
    max_translation: float = 10.0
    max_rotation_deg: float = 10.0

    def __post_init__(self):
        if self.n_bins < 8:
            raise ValueError("n_bins must be >= 8")
        if self.n_samples < self.n_bins ** 2:
            raise ValueError("n_samples must be >= n_bins**2")


def _cubic_bspline(u: np.ndarray) -> np.ndarray:
    a = np.abs(u)
    out = np.zeros_like(a)
    m1 = a < 1
    m2 = (a >= 1) & (a < 2)
    out[m1] = (4 - 6 * a[m1] ** 2 + 3 * a[m1] ** 3) / 6
    out[m2] = (2 - a[m2]) ** 3 / 6
    return out


class MattesMI:
    """Negative mutual information with a frozen voxel sample.

    Sample positions are drawn once from the reference domain; the joint
    histogram uses a zero-order window on the reference intensity and a
    cubic B-spline Parzen window on the test intensity.  Test intensities
    are trilinearly interpolated at the transformed sample positions.
    """

    pad = 2

    def __init__(self, ref: Volume, test: Volume, cfg: MIConfig = MIConfig()):
        if ref.data.size == 0 or test.data.size == 0:
            raise ValueError("volumes must be nonempty")
        self.cfg = cfg
        self.test = np.ascontiguousarray(test.data)
        self.test_shape = np.array(self.test.shape, dtype=float)
        rng = np.random.default_rng(cfg.seed)
        n_vox = ref.data.size
        if cfg.n_samples >= n_vox:
            flat = np.arange(n_vox)
        else:
            flat = np.sort(rng.choice(n_vox, size=cfg.n_samples, replace=False))
        self.points = np.stack(np.unravel_index(flat, ref.data.shape), axis=1).astype(float)
        rvals = ref.data.reshape(-1)[flat]

        nb = cfg.n_bins
        rmin, rmax = float(ref.data.min()), float(ref.data.max())
        rwidth = (rmax - rmin) / nb if rmax > rmin else 1.0
        self.ref_bins = np.clip(((rvals - rmin) / rwidth).astype(int), 0, nb - 1)

        tmin, tmax = float(self.test.min()), float(self.test.max())
        self.tmin = tmin
        self.twidth = (tmax - tmin) / (nb - 2 * self.pad - 1) if tmax > tmin else 1.0

    def __call__(self, t: RigidTransform3D) -> float:
        nb = self.cfg.n_bins
        pts = t.apply(self.points)
        inside = np.all((pts >= 0) & (pts <= self.test_shape - 1), axis=1)
        n_in = int(inside.sum())
        if n_in < nb * nb:
            raise OverlapError(f"only {n_in} samples overlap (need {nb * nb})")
        pts = pts[inside]
        tv = ndimage.map_coordinates(self.test, pts.T, order=1, mode="nearest", prefilter=False)
        rb = self.ref_bins[inside]

        tau = (tv - self.tmin) / self.twidth + self.pad
        base = np.floor(tau).astype(int) - 1
        joint = np.zeros(nb * nb)
        for j in range(4):
            b = base + j
            wts = _cubic_bspline(tau - b)
            ok = (b >= 0) & (b < nb)
            joint += np.bincount(rb[ok] * nb + b[ok], weights=wts[ok], minlength=nb * nb)
        joint = joint.reshape(nb, nb)
        joint /= joint.sum()
        pr = joint.sum(axis=1)
        pt = joint.sum(axis=0)
        nz = joint > 0
        outer = np.outer(pr, pt)
        mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
        return -max(mi, 0.0)


def mattes_mi(ref: Volume, test: Volume, t: RigidTransform3D, cfg: MIConfig = MIConfig()) -> float:
    """Negative Mattes mutual information between `ref` and `test` warped by `t`.

    `t` maps reference coordinates into the test frame.  The result lies in
    (-inf, 0]; lower means better alignment.
    """
    return MattesMI(ref, test, cfg)(t)


def _params_to_transform(u, center, radius) -> RigidTransform3D:
    # rotation parameters are in voxels of motion at `radius` from the center
    v = np.asarray(u[:3]) / (2.0 * radius)
    return rotation_about_center(versor_to_matrix(v), center, u[3:])


def fine_register(ref: Volume, test: Volume, cfg: MIConfig = MIConfig()) -> RigidTransform3D:
    """Refine the alignment of a substack pair by minimizing negative MI.

    Derivative-free regular-step descent over a versor rotation about the
    substack center and a translation, starting at the identity.  Each
    iteration probes +/- step along all six parameters and moves to the
    best improving probe; the step halves when no probe improves.

    Returns
    -------
    RigidTransform3D
        Maps reference coordinates into the test frame.
    """
    metric = MattesMI(ref, test, cfg)
    dims = np.array(ref.dims, dtype=float)
    center = (dims - 1) / 2.0
    radius = max(float(np.linalg.norm(dims) / 2.0), 1.0)
    max_v = np.sin(np.radians(cfg.max_rotation_deg) / 2.0)

    u = np.zeros(6)
    best = metric(_params_to_transform(u, center, radius))
    step = cfg.initial_step
    it = 0
    while step >= cfg.final_step and it < cfg.max_iterations:
        it += 1
        cand_val, cand_u = best, None
        for d in range(6):
            for sign in (1.0, -1.0):
                trial = u.copy()
                trial[d] += sign * step
                if np.linalg.norm(trial[3:]) > cfg.max_translation:
                    continue
                if np.linalg.norm(trial[:3]) / (2.0 * radius) > max_v:
                    continue
                try:
                    val = metric(_params_to_transform(trial, center, radius))
                except OverlapError:
                    continue
                if val < cand_val:
                    cand_val, cand_u = val, trial
        if cand_u is None:
            step /= 2.0
        else:
            u, best = cand_u, cand_val
    log.debug("fine_register: %d iterations, -MI=%.5f, params=%s", it, best, u)
    return _params_to_transform(u, center, radius)


def is_black(substack: Volume, threshold: float = BLACK_THRESHOLD) -> bool:
    """True when the high-foreground threshold theta_2 is below `threshold` (0-255)."""
    from .detect import max_entropy_thresholds

    return max_entropy_thresholds(substack).theta2 < threshold
