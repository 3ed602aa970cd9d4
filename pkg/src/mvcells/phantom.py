"""Synthetic four-view light-sheet phantoms with known soma positions.

World coordinates are those of the 0 degree view.  Every view is rendered
in its own (microscope) frame: the detection axis is z, so somata appear as
Gaussian ellipsoids elongated along z, and the light sheet enters at the
x = 0 face, so intensity decays with x.  View ``a`` relates to the world
through ``T(a, 0)``: a 90 degree step about the y axis plus a small random
perturbation.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .registration import (RigidTransform3D, compose, invert, rotation_about_axis,
                           rotation_about_center)
from .volume import MarkerList, Volume, save_markers_csv, save_volume

ANGLES = (0, 90, 180, 270)
ROTATION_AXIS = (0.0, 1.0, 0.0)


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    n_somata: int = 200
    soma_radius_voxels: float = 1.5
    min_separation: float = 6.0
    psf_anisotropy: float = 3.5
    attenuation_length: float = 40.0
    background_level: float = 0.04
    noise_sigma: float = 0.02
    saturation_band_width: float = 0.0
    clutter_density: float = 15.0        # tubes per 10^6 voxels
    soma_peak: float = 0.9
    brightness_range: tuple = (0.5, 1.0)
    margin: float = 4.0
    max_perturb_translation: float = 2.0
    max_perturb_rotation_deg: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.brightness_range = tuple(self.brightness_range)
        for name in ("soma_radius_voxels", "min_separation", "psf_anisotropy",
                     "attenuation_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.dims) <= 2 * self.margin:
            raise ValueError("dims too small for the placement margin")
        if self.n_somata < 0 or self.noise_sigma < 0 or self.background_level < 0:
            raise ValueError("counts and levels must be non-negative")

    @property
    def sigma_lateral(self) -> float:
        return self.soma_radius_voxels / 1.5

    @property
    def sigma_axial(self) -> float:
        return self.sigma_lateral * self.psf_anisotropy

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass
class Phantom:
    spec: PhantomSpec
    truth: MarkerList                      # world frame
    views: dict                            # angle -> Volume (own frame)
    true_transforms: dict                  # angle -> T(angle, 0)
    peaks: dict = field(default_factory=dict)  # angle -> rendered peak per soma


def view_to_world(dims, angle, perturbation=None) -> RigidTransform3D:
    center = (np.asarray(dims, dtype=float) - 1) / 2.0
    base = rotation_about_center(rotation_about_axis(ROTATION_AXIS, angle), center)
    if perturbation is None:
        return base
    return compose(base, perturbation)


def _random_perturbation(rng, center, max_t, max_rot) -> RigidTransform3D:
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_rot, max_rot)
    d = rng.normal(size=3)
    t = d / np.linalg.norm(d) * rng.uniform(0, max_t)
    return rotation_about_center(rotation_about_axis(axis, angle), center, t)


def _place_somata(spec: PhantomSpec, rng) -> np.ndarray:
    lo = spec.margin
    hi = np.array(spec.dims, dtype=float) - 1 - spec.margin
    pts = []
    attempts = 0
    limit = 2000 * max(spec.n_somata, 1)
    while len(pts) < spec.n_somata:
        attempts += 1
        if attempts > limit:
            raise PhantomError(
                f"placed only {len(pts)} of {spec.n_somata} somata at separation "
                f"{spec.min_separation}")
        p = rng.uniform(lo, hi)
        if pts:
            d = np.linalg.norm(np.asarray(pts) - p, axis=1)
            if d.min() < spec.min_separation:
                continue
        pts.append(p)
    return np.asarray(pts).reshape(-1, 3)


def _random_walk(rng, dims, n_steps, step=0.5):
    p = rng.uniform(0, np.asarray(dims, dtype=float) - 1)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    out = [p]
    for _ in range(n_steps):
        d = d + rng.normal(scale=0.15, size=3)
        d /= np.linalg.norm(d)
        p = p + step * d
        out.append(p)
    return np.asarray(out)


def _gaussian_block(vol_shape, center, sigma, amp):
    """Axis-aligned Gaussian on its bounding box, truncated at 3 sigma."""
    lo = np.maximum(np.floor(center - 3 * sigma).astype(int), 0)
    hi = np.minimum(np.ceil(center + 3 * sigma).astype(int) + 1, vol_shape)
    if np.any(hi <= lo):
        return None, None
    axes = [np.arange(lo[k], hi[k]) for k in range(3)]
    r2 = (((axes[0] - center[0]) / sigma[0])[:, None, None] ** 2
          + ((axes[1] - center[1]) / sigma[1])[None, :, None] ** 2
          + ((axes[2] - center[2]) / sigma[2])[None, None, :] ** 2)
    block = np.where(r2 <= 9.0, amp * np.exp(-0.5 * r2), 0.0)
    return (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2])), block


def _splat(vol, center, sigma, amp):
    sl, block = _gaussian_block(vol.shape, center, sigma, amp)
    if sl is not None:
        vol[sl] += block


def _splat_max(vol, center, sigma, amp):
    sl, block = _gaussian_block(vol.shape, center, sigma, amp)
    if sl is not None:
        np.maximum(vol[sl], block, out=vol[sl])


def _attenuation(spec: PhantomSpec, depth):
    if math.isinf(spec.attenuation_length):
        return np.ones_like(np.asarray(depth, dtype=float))
    return np.exp(-np.clip(depth, 0, None) / spec.attenuation_length)


def _saturate(spec, values, depth):
    if spec.saturation_band_width <= 0:
        return values
    band = np.asarray(depth) < spec.saturation_band_width
    return np.where(band, np.minimum(values * 1.5, 1.0), values)


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Render a deterministic four-view phantom from `spec`.

    Returns world-frame truth, the four views in their own frames and the
    true ``T(angle, 0)`` transforms.  Intensities are quantized to 8 bits.
    """
    rng = np.random.default_rng(spec.rng_seed)
    dims = spec.dims
    center = (np.asarray(dims, dtype=float) - 1) / 2.0
    truth_pts = _place_somata(spec, rng)
    lo_b, hi_b = spec.brightness_range
    brightness = spec.soma_peak * rng.uniform(lo_b, hi_b, size=len(truth_pts))

    n_tubes = int(rng.poisson(spec.clutter_density * np.prod(dims) / 1e6))
    tubes = [_random_walk(rng, dims, int(rng.integers(60, 160))) for _ in range(n_tubes)]

    transforms = {}
    for angle in ANGLES:
        if angle == 0:
            transforms[angle] = RigidTransform3D.identity()
        else:
            pert = _random_perturbation(rng, center, spec.max_perturb_translation,
                                        spec.max_perturb_rotation_deg)
            transforms[angle] = view_to_world(dims, angle, pert)
    noise_seeds = rng.integers(0, 2**31, size=len(ANGLES))

    sig_soma = np.array([spec.sigma_lateral, spec.sigma_lateral, spec.sigma_axial])
    tube_lat = 0.8
    sig_tube = np.array([tube_lat, tube_lat, tube_lat * spec.psf_anisotropy])
    tube_amp = 0.3 * spec.soma_peak

    views, peaks = {}, {}
    xs = np.arange(dims[0], dtype=float)
    for k, angle in enumerate(ANGLES):
        to_view = invert(transforms[angle])
        somata = to_view.apply(truth_pts) if len(truth_pts) else truth_pts
        signal = np.zeros(dims)
        amps = brightness * _attenuation(spec, somata[:, 0]) if len(somata) else np.zeros(0)
        for c, a in zip(somata, amps):
            _splat(signal, c, sig_soma, a)
        clutter = np.zeros(dims)
        for tube in tubes:
            tv = to_view.apply(tube)
            for c in tv:
                _splat_max(clutter, c, sig_tube, 1.0)
        atten_x = _attenuation(spec, xs)[:, None, None]
        vol = signal + tube_amp * clutter * atten_x + spec.background_level
        if spec.noise_sigma > 0:
            vol = vol + np.random.default_rng(noise_seeds[k]).normal(0, spec.noise_sigma, dims)
        vol = _saturate(spec, vol, xs[:, None, None])
        vol = np.clip(vol, 0.0, 1.0)
        views[angle] = Volume(np.rint(vol * 255.0) / 255.0)
        peaks[angle] = _saturate(spec, amps, somata[:, 0] if len(somata) else amps)

    truth = MarkerList(truth_pts, labels=[f"s{i}" for i in range(len(truth_pts))], frame="world")
    return Phantom(spec, truth, views, transforms, peaks)


def occlusion_split(phantom: Phantom, visibility_threshold: float) -> dict:
    """World-frame truth visible in each view.

    A soma is visible in a view iff its rendered peak (brightness after
    attenuation and saturation, background and noise excluded) exceeds
    `visibility_threshold`.  Returns angle -> MarkerList whose labels keep
    the truth names.
    """
    out = {}
    for angle in ANGLES:
        idx = np.flatnonzero(phantom.peaks[angle] > visibility_threshold)
        out[angle] = phantom.truth.subset(idx)
    return out


def visibility_matrix(phantom: Phantom, visibility_threshold: float) -> np.ndarray:
    """Boolean (n_somata, 4) array, columns ordered as ANGLES."""
    if len(phantom.truth) == 0:
        return np.zeros((0, len(ANGLES)), dtype=bool)
    return np.stack([phantom.peaks[a] > visibility_threshold for a in ANGLES], axis=1)


def landmarks(phantom: Phantom, n: int = 15, noise_sigma: float = 0.5, seed: int = 0) -> dict:
    """Index-aligned annotated landmarks per view, in each view's own frame."""
    rng = np.random.default_rng(seed)
    m = len(phantom.truth)
    if m < 3:
        raise PhantomError("need at least 3 somata for landmarks")
    pick = np.sort(rng.choice(m, size=min(n, m), replace=False))
    out = {}
    for angle in ANGLES:
        pts = invert(phantom.true_transforms[angle]).apply(phantom.truth.points[pick])
        pts = pts + rng.normal(0, noise_sigma, pts.shape)
        out[angle] = MarkerList(pts, labels=[f"lm{i}" for i in range(len(pick))],
                                frame=f"view{angle}")
    return out


def save_phantom(phantom: Phantom, outdir: str, visibility_threshold: float = 0.1,
                 n_landmarks: int = 15, landmark_seed: int = 0) -> None:
    """Write views, truth CSVs, landmarks and transforms under `outdir`."""
    os.makedirs(outdir, exist_ok=True)
    for angle, vol in phantom.views.items():
        save_volume(vol, os.path.join(outdir, f"view_{angle:03d}"))
    save_markers_csv(phantom.truth, os.path.join(outdir, "truth.csv"))
    visible = occlusion_split(phantom, visibility_threshold)
    for angle, ml in visible.items():
        local = invert(phantom.true_transforms[angle]).apply_markers(ml)
        save_markers_csv(local, os.path.join(outdir, f"truth_view_{angle:03d}.csv"))
    save_markers_csv(MarkerList.concatenate(list(visible.values())).subset(
        _unique_label_index(visible)), os.path.join(outdir, "truth_visible.csv"))
    if len(phantom.truth) >= 3:
        for angle, ml in landmarks(phantom, n_landmarks, seed=landmark_seed).items():
            save_markers_csv(ml, os.path.join(outdir, f"landmarks_{angle:03d}.csv"))
    tr = {str(a): t.to_dict(str(a), "0") for a, t in phantom.true_transforms.items()}
    with open(os.path.join(outdir, "transforms.json"), "w") as f:
        json.dump(tr, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(outdir, "phantom.json"), "w") as f:
        json.dump(asdict(phantom.spec), f, indent=2, sort_keys=True)
        f.write("\n")


def _unique_label_index(visible: dict) -> list:
    seen, idx, pos = set(), [], 0
    for ml in visible.values():
        for lab in ml.labels or []:
            if lab not in seen:
                seen.add(lab)
                idx.append(pos)
            pos += 1
    return idx


def visible_truth(phantom: Phantom, visibility_threshold: float, angles=ANGLES) -> MarkerList:
    """World-frame somata visible in at least one of `angles`."""
    vis = visibility_matrix(phantom, visibility_threshold)
    cols = [ANGLES.index(a) for a in angles]
    if len(vis) == 0:
        return MarkerList(frame="world")
    return phantom.truth.subset(np.flatnonzero(vis[:, cols].any(axis=1)))
