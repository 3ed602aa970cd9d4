"""End-to-end orchestration: coarse registration, substack split, per-pair
black test and fine registration, semantic deconvolution, detection,
four-list fusion and world assembly.

Per-substack work runs in a fixed-size process pool; every worker limits
BLAS to one thread so results do not depend on the worker count.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import detect as det
from .eval import Score, f1_confidence_interval, score_detection
from .fusion import fuse_views
from .merge import PAIR_KEYS, fuse_substack_lists, icp_merge
from .phantom import ANGLES, Phantom, occlusion_split, visible_truth
from .registration import (MIConfig, RegistrationError, RigidTransform3D, compose,
                           estimate_rigid_ransac, fine_register, invert, is_black, resample)
from .semdeconv import (TargetSpec, TrainConfig, init_net, load_net, make_target,
                        predict_volume, train)
from .volume import (MarkerList, Volume, extract_substack, load_markers_csv, load_volume,
                     save_markers_csv, save_markers_ply, split_substacks)

log = logging.getLogger(__name__)

PAIRS = {"0-90": (0, 90), "0-270": (0, 270), "180-90": (180, 90), "180-270": (180, 270)}
MODES = ("svim", "ifi", "msd", "raw-svim", "raw-ifi")
NET_KIND = {"svim": "single", "ifi": "fused", "msd": "msd"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration

@dataclass
class GridSection:
    substack_dims: tuple = (91, 90, 90)
    overlap: int = 16


@dataclass
class RegistrationSection:
    ransac_tolerance: float = 3.0
    ransac_iterations: int = 1000
    fine: bool = True
    # largest accepted fine correction, as displacement of any substack corner
    max_correction: float = 2.0
    mi: MIConfig = field(default_factory=MIConfig)


@dataclass
class SDSection:
    mode: str = "msd"
    architecture: str = "columnar"
    half_width: int = 2
    stride: int = 1
    target_sigma: float = 3.0
    visibility_threshold: float = 0.1
    fusion_window: int = 9
    nets: dict = field(default_factory=dict)      # kind -> path
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class DetectSection:
    radius: float = 1.9
    criterion: str = "soft"
    bandwidth: float = 2.5
    epsilon: float = 1e-3
    max_iterations: int = 100
    collapse_distance: float = 1.0

    def seed_cfg(self) -> det.SeedConfig:
        return det.SeedConfig(self.radius, self.criterion)

    def ms_cfg(self) -> det.MeanShiftConfig:
        return det.MeanShiftConfig(self.bandwidth, self.epsilon, self.max_iterations,
                                   self.collapse_distance)


@dataclass
class PipelineConfig:
    input_dir: str = ""
    output_dir: str = "out"
    train_dirs: list = field(default_factory=list)
    grid: GridSection = field(default_factory=GridSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    sd: SDSection = field(default_factory=SDSection)
    detect: DetectSection = field(default_factory=DetectSection)
    workers: int = 1
    seed: int = 0
    evaluate: bool = True
    match_cutoff: float = 3.5

    def validate(self, require_input=True) -> None:
        if self.sd.mode not in MODES:
            raise ConfigError(f"unknown mode {self.sd.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if require_input and not os.path.isdir(self.input_dir):
            raise ConfigError(f"input directory {self.input_dir!r} does not exist")
        for kind, path in self.sd.nets.items():
            if path and not os.path.isfile(path):
                raise ConfigError(f"{kind} network {path!r} does not exist")


def _build(cls, data):
    if not dataclasses.is_dataclass(cls) or not isinstance(data, dict):
        return data
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r} in section {cls.__name__}")
        default = hints[key].default_factory() if hints[key].default_factory is not \
            dataclasses.MISSING else hints[key].default
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return _build(PipelineConfig, data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# Registration

def coarse_register(landmarks: dict, section: RegistrationSection = RegistrationSection(),
                    seed: int = 0) -> dict:
    """Estimate ``T(angle, 0)`` for every view from index-aligned landmarks.

    90 and 270 are registered to 0 directly; 180 goes through 90 and the
    two transforms are composed.
    """
    def fit(src, dst):
        t, inl = estimate_rigid_ransac(landmarks[src].points, landmarks[dst].points,
                                       section.ransac_tolerance, section.ransac_iterations, seed)
        log.info("coarse %d->%d: %d/%d inliers", src, dst, len(inl), len(landmarks[src]))
        return t

    t90 = fit(90, 0)
    t270 = fit(270, 0)
    t180_90 = fit(180, 90)
    return {0: RigidTransform3D.identity(), 90: t90, 270: t270, 180: compose(t180_90, t90)}


def nominal_transforms(dims) -> dict:
    """Pure stage rotations about the volume centre, used without landmarks."""
    from .phantom import view_to_world

    return {a: view_to_world(dims, a) for a in ANGLES}


def register_views(views: dict, transforms: dict) -> dict:
    dims = views[0].dims
    return {a: (views[a].copy() if a == 0 else resample(views[a], transforms[a], dims))
            for a in ANGLES}


# ---------------------------------------------------------------------------
# Per-substack processing

@dataclass
class PairData:
    key: str
    ref: Volume
    tgt: Volume                # aligned to ref
    black: bool                # both views black
    transform: RigidTransform3D


def correction_size(t: RigidTransform3D, dims) -> float:
    """Largest displacement of a substack corner under `t`."""
    corners = np.array(np.meshgrid(*[[0, d - 1] for d in dims], indexing="ij")).reshape(3, -1).T
    return float(np.linalg.norm(t.apply(corners) - corners, axis=1).max())


def refine(ref: Volume, test: Volume, section: RegistrationSection) -> RigidTransform3D:
    """Fine registration guarded by a trust region around the coarse alignment.

    Corrections moving the substack by more than `section.max_correction`
    voxels are treated as spurious MI optima and replaced by the identity.
    """
    t = fine_register(ref, test, section.mi)
    size = correction_size(t, ref.dims)
    if size > section.max_correction:
        log.info("fine correction of %.2f voxels rejected", size)
        return RigidTransform3D.identity()
    return t


def prepare_pairs(subs: dict, section: RegistrationSection) -> dict:
    out = {}
    black = {a: is_black(subs[a]) for a in ANGLES}
    for key, (ra, ta) in PAIRS.items():
        ref, tgt = subs[ra], subs[ta]
        t = RigidTransform3D.identity()
        if section.fine and not black[ra] and not black[ta]:
            try:
                t = refine(ref, tgt, section)
                if correction_size(t, ref.dims) > 0:
                    tgt = resample(tgt, invert(t))
            except RegistrationError as exc:
                log.warning("fine registration %s failed: %s", key, exc)
        out[key] = PairData(key, ref, tgt, black[ra] and black[ta], t)
    return out


def t180_provider(subs: dict, section: RegistrationSection):
    """Lazy fine registration mapping 180-reference coordinates to 0-reference ones.

    Falls back to the coarse alignment (identity) when either view is
    black; a registration error propagates so the caller can flag it.
    """
    cache = {}

    def provide():
        if "t" not in cache:
            if not section.fine or is_black(subs[0]) or is_black(subs[180]):
                cache["t"] = RigidTransform3D.identity()
            else:
                cache["t"] = invert(refine(subs[0], subs[180], section))
        return cache["t"]

    return provide


def deconvolve_pairs(pairs: dict, mode: str, nets: dict, sd: SDSection) -> dict:
    """SD outputs per pair: a tuple (ref, tgt) for SVIM, one volume otherwise."""
    out = {}
    ref_cache = {}
    for key, p in pairs.items():
        if p.black:
            continue
        if mode == "msd":
            out[key] = predict_volume(nets["msd"], p.ref, p.tgt, stride=sd.stride)
        elif mode == "ifi":
            out[key] = predict_volume(nets["fused"], fuse_views(p.ref, p.tgt, sd.fusion_window),
                                      stride=sd.stride)
        elif mode == "svim":
            ra = PAIRS[key][0]
            if ra not in ref_cache:
                ref_cache[ra] = predict_volume(nets["single"], p.ref, stride=sd.stride)
            out[key] = (ref_cache[ra], predict_volume(nets["single"], p.tgt, stride=sd.stride))
        elif mode == "raw-svim":
            out[key] = (p.ref, p.tgt)
        elif mode == "raw-ifi":
            out[key] = fuse_views(p.ref, p.tgt, sd.fusion_window)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return out


def detect_pairs(deconvolved: dict, seed_cfg, ms_cfg, max_corr_dist=3.5) -> dict:
    lists = {}
    for key, d in deconvolved.items():
        if isinstance(d, tuple):
            la = det.detect_substack(d[0], seed_cfg, ms_cfg)
            lb = det.detect_substack(d[1], seed_cfg, ms_cfg)
            lists[key], _ = icp_merge(la, lb, max_corr_dist)
        else:
            lists[key] = det.detect_substack(d, seed_cfg, ms_cfg)
    return lists


@dataclass
class SubstackTask:
    index: int
    subs: dict
    modes: tuple
    nets: dict
    cfg: PipelineConfig


def process_substack(task: SubstackTask) -> dict:
    """Run every requested mode on one substack; never raises."""
    result = {"index": task.index, "lists": {}, "error": None, "flags": {}}
    try:
        with threadpool_limits(limits=1):
            cfg = task.cfg
            pairs = prepare_pairs(task.subs, cfg.registration)
            provider = t180_provider(task.subs, cfg.registration)
            for mode in task.modes:
                dec = deconvolve_pairs(pairs, mode, task.nets, cfg.sd)
                lists = detect_pairs(dec, cfg.detect.seed_cfg(), cfg.detect.ms_cfg(),
                                     cfg.match_cutoff)
                report = {}
                result["lists"][mode] = fuse_substack_lists(lists, provider, cfg.match_cutoff,
                                                            report)
                result["flags"][mode] = report
    except Exception as exc:  # logged and counted by the coordinator
        log.exception("substack %d failed", task.index)
        result["error"] = f"{type(exc).__name__}: {exc}"
    return result


def run_substacks(tasks: list, workers: int) -> list:
    """Execute tasks and return results ordered by substack index."""
    if workers <= 1 or len(tasks) <= 1:
        results = [process_substack(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(process_substack, tasks))
    return sorted(results, key=lambda r: r["index"])


# ---------------------------------------------------------------------------
# Training sets

def training_examples(registered: dict, visible: dict, kind: str, sd: SDSection,
                      reg: RegistrationSection) -> list:
    """(view_a, view_b, target) triples from one registered phantom.

    `visible` maps angle -> world-frame MarkerList of somata visible there.
    """
    dims = registered[0].dims
    spec = TargetSpec(sd.target_sigma)
    out = []
    if kind == "single":
        for a in ANGLES:
            out.append((registered[a], None, make_target(visible[a], dims, spec)))
        return out
    pairs = prepare_pairs(registered, reg)
    for key, p in pairs.items():
        if p.black:
            continue
        ra, ta = PAIRS[key]
        both = MarkerList.concatenate([visible[ra], visible[ta]])
        target = make_target(both, dims, spec)
        if kind == "msd":
            out.append((p.ref, p.tgt, target))
        elif kind == "fused":
            out.append((fuse_views(p.ref, p.tgt, sd.fusion_window), None, target))
        else:
            raise ValueError(f"unknown network kind {kind!r}")
    return out


def train_network(kind: str, examples: list, sd: SDSection, seed: int = 0):
    arity = 2 if kind == "msd" else 1
    arch = sd.architecture if arity == 2 else "flat"
    # output bias starts near the mean target occupancy
    occ = np.mean([np.mean(t.data > 0) for _, _, t in examples])
    occ = float(np.clip(occ, 1e-3, 0.5))
    net = init_net(arch, sd.half_width, arity, seed=seed, output_bias=np.log(occ / (1 - occ)))
    cfg = dataclasses.replace(sd.train, seed=sd.train.seed + seed)
    if arity == 1:
        cfg = dataclasses.replace(cfg, p_mask=0.0)
    return train(net, examples, cfg)


# ---------------------------------------------------------------------------
# Phantom-level drivers

@dataclass
class PreparedPhantom:
    registered: dict
    transforms: dict
    visible: dict
    truth: MarkerList        # world-frame somata visible in at least one view


def prepare_phantom(phantom: Phantom, cfg: PipelineConfig, landmark_seed: int = 0,
                    n_landmarks: int = 15) -> PreparedPhantom:
    from .phantom import landmarks as make_landmarks

    lms = make_landmarks(phantom, n_landmarks, seed=landmark_seed)
    transforms = coarse_register(lms, cfg.registration, cfg.seed)
    registered = register_views(phantom.views, transforms)
    thr = cfg.sd.visibility_threshold
    return PreparedPhantom(registered, transforms, occlusion_split(phantom, thr),
                           visible_truth(phantom, thr))


def train_networks(prepared: list, kinds, cfg: PipelineConfig) -> dict:
    nets, curves = {}, {}
    for n, kind in enumerate(kinds):
        examples = []
        for p in prepared:
            examples.extend(training_examples(p.registered, p.visible, kind, cfg.sd,
                                              cfg.registration))
        with threadpool_limits(limits=1):
            nets[kind], curves[kind] = train_network(kind, examples, cfg.sd, seed=cfg.seed + n)
        log.info("trained %s network: loss %.4f -> %.4f", kind, curves[kind][0], curves[kind][-1])
    return nets, curves


def split_registered(registered: dict, cfg: PipelineConfig):
    grid = split_substacks(registered[0].dims, cfg.grid.substack_dims, cfg.grid.overlap)
    subs = [{a: extract_substack(registered[a], grid, i) for a in ANGLES} for i in range(len(grid))]
    return grid, subs


def detect_world(registered: dict, modes, nets: dict, cfg: PipelineConfig):
    """Run `modes` over all substacks; returns ({mode: world MarkerList}, n_failed)."""
    from .merge import assemble_world

    grid, subs = split_registered(registered, cfg)
    tasks = [SubstackTask(i, s, tuple(modes), nets, cfg) for i, s in enumerate(subs)]
    results = run_substacks(tasks, cfg.workers)
    failed = [r for r in results if r["error"]]
    out = {}
    for mode in modes:
        per = {r["index"]: r["lists"].get(mode) for r in results if not r["error"]}
        out[mode] = assemble_world(per, grid)
    return out, len(failed)


# ---------------------------------------------------------------------------
# Disk-based driver used by the CLI

def read_phantom_dir(path: str):
    views = {}
    for a in ANGLES:
        d = os.path.join(path, f"view_{a:03d}")
        if not os.path.isdir(d):
            raise FileNotFoundError(f"missing view directory {d}")
        views[a] = load_volume(d)
    lms = {}
    for a in ANGLES:
        f = os.path.join(path, f"landmarks_{a:03d}.csv")
        if os.path.isfile(f):
            lms[a] = load_markers_csv(f, frame=f"view{a}")
    return views, lms


def read_visible(path: str, transforms: dict) -> dict:
    """Per-view annotations ``truth_view_XXX.csv`` mapped into the reference frame.

    `transforms` are the estimated ``T(angle, 0)``, as they would be for
    real data where only per-view annotations exist.
    """
    out = {}
    for a in ANGLES:
        f = os.path.join(path, f"truth_view_{a:03d}.csv")
        if not os.path.isfile(f):
            raise FileNotFoundError(f"missing per-view annotations {f}")
        out[a] = transforms[a].apply_markers(load_markers_csv(f))
        out[a].frame = "world"
    return out


def register_dir(path: str, cfg: PipelineConfig):
    """Load a phantom-layout directory and bring all views into the 0 degree frame."""
    views, lms = read_phantom_dir(path)
    if len(lms) == len(ANGLES):
        transforms = coarse_register(lms, cfg.registration, cfg.seed)
    else:
        log.warning("%s: landmarks missing; using nominal stage rotations", path)
        transforms = nominal_transforms(views[0].dims)
    return register_views(views, transforms), transforms


def train_from_dirs(dirs, kinds, cfg: PipelineConfig):
    """Train the networks for `kinds` on phantom-layout directories."""
    prepared = []
    for d in dirs:
        registered, transforms = register_dir(d, cfg)
        visible = read_visible(d, transforms)
        truth = MarkerList.concatenate(list(visible.values()), frame="world")
        prepared.append(PreparedPhantom(registered, transforms, visible, truth))
    return train_networks(prepared, kinds, cfg)


def load_nets(cfg: PipelineConfig) -> dict:
    return {kind: load_net(path) for kind, path in cfg.sd.nets.items() if path}


def required_kinds(modes) -> list:
    return sorted({NET_KIND[m] for m in modes if m in NET_KIND})


def run_pipeline(cfg: PipelineConfig, nets: Optional[dict] = None) -> dict:
    """Full disk-to-disk run on a phantom-layout input directory.

    Writes ``world.csv``, ``world.ply``, ``transforms.json`` and, when
    truth is available and `cfg.evaluate` is set, ``eval.json``.
    """
    mode = cfg.sd.mode
    if nets is None:
        nets = load_nets(cfg)
    missing = [k for k in required_kinds([mode]) if k not in nets]
    if missing:
        raise ConfigError(f"mode {mode} needs networks: {missing}")
    registered, transforms = register_dir(cfg.input_dir, cfg)
    world, n_failed = detect_world(registered, [mode], nets, cfg)
    markers = world[mode]

    os.makedirs(cfg.output_dir, exist_ok=True)
    save_markers_csv(markers, os.path.join(cfg.output_dir, "world.csv"))
    save_markers_ply(markers, os.path.join(cfg.output_dir, "world.ply"))
    with open(os.path.join(cfg.output_dir, "transforms.json"), "w") as f:
        json.dump({str(a): t.to_dict(str(a), "0") for a, t in transforms.items()}, f,
                  indent=2, sort_keys=True)
        f.write("\n")
    summary = {"mode": mode, "detections": len(markers), "failed_substacks": n_failed}

    truth_path = os.path.join(cfg.input_dir, "truth_visible.csv")
    if cfg.evaluate and os.path.isfile(truth_path):
        truth = load_markers_csv(truth_path, frame="world")
        score, _ = score_detection(markers, truth, cfg.match_cutoff)
        summary.update(tp=score.tp, fp=score.fp, fn=score.fn, precision=score.precision,
                       recall=score.recall, f1=score.f1)
        if score.tp + score.fp + score.fn:
            summary["f1_ci"] = list(f1_confidence_interval(score, seed=cfg.seed))
        with open(os.path.join(cfg.output_dir, "eval.json"), "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    return summary
