"""Occlusion-heavy phantom benchmark: train the networks, tune (r, b) on a
validation phantom, compare pipelines on test phantoms and run the
stability sweep with and without semantic deconvolution.

Every test phantom is scored as a single substack; for the sweep its
volume is split into ``regions ** 3`` equal boxes that play the role of
substacks (true positives and misses are attributed to the box holding the
true soma, false positives to the box holding the prediction).
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import detect as det
from .eval import Score, SweepResult, score_detection, sweep_from_scores
from .merge import fuse_substack_lists, icp_merge
from .phantom import PhantomSpec, generate_phantom, visibility_matrix
from .pipeline import (PipelineConfig, deconvolve_pairs, prepare_pairs, prepare_phantom,
                       t180_provider, train_networks, required_kinds)
from .volume import MarkerList

log = logging.getLogger(__name__)

SD_MODES = ("msd", "svim", "ifi")
RAW_OF = {"svim": "raw-svim", "ifi": "raw-ifi"}


def default_phantom() -> dict:
    return {"dims": [64, 64, 64], "n_somata": 200, "attenuation_length": 12.0,
            "noise_sigma": 0.05, "clutter_density": 30.0}


@dataclass
class SuiteConfig:
    phantom: dict = field(default_factory=default_phantom)
    train_seeds: tuple = (100, 101, 102, 103)
    validation_seed: int = 50
    test_seeds: tuple = (1, 2)
    r_values: tuple = (0.5, 0.7, 1.0, 1.3, 1.6)
    b_values: tuple = (2.0, 2.5, 3.0)
    regions: int = 2
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


@dataclass
class SuiteResult:
    chosen: dict            # mode -> (r, b) picked on the validation phantom
    validation: dict        # mode -> Score at the chosen parameters
    test: dict              # mode -> pooled Score on the test phantoms
    sweeps: dict            # mode -> SweepResult over the test regions
    single_view_fraction: float
    curves: dict
    timings: dict
    nets: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "single_view_fraction": self.single_view_fraction,
            "chosen": {m: list(v) for m, v in self.chosen.items()},
            "test": {m: dataclasses.asdict(s) | {"f1": s.f1} for m, s in self.test.items()},
            "sweep": {m: {"glob": r.glob.f1, "loc": r.loc.f1, "gap": r.gap,
                          "glob_rb": [r.r_values[r.glob_index[0]], r.b_values[r.glob_index[1]]]}
                      for m, r in self.sweeps.items()},
            "timings": self.timings,
        }


def make_phantom(cfg: SuiteConfig, seed: int):
    return generate_phantom(PhantomSpec(**{**cfg.phantom, "rng_seed": seed}))


@dataclass
class Deconvolved:
    outputs: dict           # mode -> {pair key: volume or (volume, volume)}
    provider: object        # lazy 180 -> 0 transform
    truth: MarkerList
    dims: tuple


def deconvolve_phantom(phantom, modes, nets, cfg: PipelineConfig) -> Deconvolved:
    prep = prepare_phantom(phantom, cfg)
    pairs = prepare_pairs(prep.registered, cfg.registration)
    provider = t180_provider(prep.registered, cfg.registration)
    outputs = {m: deconvolve_pairs(pairs, m, nets, cfg.sd) for m in modes}
    return Deconvolved(outputs, provider, prep.truth, prep.registered[0].dims)


def detect_mode(d: Deconvolved, mode: str, seed_cfg, ms_cfg, cutoff: float = 3.5) -> MarkerList:
    """Detection and four-list fusion for one mode at one (r, b)."""
    cache = {}

    def run(vol):
        if id(vol) not in cache:
            cache[id(vol)] = det.detect_substack(vol, seed_cfg, ms_cfg)
        return cache[id(vol)]

    lists = {}
    for key, out in d.outputs[mode].items():
        if isinstance(out, tuple):
            lists[key], _ = icp_merge(run(out[0]), run(out[1]), cutoff)
        else:
            lists[key] = run(out)
    return fuse_substack_lists(lists, d.provider, cutoff)


def region_scores(pred: MarkerList, truth: MarkerList, dims, regions: int,
                  cutoff: float = 3.5) -> list:
    """Global matching split over ``regions ** 3`` boxes; sums to the global score."""
    _, ms = score_detection(pred, truth, cutoff)
    size = np.asarray(dims, dtype=float) / regions

    def box(points):
        idx = np.clip((np.asarray(points).reshape(-1, 3) // size).astype(int), 0, regions - 1)
        return (idx[:, 0] * regions + idx[:, 1]) * regions + idx[:, 2]

    n = regions ** 3
    tp, fp, fn = np.zeros(n, int), np.zeros(n, int), np.zeros(n, int)
    if ms.pairs:
        np.add.at(tp, box(truth.points[[p[0] for p in ms.pairs]]), 1)
    if ms.unmatched_a:
        np.add.at(fn, box(truth.points[ms.unmatched_a]), 1)
    if ms.unmatched_b:
        np.add.at(fp, box(pred.points[ms.unmatched_b]), 1)
    return [Score(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]


def _grid_scores(items, mode, cfg: SuiteConfig):
    """Score array [n_r, n_b, n_regions_total] for `mode` over deconvolved items."""
    pc = cfg.pipeline
    n_units = len(items) * cfg.regions ** 3
    scores = np.empty((len(cfg.r_values), len(cfg.b_values), n_units), dtype=object)
    for i, r in enumerate(cfg.r_values):
        for j, b in enumerate(cfg.b_values):
            seed_cfg = det.SeedConfig(r, pc.detect.criterion)
            ms_cfg = dataclasses.replace(pc.detect.ms_cfg(), bandwidth=b)
            units = []
            for d in items:
                pred = detect_mode(d, mode, seed_cfg, ms_cfg, pc.match_cutoff)
                units.extend(region_scores(pred, d.truth, d.dims, cfg.regions, pc.match_cutoff))
            scores[i, j] = units
    return scores


def run_suite(cfg: SuiteConfig = None, modes=SD_MODES, raw: bool = True,
              nets: dict = None) -> SuiteResult:
    """Train, tune and evaluate `modes`; with `raw` also sweep the raw counterparts."""
    cfg = SuiteConfig() if cfg is None else cfg
    pc = cfg.pipeline
    timings = {}
    t0 = time.time()
    curves = {}
    if nets is None:
        prepared = [prepare_phantom(make_phantom(cfg, s), pc) for s in cfg.train_seeds]
        nets, curves = train_networks(prepared, required_kinds(modes), pc)
    timings["train"] = time.time() - t0

    all_modes = list(modes) + ([RAW_OF[m] for m in modes if m in RAW_OF] if raw else [])
    t1 = time.time()
    val = deconvolve_phantom(make_phantom(cfg, cfg.validation_seed), modes, nets, pc)
    test_phantoms = [make_phantom(cfg, s) for s in cfg.test_seeds]
    tests = [deconvolve_phantom(p, all_modes, nets, pc) for p in test_phantoms]
    timings["deconvolve"] = time.time() - t1

    vis = np.vstack([visibility_matrix(p, pc.sd.visibility_threshold) for p in test_phantoms])
    single = float((vis.sum(axis=1) == 1).sum() / max(1, len(vis)))

    t2 = time.time()
    chosen, validation, test, sweeps = {}, {}, {}, {}
    for mode in all_modes:
        sweeps[mode] = sweep_from_scores(cfg.r_values, cfg.b_values,
                                         _grid_scores(tests, mode, cfg))
        if mode in modes:
            vs = _grid_scores([val], mode, cfg)
            vres = sweep_from_scores(cfg.r_values, cfg.b_values, vs)
            i, j = vres.glob_index
            chosen[mode] = (cfg.r_values[i], cfg.b_values[j])
            validation[mode] = vres.glob
            test[mode] = sweeps[mode].pooled(i, j)
            log.info("%s: chosen r=%.2f b=%.2f, test F1 %.3f", mode, *chosen[mode], test[mode].f1)
    timings["detect"] = time.time() - t2
    timings["total"] = time.time() - t0
    return SuiteResult(chosen, validation, test, sweeps, single, curves, timings, nets)


def stability_gaps(result: SuiteResult) -> dict:
    """mode -> (gap with SD, gap without SD) for modes with a raw counterpart."""
    return {m: (result.sweeps[m].gap, result.sweeps[RAW_OF[m]].gap)
            for m in result.sweeps if m in RAW_OF and RAW_OF[m] in result.sweeps}

