"""Detection scoring, voxel-level F1, Monte-Carlo confidence intervals and
the (r, b) stability sweep."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .detect import MeanShiftConfig, SeedConfig, intensity_levels, max_entropy_thresholds
from .merge import MatchSet, match_bipartite
from .volume import MarkerList, Volume

log = logging.getLogger(__name__)

MATCH_CUTOFF = 3.5


@dataclass(frozen=True)
class Score:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp > 0 else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn > 0 else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def __add__(self, other: "Score") -> "Score":
        return Score(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def score_detection(predicted, truth, cutoff: float = MATCH_CUTOFF):
    """Match predictions to truth (weights 1/d) and count TP/FP/FN.

    Matches at distance >= `cutoff` are discarded.

    Returns
    -------
    (Score, MatchSet)
        The MatchSet indexes truth as side ``a`` and predictions as ``b``.
    """
    ms = match_bipartite(truth, predicted, cutoff)
    n_pred = len(np.asarray(getattr(predicted, "points", predicted)).reshape(-1, 3))
    n_true = len(np.asarray(getattr(truth, "points", truth)).reshape(-1, 3))
    tp = len(ms.pairs)
    return Score(tp, n_pred - tp, n_true - tp), ms


def voxel_f1(deconvolved: Volume, target: Volume, theta1: Optional[float] = None) -> float:
    """F1 between the deconvolved image binarized at `theta1` and the target support.

    `theta1` is in 0-255 units and defaults to the image's own
    maximum-entropy threshold.
    """
    if deconvolved.dims != target.dims:
        raise ValueError("dims mismatch")
    if theta1 is None:
        theta1 = max_entropy_thresholds(deconvolved).theta1
    pred = intensity_levels(deconvolved) >= theta1
    return binary_f1(pred, target.data > 0)


def binary_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_confidence_interval(score: Score, n_mc: int = 10000, seed: int = 0,
                           level: float = 0.95, prior: float = 1.0) -> tuple[float, float]:
    """Monte-Carlo interval for F1 under independent Beta posteriors.

    Precision ~ Beta(TP + prior, FP + prior) and recall ~
    Beta(TP + prior, FN + prior).
    """
    if score.tp + score.fp + score.fn == 0:
        raise ValueError("all counts are zero")
    rng = np.random.default_rng(seed)
    p = rng.beta(score.tp + prior, score.fp + prior, size=n_mc)
    r = rng.beta(score.tp + prior, score.fn + prior, size=n_mc)
    f = 2 * p * r / (p + r)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(f, [alpha, 1 - alpha])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Parameter sweep

@dataclass
class SweepResult:
    r_values: list
    b_values: list
    scores: np.ndarray          # object array [n_r, n_b, n_substacks] of Score
    glob_index: tuple
    loc_choice: list            # per substack (i_r, i_b)

    def pooled(self, i: int, j: int) -> Score:
        return sum(self.scores[i, j], Score(0, 0, 0))

    @property
    def glob(self) -> Score:
        return self.pooled(*self.glob_index)

    @property
    def loc(self) -> Score:
        return sum((self.scores[i, j, s] for s, (i, j) in enumerate(self.loc_choice)),
                   Score(0, 0, 0))

    @property
    def gap(self) -> float:
        return self.loc.f1 - self.glob.f1


def _local_choice(scores, glob_index):
    """Per-substack parameters by coordinate ascent on the pooled F1.

    Starts from the global optimum and lets each substack in turn switch to
    the grid point that maximizes the pooled F1 given the others, until no
    switch helps.  The pooled result can therefore never fall below the
    global optimum.
    """
    n_r, n_b, n_s = scores.shape
    choice = [glob_index] * n_s

    def pooled_f1(ch):
        return sum((scores[i, j, s] for s, (i, j) in enumerate(ch)), Score(0, 0, 0)).f1

    current = pooled_f1(choice)
    for _ in range(20):
        changed = False
        for s in range(n_s):
            best, best_c = current, choice[s]
            for i, j in itertools.product(range(n_r), range(n_b)):
                trial = list(choice)
                trial[s] = (i, j)
                val = pooled_f1(trial)
                if val > best + 1e-12:
                    best, best_c = val, (i, j)
            if best_c != choice[s]:
                choice[s] = best_c
                current = best
                changed = True
        if not changed:
            break
    return choice


def sweep(detect_fn: Callable, r_values: Sequence[float], b_values: Sequence[float],
          substacks: Sequence, cutoff: float = MATCH_CUTOFF) -> SweepResult:
    """Score ``detect_fn(item, SeedConfig, MeanShiftConfig)`` over an (r, b) grid.

    `substacks` is a sequence of ``(item, truth MarkerList)``.  The global
    optimum maximizes the pooled F1 over all substacks; local choices are
    per-substack parameters (see `_local_choice`).
    """
    r_values, b_values = list(r_values), list(b_values)
    if not r_values or not b_values or not substacks:
        raise ValueError("empty sweep grid")
    scores = np.empty((len(r_values), len(b_values), len(substacks)), dtype=object)
    for i, r in enumerate(r_values):
        for j, b in enumerate(b_values):
            seed_cfg, ms_cfg = SeedConfig(radius=r), MeanShiftConfig(bandwidth=b)
            for s, (item, truth) in enumerate(substacks):
                pred = detect_fn(item, seed_cfg, ms_cfg)
                scores[i, j, s], _ = score_detection(pred, truth, cutoff)
    return sweep_from_scores(r_values, b_values, scores)


def sweep_from_scores(r_values, b_values, scores: np.ndarray) -> SweepResult:
    """Global and local optima of a precomputed [n_r, n_b, n_substacks] Score array."""
    pooled = np.array([[sum(scores[i, j], Score(0, 0, 0)).f1 for j in range(len(b_values))]
                       for i in range(len(r_values))])
    glob_index = tuple(int(v) for v in np.unravel_index(np.argmax(pooled), pooled.shape))
    return SweepResult(list(r_values), list(b_values), scores, glob_index,
                       _local_choice(scores, glob_index))


SWEEP_COLUMNS = ["pipeline", "r", "b", "tp", "fp", "fn", "precision", "recall", "f1",
                 "ci_lo", "ci_hi"]


def sweep_rows(result: SweepResult, pipeline: str, n_mc: int = 10000, seed: int = 0):
    rows = []
    for i, r in enumerate(result.r_values):
        for j, b in enumerate(result.b_values):
            s = result.pooled(i, j)
            lo, hi = f1_confidence_interval(s, n_mc, seed) if s.tp + s.fp + s.fn else (1.0, 1.0)
            rows.append([pipeline, r, b, s.tp, s.fp, s.fn, round(s.precision, 6),
                         round(s.recall, 6), round(s.f1, 6), round(lo, 6), round(hi, 6)])
    return rows


def write_sweep_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)


def stability_report(results: dict, n_mc: int = 10000, seed: int = 0) -> str:
    """Plain-text table of F1^glob and F1^loc (percent, 95% CI) per setting.

    `results` maps ``(pipeline, setting)`` (setting e.g. "raw" or "sd") to a
    SweepResult.
    """
    pipelines = sorted({p for p, _ in results}, key=lambda p: ["svim", "ifi", "msd"].index(p)
                       if p in ("svim", "ifi", "msd") else 99)
    settings = sorted({s for _, s in results}, key=lambda s: (s != "raw", s))

    def cell(score):
        lo, hi = f1_confidence_interval(score, n_mc, seed)
        return f"{100 * score.f1:.1f} [{100 * lo:.1f},{100 * hi:.1f}]"

    header = f"{'':6s}" + "".join(f"{s + ' glob':>22s}{s + ' loc':>22s}" for s in settings)
    lines = [header]
    for p in pipelines:
        row = f"{p.upper():6s}"
        for s in settings:
            res = results.get((p, s))
            if res is None:
                row += f"{'-':>22s}{'-':>22s}"
            else:
                row += f"{cell(res.glob):>22s}{cell(res.loc):>22s}"
        lines.append(row)
    return "\n".join(lines) + "\n"
