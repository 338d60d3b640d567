"""Threshold analysis of a saver -> base cascade over a paired dataset.

Everything here is a step function of the threshold ``t``, so evaluating at
the distinct observed saver confidences (plus one "no exit" sentinel above
them) covers every distinct operating point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from . import metrics
from .errors import DataError, DomainError, EmptySubsetError
from .ingest import ModelLog, ModelProfile, PairedDataset, join_logs

log = logging.getLogger(__name__)

# Any threshold above 1 admits no sample, since confidences are capped at 1.
NO_EXIT = 1.1
# Absolute slack when comparing accuracies against a target.
ACC_TOL = 1e-12
DEFAULT_DELTA_C_WARN = -0.05


def check_threshold(t: float) -> float:
    t = float(t)
    if not math.isfinite(t) or t < 0.0:
        raise DomainError(f"threshold must be finite and >= 0, got {t!r}")
    return t


def _check_costs(c_s: float, c_b: float) -> tuple[float, float]:
    c_s, c_b = float(c_s), float(c_b)
    for name, v in (("c_s", c_s), ("c_b", c_b)):
        if not math.isfinite(v) or v <= 0.0:
            raise DomainError(f"{name} must be finite and > 0, got {v!r}")
    return c_s, c_b


class CascadeResult(NamedTuple):
    exit_ratio: float
    accuracy: float
    expected_cost: float


class SweepPoint(NamedTuple):
    threshold: float
    exit_ratio: float
    accuracy: float
    expected_cost: float


def exit_ratio(ds: PairedDataset, t: float) -> float:
    return ds.n_exit(check_threshold(t)) / ds.M


def subset_performance(ds: PairedDataset, t: float) -> tuple[float, float, int]:
    """Saver and base accuracy restricted to the samples exiting at ``t``."""
    n = ds.n_exit(check_threshold(t))
    if n == 0:
        raise EmptySubsetError(f"no sample has saver confidence >= {t!r}")
    cs, cb = ds.correct_counts(n)
    return cs / n, cb / n, n


def _evaluate(ds: PairedDataset, n_exit: int, c_s: float, c_b: float) -> CascadeResult:
    cs, cb = ds.correct_counts(n_exit)
    r = n_exit / ds.M
    accuracy = (cs + ds.base_correct - cb) / ds.M
    # c_s + (1 - r) * c_b is the expected cost rearranged; this exact form is
    # what multiexit and runtime reproduce, so keep them in step
    return CascadeResult(r, accuracy, c_s + (1.0 - r) * c_b)


def cascade_eval(ds: PairedDataset, t: float, c_s: float, c_b: float) -> CascadeResult:
    """Exit ratio, system accuracy and expected cost at threshold ``t``."""
    c_s, c_b = _check_costs(c_s, c_b)
    return _evaluate(ds, ds.n_exit(check_threshold(t)), c_s, c_b)


# --------------------------------------------------------------------------
# r_match


@dataclass(frozen=True)
class MatchResult:
    threshold_star: float
    r_match: float
    correct_s_exited: int
    correct_b_exited: int
    n_exited: int
    M: int
    saver_id: str = "saver"
    base_id: str = "base"
    split: str = "unspecified"
    c_s: float | None = None
    c_b: float | None = None
    delta_c: float | None = None

    def to_json(self) -> dict:
        return {
            "saver_id": self.saver_id,
            "base_id": self.base_id,
            "split": self.split,
            "M": self.M,
            "threshold_star": self.threshold_star,
            "r_match": self.r_match,
            "n_exited": self.n_exited,
            "correct_s_exited": self.correct_s_exited,
            "correct_b_exited": self.correct_b_exited,
            "c_s": self.c_s,
            "c_b": self.c_b,
            "delta_c": self.delta_c,
        }


def find_r_match(ds: PairedDataset, c_s: float | None = None, c_b: float | None = None) -> MatchResult:
    """Largest exit ratio at which the saver is right at least as often as the base.

    The constraint is not monotone in ``t``, so every candidate threshold is
    checked and the global maximizer kept. The sentinel (nothing exits)
    always satisfies it, so a result always exists.
    """
    best_t, best_n = NO_EXIT, 0
    for t in ds.distinct_confidences():
        n = ds.n_exit(t)
        cs, cb = ds.correct_counts(n)
        if cs >= cb and n > best_n:
            best_t, best_n = t, n
    cs, cb = ds.correct_counts(best_n)
    r = best_n / ds.M
    dc = None
    if c_s is not None and c_b is not None:
        c_s, c_b = _check_costs(c_s, c_b)
        dc = metrics.delta_c(c_s, c_b, r)
    return MatchResult(best_t, r, cs, cb, best_n, ds.M, ds.saver_id, ds.base_id, ds.split, c_s, c_b, dc)


# --------------------------------------------------------------------------
# saver ranking


@dataclass(frozen=True)
class SaverRank:
    model_id: str
    delta_c_tr: float
    r_match: float
    threshold_star: float
    cost: float
    split: str
    notes: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "delta_c_tr": self.delta_c_tr,
            "r_match": self.r_match,
            "threshold_star": self.threshold_star,
            "cost": self.cost,
            "split": self.split,
            "notes": list(self.notes),
        }


def rank_savers(
    base_log: ModelLog,
    base_profile: ModelProfile,
    candidates: Sequence[tuple[ModelLog, ModelProfile]],
) -> tuple[list[SaverRank], list[tuple[str, str]]]:
    """Rank candidate savers by ``cost_s / cost_b - r_match``, lowest first.

    Returns ``(ranking, failures)``; a candidate that cannot be joined with
    the base log lands in ``failures`` as ``(model_id, reason)`` instead of
    aborting the whole ranking.
    """
    ranking: list[SaverRank] = []
    failures: list[tuple[str, str]] = []
    for cand_log, profile in candidates:
        try:
            ds = join_logs(cand_log, base_log)
        except DataError as exc:
            failures.append((cand_log.model_id, str(exc)))
            continue
        notes = []
        if profile.cost >= base_profile.cost:
            msg = f"candidate cost {profile.cost:g} is not below base cost {base_profile.cost:g}"
            log.warning("%s: %s", cand_log.model_id, msg)
            notes.append(msg)
        m = find_r_match(ds, profile.cost, base_profile.cost)
        ranking.append(
            SaverRank(cand_log.model_id, m.delta_c, m.r_match, m.threshold_star, profile.cost, ds.split, tuple(notes))
        )
    ranking.sort(key=lambda r: (r.delta_c_tr, r.model_id))
    return ranking, failures


# --------------------------------------------------------------------------
# sweeps and budget tables


@dataclass(frozen=True)
class SweepCurve:
    points: tuple[SweepPoint, ...]
    c_s: float
    c_b: float
    base_accuracy: float
    saver_accuracy: float
    saver_id: str = "saver"
    base_id: str = "base"
    split: str = "unspecified"

    def to_json(self) -> dict:
        return {
            "saver_id": self.saver_id,
            "base_id": self.base_id,
            "split": self.split,
            "c_s": self.c_s,
            "c_b": self.c_b,
            "base_accuracy": self.base_accuracy,
            "saver_accuracy": self.saver_accuracy,
            "points": [p._asdict() for p in self.points],
        }


def auto_grid(ds: PairedDataset) -> list[float]:
    """The sentinel followed by every distinct saver confidence, descending."""
    return [NO_EXIT] + ds.distinct_confidences()


def uniform_grid(n: int) -> list[float]:
    """``n`` evenly spaced thresholds from 1 down to 0."""
    if n < 2:
        raise DomainError(f"grid needs at least 2 points, got {n}")
    return [1.0 - i / (n - 1) for i in range(n)]


def threshold_sweep(ds: PairedDataset, c_s: float, c_b: float, grid="auto") -> SweepCurve:
    c_s, c_b = _check_costs(c_s, c_b)
    if isinstance(grid, str):
        if grid != "auto":
            raise DomainError(f"unknown grid {grid!r}")
        thresholds = auto_grid(ds)
    else:
        thresholds = [check_threshold(t) for t in grid]
        if not thresholds:
            raise DomainError("explicit grid is empty")
        if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
            raise DomainError("explicit grid must be strictly descending")
    points = tuple(SweepPoint(t, *_evaluate(ds, ds.n_exit(t), c_s, c_b)) for t in thresholds)
    return SweepCurve(points, c_s, c_b, ds.base_accuracy, ds.saver_accuracy, ds.saver_id, ds.base_id, ds.split)


@dataclass(frozen=True)
class BudgetRow:
    budget: float
    feasible: bool
    threshold: float | None = None
    accuracy: float | None = None
    expected_cost: float | None = None
    exit_ratio: float | None = None

    def to_json(self) -> dict:
        return {
            "budget": self.budget,
            "feasible": self.feasible,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "expected_cost": self.expected_cost,
            "exit_ratio": self.exit_ratio,
        }


@dataclass(frozen=True)
class BudgetTable:
    rows: tuple[BudgetRow, ...]
    max_performance: BudgetRow
    base_accuracy: float
    c_s: float
    c_b: float


def _row(budget: float, p: SweepPoint) -> BudgetRow:
    return BudgetRow(budget, True, p.threshold, p.accuracy, p.expected_cost, p.exit_ratio)


def budget_table(curve: SweepCurve, drop_budgets: Sequence[float]) -> BudgetTable:
    """Cheapest operating point whose accuracy drop vs. the base is within each budget.

    Ties go to the lowest cost, then the highest threshold. The
    ``max_performance`` row is the most accurate point on the curve.
    """
    if not curve.points:
        raise DomainError("curve has no points")
    rows = []
    for d in drop_budgets:
        d = float(d)
        if not math.isfinite(d) or d < 0.0:
            raise DomainError(f"accuracy-drop budget must be >= 0, got {d!r}")
        floor = curve.base_accuracy - d - ACC_TOL
        ok = [p for p in curve.points if p.accuracy >= floor]
        if not ok:
            rows.append(BudgetRow(d, False))
            continue
        rows.append(_row(d, min(ok, key=lambda p: (p.expected_cost, -p.threshold))))
    best = min(curve.points, key=lambda p: (-p.accuracy, p.expected_cost, -p.threshold))
    top = BudgetRow(float("nan"), True, best.threshold, best.accuracy, best.expected_cost, best.exit_ratio)
    return BudgetTable(tuple(rows), top, curve.base_accuracy, curve.c_s, curve.c_b)


# --------------------------------------------------------------------------
# accuracy on the exited subset


class SubsetPoint(NamedTuple):
    threshold: float
    exit_ratio: float
    acc_s_on_exited: float
    acc_b_on_exited: float
    n_exited: int


@dataclass(frozen=True)
class SubsetCurve:
    points: tuple[SubsetPoint, ...]

    def crossing_exit_ratio(self) -> float:
        """Largest exit ratio where the saver is at least as accurate as the base (0 if none)."""
        ok = [p.exit_ratio for p in self.points if p.acc_s_on_exited >= p.acc_b_on_exited]
        return max(ok, default=0.0)


def subset_curve(ds: PairedDataset) -> SubsetCurve:
    points = []
    for t in ds.distinct_confidences():
        n = ds.n_exit(t)
        cs, cb = ds.correct_counts(n)
        points.append(SubsetPoint(t, n / ds.M, cs / n, cb / n, n))
    return SubsetCurve(tuple(points))
