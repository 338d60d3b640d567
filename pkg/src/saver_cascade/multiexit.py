"""Ordered chains of exits with one confidence threshold per non-final stage.

A sample visits stages in order, paying each visited stage's cost, and stops
at the first stage whose confidence reaches that stage's threshold. The last
stage always accepts. With two stages this is exactly the saver -> base
cascade of :mod:`saver_cascade.selection`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, DomainError, JoinError
from .ingest import MAX_LISTED_IDS, ModelLog, PairedDataset
from .selection import ACC_TOL, NO_EXIT, check_threshold


@dataclass(frozen=True)
class Stage:
    model_id: str
    cost: float
    confidence: np.ndarray
    correct: np.ndarray


class ExitChain:
    """Stages aligned on one shared sample order."""

    def __init__(self, sample_ids: Sequence[str], stages: Sequence[Stage]):
        if len(stages) < 2:
            raise DomainError("an exit chain needs at least 2 stages")
        self.sample_ids = tuple(sample_ids)
        if not self.sample_ids:
            raise DataError("an exit chain needs at least one sample")
        m = len(self.sample_ids)
        checked = []
        for st in stages:
            if not (math.isfinite(st.cost) and st.cost > 0):
                raise DomainError(f"stage {st.model_id!r}: cost must be > 0")
            conf = np.asarray(st.confidence, dtype=np.float64)
            corr = np.asarray(st.correct, dtype=bool)
            if conf.shape != (m,) or corr.shape != (m,):
                raise DataError(f"stage {st.model_id!r}: expected {m} samples")
            if np.any((conf < 0) | (conf > 1)) or np.any(np.isnan(conf)):
                raise DomainError(f"stage {st.model_id!r}: confidences must lie in [0, 1]")
            conf.flags.writeable = False
            corr.flags.writeable = False
            checked.append(Stage(st.model_id, float(st.cost), conf, corr))
        self.stages = tuple(checked)

    @property
    def M(self) -> int:
        return len(self.sample_ids)

    @property
    def stage_ids(self) -> tuple[str, ...]:
        return tuple(s.model_id for s in self.stages)

    @property
    def costs(self) -> tuple[float, ...]:
        return tuple(s.cost for s in self.stages)

    @classmethod
    def from_logs(cls, logs: Sequence[ModelLog], costs: Sequence[float]) -> "ExitChain":
        """Align logs on the first log's record order; id sets must match exactly."""
        if len(logs) != len(costs):
            raise DataError("need one cost per stage log")
        ids = [r.sample_id for r in logs[0].records]
        id_set = set(ids)
        stages = []
        for lg, cost in zip(logs, costs):
            if lg.split != logs[0].split:
                raise JoinError(f"split mismatch: {lg.model_id!r} is {lg.split!r}, expected {logs[0].split!r}")
            recs = lg.by_id()
            if recs.keys() != id_set:
                missing = sorted(id_set - recs.keys())[:MAX_LISTED_IDS]
                extra = sorted(recs.keys() - id_set)[:MAX_LISTED_IDS]
                raise JoinError(
                    f"stage {lg.model_id!r} sample ids differ from {logs[0].model_id!r}: "
                    f"missing {missing}, unexpected {extra}"
                )
            conf = np.array([recs[i].confidence for i in ids], dtype=np.float64)
            corr = np.array([recs[i].correct for i in ids], dtype=bool)
            stages.append(Stage(lg.model_id, float(cost), conf, corr))
        return cls(ids, stages)

    @classmethod
    def from_paired(cls, ds: PairedDataset, c_s: float, c_b: float) -> "ExitChain":
        """Two-stage chain from a paired dataset; the base stage's confidence is unused."""
        ids = [r.sample_id for r in ds.rows]
        conf = np.array([r.conf_s for r in ds.rows], dtype=np.float64)
        s = Stage(ds.saver_id, c_s, conf, np.array([r.correct_s for r in ds.rows], dtype=bool))
        b = Stage(ds.base_id, c_b, np.ones(ds.M), np.array([r.correct_b for r in ds.rows], dtype=bool))
        return cls(ids, [s, b])


@dataclass(frozen=True)
class ChainConfig:
    thresholds: tuple[float, ...]
    stage_ids: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"thresholds": list(self.thresholds), "stage_ids": list(self.stage_ids)}

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, obj: dict) -> "ChainConfig":
        try:
            ths = tuple(check_threshold(t) for t in obj["thresholds"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"chain config needs a 'thresholds' list ({exc})") from None
        return cls(ths, tuple(obj.get("stage_ids", ())))


@dataclass(frozen=True)
class ChainResult:
    accuracy: float
    expected_cost: float
    exit_fractions: tuple[float, ...]
    reach_fractions: tuple[float, ...]
    exit_counts: tuple[int, ...]
    n_correct: int

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "expected_cost": self.expected_cost,
            "exit_fractions": list(self.exit_fractions),
            "reach_fractions": list(self.reach_fractions),
            "exit_counts": list(self.exit_counts),
        }


def summarize_counts(costs: Sequence[float], exit_counts: Sequence[int], n_correct: int, m: int) -> ChainResult:
    """Turn per-stage exit counts into fractions, expected cost and accuracy.

    The runtime aggregates through this same function, which is what makes
    replayed runs reconcile bit-for-bit with :func:`chain_eval`.
    """
    reach = [1.0]
    cost = costs[0]
    exited = 0
    for k in range(1, len(costs)):
        exited += exit_counts[k - 1]
        r = 1.0 - exited / m
        reach.append(r)
        cost += r * costs[k]
    return ChainResult(
        n_correct / m,
        cost,
        tuple(c / m for c in exit_counts),
        tuple(reach),
        tuple(int(c) for c in exit_counts),
        int(n_correct),
    )


def _check_config(chain: ExitChain, cfg: ChainConfig) -> tuple[float, ...]:
    if len(cfg.thresholds) != len(chain.stages) - 1:
        raise DomainError(
            f"config has {len(cfg.thresholds)} thresholds, chain needs {len(chain.stages) - 1}"
        )
    if cfg.stage_ids and tuple(cfg.stage_ids) != chain.stage_ids[: len(cfg.stage_ids)]:
        raise DomainError(f"config stage ids {list(cfg.stage_ids)} do not match chain {list(chain.stage_ids)}")
    return tuple(check_threshold(t) for t in cfg.thresholds)


def chain_eval(chain: ExitChain, cfg: ChainConfig) -> ChainResult:
    ths = _check_config(chain, cfg)
    remaining = np.ones(chain.M, dtype=bool)
    counts, n_correct = [], 0
    for k, st in enumerate(chain.stages):
        if k < len(ths):
            out = remaining & (st.confidence >= ths[k])
        else:
            out = remaining
        counts.append(int(out.sum()))
        n_correct += int((out & st.correct).sum())
        remaining = remaining & ~out
    return summarize_counts(chain.costs, counts, n_correct, chain.M)


# --------------------------------------------------------------------------
# threshold search


@dataclass(frozen=True)
class SearchResult:
    config: ChainConfig
    result: ChainResult
    feasible: bool
    objective: str
    target: float
    passes: int

    def to_json(self) -> dict:
        return {
            "objective": self.objective,
            "target": self.target,
            "feasible": self.feasible,
            "passes": self.passes,
            "config": self.config.to_json(),
            **self.result.to_json(),
        }


def stage_candidates(conf: np.ndarray, resolution: int | None) -> list[float]:
    """Sentinel plus the stage's distinct confidences (descending), subsampled evenly."""
    cands = [NO_EXIT] + sorted(set(conf.tolist()), reverse=True)
    if resolution is None or len(cands) <= resolution:
        return cands
    idx = sorted(set(np.round(np.linspace(0, len(cands) - 1, resolution)).astype(int).tolist()))
    return [cands[i] for i in idx]


class _Objective:
    def __init__(self, accuracy_floor, cost_ceiling):
        if (accuracy_floor is None) == (cost_ceiling is None):
            raise DomainError("give exactly one of accuracy_floor or cost_ceiling")
        self.floor = accuracy_floor
        self.ceiling = cost_ceiling
        if self.floor is not None and not (0.0 <= self.floor <= 1.0):
            raise DomainError(f"accuracy floor must lie in [0, 1], got {self.floor!r}")
        if self.ceiling is not None and not (math.isfinite(self.ceiling) and self.ceiling >= 0):
            raise DomainError(f"cost ceiling must be finite and >= 0, got {self.ceiling!r}")
        self.name = "accuracy_floor" if self.floor is not None else "cost_ceiling"
        self.target = float(self.floor if self.floor is not None else self.ceiling)

    def feasible(self, res: ChainResult) -> bool:
        if self.floor is not None:
            return res.accuracy >= self.floor - ACC_TOL
        return res.expected_cost <= self.ceiling

    def key(self, res: ChainResult) -> tuple:
        """Smaller is better. Infeasible points are ranked by how close they get."""
        ok = self.feasible(res)
        if self.floor is not None:
            return (0, res.expected_cost, -res.accuracy) if ok else (1, -res.accuracy, res.expected_cost)
        return (0, -res.accuracy, res.expected_cost) if ok else (1, res.expected_cost, -res.accuracy)


def _scan_stage(chain: ExitChain, ths: list[float], k: int, cands: list[float]) -> list[ChainResult]:
    """Evaluate every candidate for threshold ``k`` with the others held fixed.

    Samples reaching stage ``k`` are sorted by their stage-``k`` confidence;
    prefix sums over that order give each candidate's counts without
    re-walking the chain.
    """
    n_stages = len(chain.stages)
    remaining = np.ones(chain.M, dtype=bool)
    pre_counts, pre_correct = [], 0
    for j in range(k):
        out = remaining & (chain.stages[j].confidence >= ths[j])
        pre_counts.append(int(out.sum()))
        pre_correct += int((out & chain.stages[j].correct).sum())
        remaining &= ~out
    reach_idx = np.flatnonzero(remaining)

    # where each reaching sample ends up if it does not exit at k
    down_stage = np.full(reach_idx.size, n_stages - 1)
    down_correct = np.zeros(reach_idx.size, dtype=bool)
    undecided = np.ones(reach_idx.size, dtype=bool)
    for j in range(k + 1, n_stages):
        st = chain.stages[j]
        hit = undecided if j == n_stages - 1 else undecided & (st.confidence[reach_idx] >= ths[j])
        down_stage[hit] = j
        down_correct[hit] = st.correct[reach_idx][hit]
        undecided &= ~hit

    st = chain.stages[k]
    conf_k = st.confidence[reach_idx]
    order = np.argsort(-conf_k, kind="stable")
    conf_sorted = conf_k[order]
    corr_k = np.concatenate([[0], np.cumsum(st.correct[reach_idx][order])])
    corr_down = np.concatenate([[0], np.cumsum(down_correct[order])])
    n_down = n_stages - k - 1
    down_hits = np.zeros((reach_idx.size + 1, n_down), dtype=np.int64)
    for col, j in enumerate(range(k + 1, n_stages)):
        down_hits[1:, col] = np.cumsum(down_stage[order] == j)

    asc = conf_sorted[::-1]
    n_reach = reach_idx.size
    out = []
    for t in cands:
        n = n_reach - int(np.searchsorted(asc, t, side="left"))
        counts = pre_counts + [n] + (down_hits[-1] - down_hits[n]).tolist()
        correct = pre_correct + int(corr_k[n]) + int(corr_down[-1] - corr_down[n])
        out.append(summarize_counts(chain.costs, counts, correct, chain.M))
    return out


def chain_search(
    chain: ExitChain,
    accuracy_floor: float | None = None,
    cost_ceiling: float | None = None,
    resolution: int | None = None,
    max_passes: int = 100,
) -> SearchResult:
    """Coordinate descent over per-stage thresholds.

    Minimizes expected cost subject to ``accuracy_floor``, or maximizes
    accuracy subject to ``cost_ceiling``. Each pass scans every candidate
    for one stage at a time; a pass without strict improvement ends the
    search. Starts from "nothing exits early". ``resolution=None`` keeps
    every observed confidence as a candidate.
    """
    if resolution is not None and resolution < 2:
        raise DomainError(f"grid resolution must be >= 2, got {resolution}")
    obj = _Objective(accuracy_floor, cost_ceiling)
    n_th = len(chain.stages) - 1
    cands = [stage_candidates(chain.stages[k].confidence, resolution) for k in range(n_th)]
    ths = [NO_EXIT] * n_th
    current = chain_eval(chain, ChainConfig(tuple(ths), chain.stage_ids))
    passes = 0
    while passes < max_passes:
        passes += 1
        improved = False
        for k in range(n_th):
            results = _scan_stage(chain, ths, k, cands[k])
            i_best = min(range(len(cands[k])), key=lambda i: (obj.key(results[i]), -cands[k][i]))
            if obj.key(results[i_best]) < obj.key(current):
                ths[k] = cands[k][i_best]
                current = results[i_best]
                improved = True
        if not improved:
            break
    cfg = ChainConfig(tuple(ths), chain.stage_ids)
    final = chain_eval(chain, cfg)
    return SearchResult(cfg, final, obj.feasible(final), obj.name, obj.target, passes)
