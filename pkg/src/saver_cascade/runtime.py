"""Execute a configured cascade over pluggable inference backends.

Two backend kinds exist. A replay backend answers from a recorded log. An
external-process backend talks to a child process over stdin/stdout, one
JSON object per line::

    request:  {"id": "<sample id>", "payload": "<string>"}
    response: {"id": "<sample id>", "confidence": <number>, "output": "<string>"}
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, NamedTuple, Sequence

from .errors import BackendError, DataError, DomainError
from .ingest import ModelLog
from .multiexit import ChainConfig, ChainResult, summarize_counts
from .selection import check_threshold

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class Response(NamedTuple):
    confidence: float
    output: str | None
    correct: bool | None


class ReplayBackend:
    kind = "replay"

    def __init__(self, model_log: ModelLog, cost: float, model_id: str | None = None):
        if not (math.isfinite(cost) and cost > 0):
            raise DomainError(f"backend cost must be > 0, got {cost!r}")
        self.model_id = model_id or model_log.model_id
        self.cost = float(cost)
        self._records = model_log.by_id()

    def query(self, sample_id: str, payload: str | None = None) -> Response:
        rec = self._records.get(sample_id)
        if rec is None:
            raise BackendError(f"{self.model_id}: no recorded prediction for sample {sample_id!r}")
        return Response(rec.confidence, None, rec.correct)

    def close(self):
        pass


class ExternalProcessBackend:
    """A model served by a child process speaking the line protocol.

    ``labels`` maps sample ids to the expected ``output`` string; when given,
    correctness is ``output == label``, otherwise it is unknown.
    """

    kind = "external-process"

    def __init__(
        self,
        command: str | Sequence[str],
        model_id: str,
        cost: float,
        timeout: float = DEFAULT_TIMEOUT,
        labels: Mapping[str, str] | None = None,
    ):
        if not (math.isfinite(cost) and cost > 0):
            raise DomainError(f"backend cost must be > 0, got {cost!r}")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.model_id = model_id
        self.cost = float(cost)
        self.timeout = timeout
        self.labels = labels
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()

    def _start(self):
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise BackendError(f"{self.model_id}: cannot start {self.command!r}: {exc}") from None
        threading.Thread(target=self._pump, args=(self._proc.stdout,), daemon=True).start()

    def _pump(self, stdout: IO[str]):
        for line in stdout:
            self._lines.put(line)
        self._lines.put(None)

    def query(self, sample_id: str, payload: str | None = None) -> Response:
        if self._proc is None:
            self._start()
        req = {"id": sample_id, "payload": sample_id if payload is None else payload}
        try:
            self._proc.stdin.write(json.dumps(req) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError(f"{self.model_id}: write failed for {sample_id!r}: {exc}") from None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise BackendError(f"{self.model_id}: timed out after {self.timeout}s on {sample_id!r}") from None
        if line is None:
            raise BackendError(f"{self.model_id}: process exited before answering {sample_id!r}")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError:
            raise BackendError(f"{self.model_id}: malformed response {line.strip()!r}") from None
        if not isinstance(resp, dict) or resp.get("id") != sample_id:
            raise BackendError(f"{self.model_id}: response id mismatch for {sample_id!r}: {line.strip()!r}")
        conf = resp.get("confidence")
        if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not (0.0 <= conf <= 1.0):
            raise BackendError(f"{self.model_id}: bad confidence {conf!r} for {sample_id!r}")
        output = resp.get("output")
        correct = None
        if self.labels is not None and sample_id in self.labels:
            correct = output == self.labels[sample_id]
        return Response(float(conf), output, correct)

    def close(self):
        if self._proc is None:
            return
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class RoutingTrace:
    sample_id: str
    visited: tuple[str, ...]
    confidences: tuple[float, ...]
    accepted_by: str | None
    cost: float
    correct: bool | None = None
    output: str | None = None
    error: str | None = None

    def to_json(self) -> dict:
        out = {
            "sample_id": self.sample_id,
            "visited": list(self.visited),
            "confidences": list(self.confidences),
            "accepted_by": self.accepted_by,
            "cost": self.cost,
            "correct": self.correct,
        }
        if self.output is not None:
            out["output"] = self.output
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass(frozen=True)
class Aggregate:
    stage_ids: tuple[str, ...]
    thresholds: tuple[float, ...]
    n_samples: int
    n_skipped: int
    exit_counts: tuple[int, ...]
    exit_fractions: tuple[float, ...]
    mean_cost: float
    accuracy: float | None

    def to_json(self) -> dict:
        return {
            "stage_ids": list(self.stage_ids),
            "thresholds": list(self.thresholds),
            "n_samples": self.n_samples,
            "n_skipped": self.n_skipped,
            "exit_counts": list(self.exit_counts),
            "exit_fractions": list(self.exit_fractions),
            "mean_cost": self.mean_cost,
            "accuracy": self.accuracy,
        }


@dataclass(frozen=True)
class CascadeRun:
    traces: tuple[RoutingTrace, ...]
    aggregate: Aggregate

    def write_traces(self, stream: IO[str]):
        for tr in self.traces:
            stream.write(json.dumps(tr.to_json()) + "\n")


def _route(sample_id, payload, backends, thresholds) -> tuple[RoutingTrace, int]:
    visited, confs = [], []
    cost = 0.0
    last = len(backends) - 1
    for k, be in enumerate(backends):
        resp = be.query(sample_id, payload)
        visited.append(be.model_id)
        confs.append(resp.confidence)
        cost += be.cost
        if k == last or resp.confidence >= thresholds[k]:
            tr = RoutingTrace(sample_id, tuple(visited), tuple(confs), be.model_id, cost, resp.correct, resp.output)
            return tr, k
    raise AssertionError("unreachable")


def run_cascade(
    samples: Iterable[str | tuple[str, str]],
    backends: Sequence,
    config: ChainConfig,
    skip_errors: bool = False,
) -> CascadeRun:
    """Route every sample through ``backends`` in order, stopping at the first confident stage.

    ``samples`` yields sample ids or ``(sample_id, payload)`` pairs. A backend
    failure aborts the run unless ``skip_errors`` is set, in which case the
    sample gets an error trace and is left out of the aggregate.
    """
    if len(backends) < 2:
        raise DomainError("a cascade needs at least 2 backends")
    if len(config.thresholds) != len(backends) - 1:
        raise DomainError(f"config has {len(config.thresholds)} thresholds for {len(backends)} backends")
    thresholds = tuple(check_threshold(t) for t in config.thresholds)
    ids = tuple(be.model_id for be in backends)
    if config.stage_ids and tuple(config.stage_ids) != ids:
        raise DomainError(f"config stage ids {list(config.stage_ids)} do not match backends {list(ids)}")

    traces: list[RoutingTrace] = []
    counts = [0] * len(backends)
    n_correct, n_ok, n_skipped = 0, 0, 0
    known = True
    for item in samples:
        sample_id, payload = (item, None) if isinstance(item, str) else item
        try:
            tr, k = _route(sample_id, payload, backends, thresholds)
        except BackendError as exc:
            if not skip_errors:
                raise
            n_skipped += 1
            log.warning("skipping sample %s: %s", sample_id, exc)
            traces.append(RoutingTrace(sample_id, (), (), None, 0.0, None, None, str(exc)))
            continue
        traces.append(tr)
        n_ok += 1
        counts[k] += 1
        if tr.correct is None:
            known = False
        elif tr.correct:
            n_correct += 1

    if n_ok == 0:
        raise DataError("no sample was processed")
    summary: ChainResult = summarize_counts([be.cost for be in backends], counts, n_correct, n_ok)
    agg = Aggregate(
        ids,
        thresholds,
        n_ok,
        n_skipped,
        summary.exit_counts,
        summary.exit_fractions,
        summary.expected_cost,
        summary.accuracy if known else None,
    )
    return CascadeRun(tuple(traces), agg)
