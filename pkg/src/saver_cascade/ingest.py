"""Prediction logs, model profiles and saver/base pairing.

A prediction log is line-delimited JSON, one record per line::

    {"model_id": "effformer_l", "split": "train"}          # optional header
    {"sample_id": "n01440764_18", "confidence": 0.93, "correct": true}
    {"sample_id": "000000139", "box_scores": [0.91, 0.40, 0.02], "correct": false}

Detection records carry raw box scores; they are reduced to one confidence
per sample with :func:`detection_confidence` at parse time.
"""

from __future__ import annotations

import io
import json
import math
import os
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

from .errors import (
    DataError,
    DomainError,
    DuplicateIdError,
    EmptyLogError,
    JoinError,
    ParseError,
)

DEFAULT_SCORE_FLOOR = 0.05
DEFAULT_SPLIT = "unspecified"
MAX_LISTED_IDS = 10

_RECORD_KEYS = {"sample_id", "confidence", "box_scores", "correct", "quality"}
_HEADER_KEYS = {"model_id", "split"}


def detection_confidence(box_scores: Iterable[float], score_floor: float = DEFAULT_SCORE_FLOOR) -> float:
    """Mean score of the boxes scoring at least ``score_floor``.

    Returns 0.0 when no box survives, so such a sample always escalates.
    """
    scores = [float(s) for s in box_scores]
    for s in scores:
        if not (0.0 <= s <= 1.0):
            raise DomainError(f"box score must lie in [0, 1], got {s!r}")
    if not (0.0 <= score_floor <= 1.0):
        raise DomainError(f"score_floor must lie in [0, 1], got {score_floor!r}")
    kept = [s for s in scores if s >= score_floor]
    if not kept:
        return 0.0
    # fsum is correctly rounded, which makes the mean independent of box order
    return math.fsum(kept) / len(kept)


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    confidence: float
    correct: bool
    box_scores: tuple[float, ...] | None = None
    quality: float | None = None

    def to_json(self) -> dict:
        out: dict = {"sample_id": self.sample_id}
        if self.box_scores is not None:
            out["box_scores"] = list(self.box_scores)
        else:
            out["confidence"] = self.confidence
        out["correct"] = self.correct
        if self.quality is not None:
            out["quality"] = self.quality
        return out


@dataclass(frozen=True)
class ModelLog:
    model_id: str
    split: str
    records: tuple[PredictionRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise EmptyLogError(f"log for {self.model_id!r} has no records")
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise DuplicateIdError(f"duplicate sample_id {rec.sample_id!r}", source=self.model_id)
            seen.add(rec.sample_id)

    @property
    def M(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, PredictionRecord]:
        return {r.sample_id: r for r in self.records}

    @property
    def accuracy(self) -> float:
        return sum(r.correct for r in self.records) / self.M


@dataclass(frozen=True)
class ModelProfile:
    model_id: str
    cost: float
    accuracy: float | None = None

    def __post_init__(self):
        if not (isinstance(self.cost, (int, float)) and math.isfinite(self.cost) and self.cost > 0):
            raise DomainError(f"profile {self.model_id!r}: cost must be > 0, got {self.cost!r}")
        if self.accuracy is not None and not (0.0 <= self.accuracy <= 1.0):
            raise DomainError(f"profile {self.model_id!r}: accuracy must lie in [0, 1]")

    def to_json(self) -> dict:
        out = {"model_id": self.model_id, "cost_gflops": self.cost}
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out


# --------------------------------------------------------------------------
# parsing


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _parse_record(obj, line_no: int, source: str | None, score_floor: float) -> PredictionRecord:
    def fail(reason):
        return ParseError(reason, line_no, source)

    if not isinstance(obj, dict):
        raise fail("record must be a JSON object")
    extra = set(obj) - _RECORD_KEYS
    if extra:
        raise fail(f"unknown field(s) {sorted(extra)}")
    sid = obj.get("sample_id")
    if not isinstance(sid, str) or not sid:
        raise fail("sample_id must be a non-empty string")
    correct = obj.get("correct")
    if not isinstance(correct, bool):
        raise fail("correct must be a boolean")
    quality = obj.get("quality")
    if quality is not None and not _is_number(quality):
        raise fail("quality must be a number")

    has_conf = "confidence" in obj
    has_boxes = "box_scores" in obj
    if has_conf == has_boxes:
        raise fail("record needs exactly one of confidence or box_scores")
    if has_conf:
        conf = obj["confidence"]
        if not _is_number(conf):
            raise fail("confidence must be a finite number")
        if not (0.0 <= conf <= 1.0):
            raise fail(f"confidence {conf!r} outside [0, 1]")
        return PredictionRecord(sid, float(conf), correct, None, quality)

    boxes = obj["box_scores"]
    if not isinstance(boxes, list) or not all(_is_number(b) for b in boxes):
        raise fail("box_scores must be a list of numbers")
    try:
        conf = detection_confidence(boxes, score_floor)
    except DomainError as exc:
        raise fail(str(exc)) from None
    return PredictionRecord(sid, conf, correct, tuple(float(b) for b in boxes), quality)


def _open_text(source) -> tuple[IO[str], str | None, str]:
    """Return ``(text stream, display name, cleanup action)``."""
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        return open(path, encoding="utf-8"), str(path), "close"
    name = getattr(source, "name", None)
    name = name if isinstance(name, str) else None
    if isinstance(source, (io.BufferedIOBase, io.RawIOBase)) or "b" in getattr(source, "mode", ""):
        return io.TextIOWrapper(source, encoding="utf-8"), name, "detach"
    return source, name, "none"


def iter_log(source, score_floor: float = DEFAULT_SCORE_FLOOR) -> Iterator[tuple[int, dict | PredictionRecord]]:
    """Yield ``(line_no, item)`` for the header dict (if any) and each record."""
    stream, name, cleanup = _open_text(source)
    try:
        first = True
        for line_no, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", line_no, name) from None
            if first and isinstance(obj, dict) and "sample_id" not in obj and "model_id" in obj:
                extra = set(obj) - _HEADER_KEYS
                if extra:
                    raise ParseError(f"unknown header field(s) {sorted(extra)}", line_no, name)
                if not isinstance(obj["model_id"], str) or not isinstance(obj.get("split", ""), str):
                    raise ParseError("header model_id and split must be strings", line_no, name)
                first = False
                yield line_no, obj
                continue
            first = False
            yield line_no, _parse_record(obj, line_no, name, score_floor)
    finally:
        if cleanup == "close":
            stream.close()
        elif cleanup == "detach":
            stream.detach()


def parse_log(
    source,
    model_id: str | None = None,
    split: str | None = None,
    score_floor: float = DEFAULT_SCORE_FLOOR,
) -> ModelLog:
    """Parse a prediction log from a path or an open (text or binary) stream.

    A header line supplies ``model_id``/``split``; the keyword arguments fill
    in whatever the header leaves out. Without either, the model id falls
    back to the file stem.
    """
    header: dict = {}
    records: list[PredictionRecord] = []
    seen: dict[str, int] = {}
    name = str(source) if isinstance(source, (str, os.PathLike)) else getattr(source, "name", None)
    name = name if isinstance(name, str) else None
    for line_no, item in iter_log(source, score_floor):
        if isinstance(item, dict):
            header = item
            continue
        if item.sample_id in seen:
            raise DuplicateIdError(
                f"duplicate sample_id {item.sample_id!r} (first seen on line {seen[item.sample_id]})",
                line_no,
                name,
            )
        seen[item.sample_id] = line_no
        records.append(item)

    mid = header.get("model_id") or model_id
    if mid is None:
        mid = Path(name).stem if isinstance(name, str) and name else "model"
    sp = header.get("split") or split or DEFAULT_SPLIT
    if not records:
        raise EmptyLogError(f"{name or mid}: log contains no records")
    return ModelLog(mid, sp, tuple(records))


def serialize_log(log: ModelLog, stream: IO[str] | None = None, header: bool = True) -> str | None:
    """Write ``log`` in the line-delimited format; returns text if no stream is given."""
    lines = []
    if header:
        lines.append(json.dumps({"model_id": log.model_id, "split": log.split}))
    lines.extend(json.dumps(r.to_json()) for r in log.records)
    text = "\n".join(lines) + "\n"
    if stream is None:
        return text
    stream.write(text)
    return None


def load_profiles(source) -> list[ModelProfile]:
    """Read one profile object or a list of them from a JSON file."""
    path = Path(source)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", exc.lineno, str(path)) from None
    items = data if isinstance(data, list) else [data]
    out = []
    for item in items:
        if not isinstance(item, dict) or not isinstance(item.get("model_id"), str):
            raise ParseError("profile needs a string model_id", None, str(path))
        cost = item.get("cost_gflops")
        if not _is_number(cost):
            raise ParseError(f"profile {item['model_id']!r}: cost_gflops must be a number", None, str(path))
        acc = item.get("accuracy")
        if acc is not None and not _is_number(acc):
            raise ParseError(f"profile {item['model_id']!r}: accuracy must be a number", None, str(path))
        out.append(ModelProfile(item["model_id"], float(cost), None if acc is None else float(acc)))
    return out


# --------------------------------------------------------------------------
# pairing


class PairRow(NamedTuple):
    sample_id: str
    conf_s: float
    correct_s: bool
    correct_b: bool


@dataclass(frozen=True)
class PairedDataset:
    """Saver and base outcomes joined per sample.

    Rows are kept in canonical order: descending saver confidence, ties by
    ascending sample id. Prefix counts of correct predictions along that
    order make every threshold query O(log M).
    """

    saver_id: str
    base_id: str
    rows: tuple[PairRow, ...]
    split: str = DEFAULT_SPLIT
    _asc_conf: list = field(init=False, repr=False, compare=False)
    _cum_s: list = field(init=False, repr=False, compare=False)
    _cum_b: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.rows:
            raise EmptyLogError("paired dataset has no rows")
        rows = tuple(sorted((PairRow(*r) for r in self.rows), key=lambda r: (-r.conf_s, r.sample_id)))
        ids = {r.sample_id for r in rows}
        if len(ids) != len(rows):
            raise DataError("paired dataset has duplicate sample ids")
        for r in rows:
            if not (0.0 <= r.conf_s <= 1.0):
                raise DomainError(f"confidence of {r.sample_id!r} outside [0, 1]")
        cum_s, cum_b = [0], [0]
        for r in rows:
            cum_s.append(cum_s[-1] + bool(r.correct_s))
            cum_b.append(cum_b[-1] + bool(r.correct_b))
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_asc_conf", [r.conf_s for r in reversed(rows)])
        object.__setattr__(self, "_cum_s", cum_s)
        object.__setattr__(self, "_cum_b", cum_b)

    @classmethod
    def from_arrays(
        cls,
        conf_s: Sequence[float],
        correct_s: Sequence[bool],
        correct_b: Sequence[bool],
        sample_ids: Sequence[str] | None = None,
        saver_id: str = "saver",
        base_id: str = "base",
        split: str = DEFAULT_SPLIT,
    ) -> "PairedDataset":
        n = len(conf_s)
        if len(correct_s) != n or len(correct_b) != n:
            raise DataError("array lengths differ")
        if sample_ids is None:
            width = len(str(max(n - 1, 0)))
            sample_ids = [f"s{i:0{width}d}" for i in range(n)]
        rows = tuple(
            PairRow(str(i), float(c), bool(a), bool(b))
            for i, c, a, b in zip(sample_ids, conf_s, correct_s, correct_b)
        )
        return cls(saver_id, base_id, rows, split)

    @property
    def M(self) -> int:
        return len(self.rows)

    def n_exit(self, t: float) -> int:
        """Number of rows with ``conf_s >= t``."""
        return self.M - bisect_left(self._asc_conf, t)

    def correct_counts(self, n_exit: int) -> tuple[int, int]:
        """Saver and base correct counts over the first ``n_exit`` rows."""
        return self._cum_s[n_exit], self._cum_b[n_exit]

    @property
    def saver_correct(self) -> int:
        return self._cum_s[-1]

    @property
    def base_correct(self) -> int:
        return self._cum_b[-1]

    @property
    def saver_accuracy(self) -> float:
        return self._cum_s[-1] / self.M

    @property
    def base_accuracy(self) -> float:
        return self._cum_b[-1] / self.M

    def distinct_confidences(self) -> list[float]:
        """Distinct saver confidences, descending."""
        out: list[float] = []
        for r in self.rows:
            if not out or r.conf_s != out[-1]:
                out.append(r.conf_s)
        return out


def _sample_list(ids: Iterable[str]) -> list[str]:
    return sorted(ids)[:MAX_LISTED_IDS]


def join_logs(saver: ModelLog, base: ModelLog) -> PairedDataset:
    """Inner-join two logs on ``sample_id``; the id sets must be identical."""
    if saver.split != base.split:
        raise JoinError(
            f"split mismatch: saver {saver.model_id!r} is {saver.split!r}, "
            f"base {base.model_id!r} is {base.split!r}"
        )
    s_map = saver.by_id()
    b_map = base.by_id()
    only_s = s_map.keys() - b_map.keys()
    only_b = b_map.keys() - s_map.keys()
    if only_s or only_b:
        miss_base = _sample_list(only_s)
        miss_saver = _sample_list(only_b)
        raise JoinError(
            f"sample-id sets differ between {saver.model_id!r} and {base.model_id!r}: "
            f"{len(only_s)} id(s) missing from base (e.g. {miss_base}), "
            f"{len(only_b)} id(s) missing from saver (e.g. {miss_saver})",
            missing_in_saver=miss_saver,
            missing_in_base=miss_base,
        )
    rows = tuple(
        PairRow(sid, rec.confidence, rec.correct, b_map[sid].correct) for sid, rec in s_map.items()
    )
    return PairedDataset(saver.model_id, base.model_id, rows, saver.split)
