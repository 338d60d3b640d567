"""Report serialization: fixed-precision CSV/JSON, plot data and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__

SIG_DIGITS = 6


def fmt(x) -> str:
    """Format a value for text output; floats get 6 significant digits."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return f"{x:.{SIG_DIGITS}g}"
    return str(x)


def round_floats(obj):
    """Round every float in a JSON-like structure to 6 significant digits; NaN becomes null."""
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.{SIG_DIGITS}g}")
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    return obj


def dumps_json(obj) -> str:
    return json.dumps(round_floats(obj), indent=2) + "\n"


def dumps_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def dumps_plot(xs: Iterable[float], ys: Iterable[float], labels: tuple[str, str]) -> str:
    """Two whitespace-separated columns with a commented header, for gnuplot and friends."""
    lines = [f"# {labels[0]} {labels[1]}"]
    lines.extend(f"{fmt(float(x))} {fmt(float(y))}" for x, y in zip(xs, ys))
    return "\n".join(lines) + "\n"


def pct_of_base(cost: float | None, c_b: float) -> tuple[float | None, float | None]:
    """``(cost as % of c_b, signed saving in %)``, e.g. ``(21.1, -78.9)``."""
    if cost is None:
        return None, None
    pct = 100.0 * cost / c_b
    return pct, pct - 100.0


def cost_label(cost: float | None, c_b: float) -> str:
    if cost is None:
        return "infeasible"
    _, saving = pct_of_base(cost, c_b)
    return f"{cost:.2f} ({saving:+.1f}%)"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run metadata. The config hash covers the command, its options and input contents, not paths or times."""

    def __init__(self, command: str, options: dict, inputs: Sequence):
        self.command = command
        self.options = options
        self.inputs = [(str(p), file_digest(p)) for p in inputs]
        self.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.finished_at: str | None = None
        payload = {
            "command": command,
            "options": options,
            "inputs": sorted(d for _, d in self.inputs),
            "tool_version": __version__,
        }
        self.config_hash = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def stamp(self) -> dict:
        """The subset embedded into every report; stable across reruns."""
        return {"command": self.command, "config_hash": self.config_hash, "tool_version": __version__}

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "options": self.options,
            "inputs": [{"path": p, "sha256": d} for p, d in self.inputs],
            "config_hash": self.config_hash,
            "tool_version": __version__,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def finish(self, out_dir: Path | None):
        self.finished_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        if out_dir is not None:
            (out_dir / "manifest.json").write_text(json.dumps(self.to_json(), indent=2, default=str) + "\n")
