"""Command-line interface.

Exit codes: 0 success, 2 bad input data, 3 objective infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BackendError, DataError
from .ingest import DEFAULT_SCORE_FLOOR, ModelProfile, join_logs, load_profiles, parse_log
from .multiexit import ChainConfig, ExitChain, chain_search
from .report import Manifest, cost_label, dumps_csv, dumps_json, dumps_plot, fmt, pct_of_base
from .runtime import DEFAULT_TIMEOUT, ExternalProcessBackend, ReplayBackend, run_cascade
from .selection import (
    DEFAULT_DELTA_C_WARN,
    budget_table,
    find_r_match,
    rank_savers,
    subset_curve,
    threshold_sweep,
    uniform_grid,
)

log = logging.getLogger("saver_cascade")

EXIT_OK = 0
EXIT_DATA = 2
EXIT_INFEASIBLE = 3

DEFAULTS = {
    "format": "csv",
    "grid": "auto",
    "budgets": "1%,0.5%,0.1%,0%",
    "delta_c_warn": DEFAULT_DELTA_C_WARN,
    "score_floor": DEFAULT_SCORE_FLOOR,
    "timeout": DEFAULT_TIMEOUT,
}


# --------------------------------------------------------------------------
# argument helpers


def parse_budgets(text: str) -> list[float]:
    """``"1%,0.5%,0"`` -> ``[0.01, 0.005, 0.0]``. Bare numbers are fractions."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(float(part[:-1]) / 100.0 if part.endswith("%") else float(part))
        except ValueError:
            raise DataError(f"bad budget {part!r}") from None
    if not out:
        raise DataError("no budgets given")
    return out


def parse_grid(text):
    """``"auto"`` or an integer point count >= 2."""
    if text is None or str(text) == "auto":
        return "auto"
    try:
        n = int(text)
    except ValueError:
        raise DataError(f"--grid must be 'auto' or an integer, got {text!r}") from None
    if n < 2:
        raise DataError(f"--grid needs at least 2 points, got {n}")
    return n


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise DataError(f"expected comma-separated numbers, got {text!r}") from None


class Run:
    """Per-invocation state: resolved options, manifest and output sink."""

    def __init__(self, args, inputs):
        self.args = args
        self.fmt = args.format
        self.out_dir = Path(args.out_dir) if args.out_dir else None
        options = {
            k: v
            for k, v in sorted(vars(args).items())
            if not k.startswith("_") and k not in {"func", "out_dir", "config", "verbose"} and not _is_path_option(k)
        }
        self.manifest = Manifest(args.command, options, inputs)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def emit(self, stem: str, obj: dict, header=None, rows=None):
        """Write one report in the selected format (stdout when no --out-dir)."""
        obj = {**self.manifest.stamp(), **obj}
        if self.fmt == "csv" and header is not None:
            stamp = self.manifest.stamp()
            text = f"# command={stamp['command']} config_hash={stamp['config_hash']} tool_version={stamp['tool_version']}\n"
            text += dumps_csv(header, rows)
            name = f"{stem}.csv"
        else:
            text = dumps_json(obj)
            name = f"{stem}.json"
        self.write(name, text)

    def write(self, name: str, text: str, stdout: bool = True):
        if self.out_dir is None:
            if stdout:
                sys.stdout.write(text)
            return
        (self.out_dir / name).write_text(text, encoding="utf-8")

    def note(self, msg: str):
        """Human-readable summary line; goes to stdout only when reports go to files."""
        if self.out_dir is not None:
            print(msg)


_PATH_OPTIONS = {"saver_log", "base_log", "profiles", "candidates", "stage_log", "stage", "samples", "labels", "chain_config"}


def _is_path_option(name: str) -> bool:
    return name in _PATH_OPTIONS


def _load_log(path, model_id, args):
    return parse_log(path, model_id=model_id, split=args.split, score_floor=args.score_floor)


def _load_profiles(paths) -> dict[str, ModelProfile]:
    out: dict[str, ModelProfile] = {}
    for p in paths or ():
        for prof in load_profiles(p):
            out[prof.model_id] = prof
    return out


def _cost(model_id: str, profiles: dict, override: float | None, flag: str, required: bool = True) -> float | None:
    if override is not None:
        return float(override)
    if model_id in profiles:
        return profiles[model_id].cost
    if required:
        raise DataError(f"no cost for {model_id!r}: pass a profile with --profiles or use {flag}")
    return None


def _pair(args):
    saver = _load_log(args.saver_log, args.saver_id, args)
    base = _load_log(args.base_log, args.base_id, args)
    return saver, base, join_logs(saver, base)


def _cost_columns(cost, c_b):
    pct, saving = pct_of_base(cost, c_b)
    return [cost, pct, saving]


# --------------------------------------------------------------------------
# commands


def cmd_match(args) -> int:
    profiles = _load_profiles(args.profiles)
    saver, base, ds = _pair(args)
    run = Run(args, [args.saver_log, args.base_log, *(args.profiles or [])])
    c_s = _cost(saver.model_id, profiles, args.saver_cost, "--saver-cost", required=False)
    c_b = _cost(base.model_id, profiles, args.base_cost, "--base-cost", required=False)
    if (c_s is None) != (c_b is None):
        log.warning("only one model cost is known; delta_c not computed")
        c_s = c_b = None
    m = find_r_match(ds, c_s, c_b)
    warning = None
    if m.delta_c is not None and m.delta_c > args.delta_c_warn:
        warning = (
            f"delta_c {m.delta_c:.4f} on split {m.split!r} is above {args.delta_c_warn:g}; "
            "savings may not carry over to held-out data"
        )
        log.warning(warning)
    header = ["saver_id", "base_id", "split", "M", "threshold_star", "r_match", "n_exited",
              "correct_s_exited", "correct_b_exited", "c_s", "c_b", "delta_c"]
    j = m.to_json()
    run.emit("match", {"match": j, "warning": warning}, header, [[j[k] for k in header]])
    run.note(f"{m.saver_id} -> {m.base_id}: r_match={fmt(m.r_match)} at t*={fmt(m.threshold_star)}"
             + ("" if m.delta_c is None else f", delta_c={fmt(m.delta_c)}"))
    run.manifest.finish(run.out_dir)
    return EXIT_OK


def cmd_select_saver(args) -> int:
    cand_dir = Path(args.candidates)
    if not cand_dir.is_dir():
        raise DataError(f"candidate directory not found: {cand_dir}")
    log_paths = sorted(cand_dir.glob("*.jsonl"))
    if not log_paths:
        raise DataError(f"no candidate logs (*.jsonl) in {cand_dir}")
    prof_paths = sorted(cand_dir.glob("*.json"))
    profiles = _load_profiles(args.profiles)
    failures: list[tuple[str, str]] = []
    for p in prof_paths:
        try:
            for prof in load_profiles(p):
                profiles.setdefault(prof.model_id, prof)
        except DataError as exc:
            failures.append((p.name, str(exc)))

    base = _load_log(args.base_log, args.base_id, args)
    c_b = _cost(base.model_id, profiles, args.base_cost, "--base-cost")
    base_profile = ModelProfile(base.model_id, c_b)
    run = Run(args, [args.base_log, *(args.profiles or []), *log_paths, *prof_paths])

    candidates = []
    for p in log_paths:
        try:
            lg = _load_log(p, None, args)
        except (DataError, OSError, UnicodeDecodeError) as exc:
            failures.append((p.name, str(exc)))
            continue
        if lg.model_id == base.model_id:
            continue
        if lg.model_id not in profiles:
            failures.append((lg.model_id, f"no profile found for {lg.model_id!r}"))
            continue
        candidates.append((lg, profiles[lg.model_id]))

    ranking, join_failures = rank_savers(base, base_profile, candidates)
    failures.extend(join_failures)
    for name, reason in failures:
        log.warning("candidate %s skipped: %s", name, reason)
    for r in ranking:
        if r.delta_c_tr > args.delta_c_warn:
            log.warning("%s: delta_c %.4f is above %g", r.model_id, r.delta_c_tr, args.delta_c_warn)

    header = ["rank", "model_id", "cost", "delta_c_tr", "r_match", "threshold_star", "split", "notes"]
    rows = [[i + 1, r.model_id, r.cost, r.delta_c_tr, r.r_match, r.threshold_star, r.split, "; ".join(r.notes)]
            for i, r in enumerate(ranking)]
    run.emit(
        "ranking",
        {
            "base_id": base.model_id,
            "base_cost": c_b,
            "ranking": [r.to_json() for r in ranking],
            "failures": [{"candidate": n, "reason": why} for n, why in failures],
        },
        header,
        rows,
    )
    run.manifest.finish(run.out_dir)
    if not ranking:
        log.error("no candidate could be ranked")
        return EXIT_DATA
    run.note(f"best saver for {base.model_id}: {ranking[0].model_id} (delta_c={fmt(ranking[0].delta_c_tr)}); "
             f"{len(ranking)} ranked, {len(failures)} skipped")
    return EXIT_OK


def _curve(args):
    profiles = _load_profiles(args.profiles)
    saver, base, ds = _pair(args)
    c_s = _cost(saver.model_id, profiles, args.saver_cost, "--saver-cost")
    c_b = _cost(base.model_id, profiles, args.base_cost, "--base-cost")
    grid = parse_grid(args.grid)
    thresholds = grid if grid == "auto" else uniform_grid(grid)
    return ds, threshold_sweep(ds, c_s, c_b, thresholds)


def cmd_sweep(args) -> int:
    ds, curve = _curve(args)
    run = Run(args, [args.saver_log, args.base_log, *(args.profiles or [])])
    sub = subset_curve(ds)
    header = ["threshold", "exit_ratio", "accuracy", "expected_cost", "cost_pct_of_base", "saving_pct"]
    rows = [[p.threshold, p.exit_ratio, p.accuracy, *_cost_columns(p.expected_cost, curve.c_b)] for p in curve.points]
    obj = curve.to_json()
    obj["subset_curve"] = [p._asdict() for p in sub.points]
    obj["crossing_exit_ratio"] = sub.crossing_exit_ratio()
    run.emit("sweep", obj, header, rows)
    pts = curve.points
    run.write("sweep_cost_accuracy.dat", dumps_plot([p.expected_cost for p in pts], [p.accuracy for p in pts],
                                                    ("expected_cost", "accuracy")), stdout=False)
    run.write("sweep_exit_accuracy.dat", dumps_plot([p.exit_ratio for p in pts], [p.accuracy for p in pts],
                                                    ("exit_ratio", "accuracy")), stdout=False)
    run.write("subset_saver.dat", dumps_plot([p.exit_ratio for p in sub.points], [p.acc_s_on_exited for p in sub.points],
                                             ("exit_ratio", "saver_accuracy_on_exited")), stdout=False)
    run.write("subset_base.dat", dumps_plot([p.exit_ratio for p in sub.points], [p.acc_b_on_exited for p in sub.points],
                                            ("exit_ratio", "base_accuracy_on_exited")), stdout=False)
    run.note(f"{len(pts)} sweep points; saver/base crossing at exit ratio {fmt(sub.crossing_exit_ratio())}")
    run.manifest.finish(run.out_dir)
    return EXIT_OK


def cmd_budget_table(args) -> int:
    budgets = parse_budgets(args.budgets)
    ds, curve = _curve(args)
    run = Run(args, [args.saver_log, args.base_log, *(args.profiles or [])])
    table = budget_table(curve, budgets)
    header = ["budget", "feasible", "threshold", "accuracy", "accuracy_change_pct", "expected_cost",
              "cost_pct_of_base", "saving_pct", "exit_ratio"]

    def line(label, r):
        change = None if r.accuracy is None else 100.0 * (r.accuracy - curve.base_accuracy)
        return [label, r.feasible, r.threshold, r.accuracy, change,
                *_cost_columns(r.expected_cost, curve.c_b), r.exit_ratio]

    rows = [line(f"{fmt(100.0 * r.budget)}%", r) for r in table.rows]
    rows.append(line("max_performance", table.max_performance))
    obj = {
        "saver_id": curve.saver_id,
        "base_id": curve.base_id,
        "split": curve.split,
        "c_s": curve.c_s,
        "c_b": curve.c_b,
        "base_accuracy": curve.base_accuracy,
        "saver_accuracy": curve.saver_accuracy,
        "rows": [r.to_json() for r in table.rows],
        "max_performance": {k: v for k, v in table.max_performance.to_json().items() if k != "budget"},
    }
    run.emit("budget_table", obj, header, rows)
    cells = "  ".join(f"<={fmt(100.0 * r.budget)}%: {cost_label(r.expected_cost, curve.c_b)}" for r in table.rows)
    run.note(f"{curve.base_id} + {curve.saver_id}  {cells}")
    run.manifest.finish(run.out_dir)
    if any(not r.feasible for r in table.rows):
        log.error("at least one accuracy-drop budget is infeasible on this grid")
        return EXIT_INFEASIBLE
    return EXIT_OK


def _stage_logs(args):
    paths = list(args.stage_log or [])
    if not paths and args.saver_log and args.base_log:
        paths = [args.saver_log, args.base_log]
    if len(paths) < 2:
        raise DataError("need at least two stages (--stage-log ... or --saver-log/--base-log)")
    return paths


def cmd_chain_search(args) -> int:
    paths = _stage_logs(args)
    profiles = _load_profiles(args.profiles)
    logs = [_load_log(p, None, args) for p in paths]
    overrides = _floats(args.costs) if args.costs else None
    if overrides is not None and len(overrides) != len(logs):
        raise DataError(f"--costs has {len(overrides)} values for {len(logs)} stages")
    costs = [_cost(lg.model_id, profiles, None if overrides is None else overrides[i], "--costs")
             for i, lg in enumerate(logs)]
    chain = ExitChain.from_logs(logs, costs)
    run = Run(args, [*paths, *(args.profiles or [])])

    given = [x is not None for x in (args.accuracy_floor, args.accuracy_drop, args.cost_ceiling)]
    if sum(given) != 1:
        raise DataError("give exactly one of --accuracy-floor, --accuracy-drop, --cost-ceiling")
    floor = args.accuracy_floor
    if args.accuracy_drop is not None:
        floor = max(0.0, float(logs[-1].accuracy) - args.accuracy_drop)
    grid = parse_grid(args.grid)
    res = chain_search(chain, accuracy_floor=floor, cost_ceiling=args.cost_ceiling,
                       resolution=None if grid == "auto" else grid)

    run.write("chain_config.json", json.dumps(res.config.to_json()) + "\n", stdout=False)
    header = ["stage", "model_id", "cost", "threshold", "exit_fraction", "reach_fraction"]
    ths = list(res.config.thresholds) + [None]
    rows = [[k, st.model_id, st.cost, ths[k], res.result.exit_fractions[k], res.result.reach_fractions[k]]
            for k, st in enumerate(chain.stages)]
    rows.append(["total", "", res.result.expected_cost, None, None, None])
    run.emit("chain_search", res.to_json(), header, rows)
    status = "met" if res.feasible else "NOT met"
    run.note(f"{res.objective}={fmt(res.target)} {status}: thresholds={[fmt(t) for t in res.config.thresholds]} "
             f"accuracy={fmt(res.result.accuracy)} cost={fmt(res.result.expected_cost)}")
    run.manifest.finish(run.out_dir)
    if not res.feasible:
        log.error("objective %s=%g is infeasible; best attempt reported", res.objective, res.target)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _read_samples(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    raise DataError(f"{path}: line {line_no}: malformed JSON") from None
                if not isinstance(obj.get("id"), str):
                    raise DataError(f"{path}: line {line_no}: sample needs a string 'id'")
                out.append((obj["id"], obj.get("payload")))
            else:
                out.append(line)
    return out


def _build_backends(args, profiles):
    specs = list(args.stage or [])
    if not specs:
        specs = [f"replay:{p}" for p in _stage_logs(args)]
    overrides = _floats(args.costs) if args.costs else None
    if overrides is not None and len(overrides) != len(specs):
        raise DataError(f"--costs has {len(overrides)} values for {len(specs)} stages")
    labels = None
    if args.labels:
        labels = json.loads(Path(args.labels).read_text(encoding="utf-8"))
    backends, inputs, first_log = [], [], None
    for i, spec in enumerate(specs):
        override = None if overrides is None else overrides[i]
        kind, _, rest = spec.partition(":")
        if kind == "replay":
            lg = _load_log(rest, None, args)
            first_log = first_log or lg
            backends.append(ReplayBackend(lg, _cost(lg.model_id, profiles, override, "--costs")))
            inputs.append(rest)
        elif kind == "exec":
            model_id, _, command = rest.partition(":")
            if not model_id or not command:
                raise DataError(f"bad stage spec {spec!r}; expected exec:MODEL_ID:COMMAND")
            cost = _cost(model_id, profiles, override, "--costs")
            backends.append(ExternalProcessBackend(command, model_id, cost, args.timeout, labels))
        else:
            raise DataError(f"bad stage spec {spec!r}; expected replay:PATH or exec:MODEL_ID:COMMAND")
    return backends, inputs, first_log


def cmd_simulate(args) -> int:
    profiles = _load_profiles(args.profiles)
    backends, inputs, first_log = _build_backends(args, profiles)
    try:
        if args.chain_config:
            cfg = ChainConfig.from_json(json.loads(Path(args.chain_config).read_text(encoding="utf-8")))
            inputs.append(args.chain_config)
        elif args.thresholds is not None:
            cfg = ChainConfig(tuple(_floats(args.thresholds)))
        else:
            raise DataError("give --thresholds or --chain-config")
        if args.samples:
            samples = _read_samples(args.samples)
            inputs.append(args.samples)
        elif first_log is not None:
            samples = [r.sample_id for r in first_log.records]
        else:
            raise DataError("no replay stage to take sample ids from; pass --samples")
        run = Run(args, [*inputs, *(args.profiles or [])])
        result = run_cascade(samples, backends, cfg, skip_errors=args.skip_errors)
    finally:
        for be in backends:
            be.close()

    agg = {**run.manifest.stamp(), **result.aggregate.to_json()}
    if run.out_dir is not None:
        with open(run.out_dir / "traces.jsonl", "w", encoding="utf-8") as fh:
            result.write_traces(fh)
        (run.out_dir / "aggregate.json").write_text(dumps_json(agg), encoding="utf-8")
    else:
        sys.stdout.write(dumps_json(agg))
    a = result.aggregate
    run.note(f"{a.n_samples} samples ({a.n_skipped} skipped): exit fractions {[fmt(x) for x in a.exit_fractions]}, "
             f"mean cost {fmt(a.mean_cost)}, accuracy {fmt(a.accuracy)}")
    run.manifest.finish(run.out_dir)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; flags win")
    common.add_argument("--split", help="split tag for logs without a header line")
    common.add_argument("--out-dir", help="write reports here instead of stdout")
    common.add_argument("--format", choices=["csv", "json"], help="report format (default csv)")
    common.add_argument("--profiles", nargs="+", help="model profile JSON file(s)")
    common.add_argument("--score-floor", type=float, help="box-score floor for detection logs (default 0.05)")
    common.add_argument("-v", "--verbose", action="store_true")

    pair = argparse.ArgumentParser(add_help=False)
    pair.add_argument("--saver-log")
    pair.add_argument("--base-log")
    pair.add_argument("--saver-id", help="model id when the saver log has no header")
    pair.add_argument("--base-id", help="model id when the base log has no header")
    pair.add_argument("--saver-cost", type=float, help="override the saver's profile cost")
    pair.add_argument("--base-cost", type=float, help="override the base's profile cost")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--grid", help="'auto' (every observed confidence) or a point count N")

    parser = argparse.ArgumentParser(prog="saver-cascade", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", parents=[common, pair], help="r_match and delta_c for one saver/base pair")
    p.add_argument("--delta-c-warn", type=float, help="warn when delta_c exceeds this (default -0.05)")
    p.set_defaults(func=cmd_match, _required=("saver_log", "base_log"))

    p = sub.add_parser("select-saver", parents=[common, pair], help="rank candidate savers for a base model")
    p.add_argument("--candidates", help="directory of candidate *.jsonl logs and *.json profiles")
    p.add_argument("--delta-c-warn", type=float)
    p.set_defaults(func=cmd_select_saver, _required=("base_log", "candidates"))

    p = sub.add_parser("sweep", parents=[common, pair, grid], help="accuracy/cost across thresholds")
    p.set_defaults(func=cmd_sweep, _required=("saver_log", "base_log"))

    p = sub.add_parser("budget-table", parents=[common, pair, grid], help="cheapest threshold per accuracy-drop budget")
    p.add_argument("--budgets", help="comma-separated drops, e.g. 1%%,0.5%%,0.1%%,0%%")
    p.set_defaults(func=cmd_budget_table, _required=("saver_log", "base_log"))

    chain = argparse.ArgumentParser(add_help=False)
    chain.add_argument("--stage-log", action="append", help="stage log, in chain order (repeatable)")
    chain.add_argument("--costs", help="comma-separated stage costs overriding profiles")

    p = sub.add_parser("chain-search", parents=[common, pair, grid, chain], help="tune per-stage exit thresholds")
    p.add_argument("--accuracy-floor", type=float)
    p.add_argument("--accuracy-drop", type=float, help="floor = final-stage accuracy minus this")
    p.add_argument("--cost-ceiling", type=float)
    p.set_defaults(func=cmd_chain_search, _required=())

    p = sub.add_parser("simulate", parents=[common, pair, chain], help="run a cascade over backends")
    p.add_argument("--stage", action="append", help="replay:PATH or exec:MODEL_ID:COMMAND (repeatable)")
    p.add_argument("--thresholds", help="comma-separated per-stage thresholds")
    p.add_argument("--chain-config", help="JSON from chain-search")
    p.add_argument("--samples", help="sample ids, one per line (or JSON lines with id/payload)")
    p.add_argument("--labels", help="JSON object mapping sample id to expected output (exec stages)")
    p.add_argument("--timeout", type=float, help="per-request timeout in seconds (default 30)")
    p.add_argument("--skip-errors", action="store_true", help="skip failing samples instead of aborting")
    p.set_defaults(func=cmd_simulate, _required=())
    return parser


def _apply_config(args):
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: malformed JSON ({exc.msg})") from None
        if not isinstance(cfg, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if not hasattr(args, key):
                raise DataError(f"{args.config}: unknown option {key!r}")
            if getattr(args, key) in (None, False):
                setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if getattr(args, key, "missing") is None:
            setattr(args, key, value)
    missing = [k for k in args._required if not getattr(args, k, None)]
    if missing:
        raise DataError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _apply_config(args)
        return args.func(args)
    except (DataError, BackendError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
