import csv
import io
import json
import sys
from pathlib import Path

import pytest

from conftest import REFERENCE_ROWS, write_log, write_profile
from saver_cascade.cli import main, parse_budgets, parse_grid
from saver_cascade.errors import DataError

STUB = Path(__file__).parent / "stubs" / "echo_backend.py"


@pytest.fixture
def pair(tmp_path):
    d = tmp_path / "in"
    d.mkdir()
    s = write_log(d / "saver.jsonl", "effv2", "train", [(i, c, s) for i, c, s, _ in REFERENCE_ROWS])
    b = write_log(d / "base.jsonl", "maxvit", "train", [(i, 1.0, b) for i, _, _, b in REFERENCE_ROWS])
    prof = d / "profiles.json"
    prof.write_text(json.dumps([{"model_id": "effv2", "cost_gflops": 1.0}, {"model_id": "maxvit", "cost_gflops": 4.0}]))
    return {"saver": str(s), "base": str(b), "profiles": str(prof), "dir": d}


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _csv(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _pair_args(pair):
    return ["--saver-log", pair["saver"], "--base-log", pair["base"], "--profiles", pair["profiles"]]


class TestHelpers:
    def test_budgets(self):
        assert parse_budgets("1%,0.5%,0.1%,0%") == [0.01, 0.005, 0.001, 0.0]
        assert parse_budgets("0.02") == [0.02]
        with pytest.raises(DataError):
            parse_budgets("x%")

    def test_grid(self):
        assert parse_grid("auto") == "auto"
        assert parse_grid("11") == 11
        with pytest.raises(DataError):
            parse_grid("1")


class TestMatch:
    def test_reference(self, pair, capsys):
        code, out, _ = _run(["match", *_pair_args(pair)], capsys)
        assert code == 0
        (row,) = _csv(out)
        assert (row["r_match"], row["threshold_star"], row["delta_c"]) == ("0.8", "0.5", "-0.55")
        assert out.startswith("# command=match config_hash=")

    def test_json_without_costs(self, pair, capsys):
        code, out, _ = _run(["match", "--saver-log", pair["saver"], "--base-log", pair["base"], "--format", "json"], capsys)
        assert code == 0
        obj = json.loads(out)
        assert obj["match"]["r_match"] == 0.8
        assert obj["match"]["delta_c"] is None

    def test_warns_on_weak_saver(self, pair, capsys, caplog):
        code, out, _ = _run(["match", *_pair_args(pair), "--saver-cost", "3.9", "--format", "json"], capsys)
        assert code == 0
        assert "delta_c" in caplog.text
        assert json.loads(out)["warning"]

    def test_missing_file(self, pair, capsys):
        missing = pair["dir"] / "nope.jsonl"
        code, _, err = _run(["match", "--saver-log", missing, "--base-log", pair["base"]], capsys)
        assert code == 2
        assert str(missing) in err

    def test_mismatched_ids(self, pair, capsys):
        other = write_log(pair["dir"] / "other.jsonl", "x", "train", [("zz", 0.5, True)])
        code, _, err = _run(["match", "--saver-log", pair["saver"], "--base-log", other], capsys)
        assert code == 2
        assert "zz" in err

    def test_malformed_line(self, pair, capsys):
        bad = pair["dir"] / "bad.jsonl"
        bad.write_text('{"sample_id": "s1", "confidence": 0.5, "correct": true}\n{"sample_id": "s2", "confidence": 1.2, "correct": true}\n')
        code, _, err = _run(["match", "--saver-log", bad, "--base-log", pair["base"]], capsys)
        assert code == 2
        assert "line 2" in err

    def test_missing_required(self, pair, capsys):
        code, _, err = _run(["match", "--saver-log", pair["saver"]], capsys)
        assert code == 2
        assert "--base-log" in err


class TestSelectSaver:
    def _cands(self, pair, n=3):
        d = pair["dir"] / "cands"
        d.mkdir()
        for k in range(n):
            rows = [(i, c, s if k != 1 else True) for i, c, s, _ in REFERENCE_ROWS]
            write_log(d / f"c{k}.jsonl", f"c{k}", "train", rows)
            write_profile(d / f"c{k}.json", f"c{k}", 0.5 + k)
        return d

    def test_three(self, pair, capsys):
        d = self._cands(pair)
        code, out, _ = _run(["select-saver", "--base-log", pair["base"], "--profiles", pair["profiles"],
                             "--candidates", d, "--format", "json"], capsys)
        assert code == 0
        obj = json.loads(out)
        ids = [r["model_id"] for r in obj["ranking"]]
        # c1 is never wrong but costs three times as much as c0
        assert ids == ["c0", "c1", "c2"]
        dcs = [r["delta_c_tr"] for r in obj["ranking"]]
        assert dcs == pytest.approx([0.125 - 0.8, 0.375 - 1.0, 0.625 - 0.8])

    def test_empty_dir(self, pair, capsys):
        d = pair["dir"] / "empty"
        d.mkdir()
        code, _, err = _run(["select-saver", "--base-log", pair["base"], "--profiles", pair["profiles"],
                             "--candidates", d], capsys)
        assert code == 2
        assert "no candidate" in err

    def test_one_unreadable(self, pair, capsys, caplog):
        d = self._cands(pair)
        (d / "c3.jsonl").write_text("{broken\n")
        code, out, err = _run(["select-saver", "--base-log", pair["base"], "--profiles", pair["profiles"],
                               "--candidates", d, "--format", "json"], capsys)
        assert code == 0
        obj = json.loads(out)
        assert len(obj["ranking"]) == 3
        assert obj["failures"][0]["candidate"] == "c3.jsonl"
        assert "c3.jsonl" in caplog.text


class TestSweep:
    def test_auto(self, pair, capsys):
        code, out, _ = _run(["sweep", *_pair_args(pair)], capsys)
        assert code == 0
        rows = _csv(out)
        assert len(rows) == 6
        assert rows[0]["threshold"] == "1.1" and rows[0]["expected_cost"] == "5"
        assert rows[-1]["saving_pct"] == "-75"

    def test_uniform_grid(self, pair, capsys):
        code, out, _ = _run(["sweep", *_pair_args(pair), "--grid", "11"], capsys)
        assert code == 0
        assert len(_csv(out)) == 11

    def test_out_dir_files(self, pair, tmp_path, capsys):
        out_dir = tmp_path / "out"
        code, out, _ = _run(["sweep", *_pair_args(pair), "--out-dir", out_dir], capsys)
        assert code == 0
        names = sorted(p.name for p in out_dir.iterdir())
        assert names == ["manifest.json", "subset_base.dat", "subset_saver.dat", "sweep.csv",
                         "sweep_cost_accuracy.dat", "sweep_exit_accuracy.dat"]
        assert "crossing at exit ratio 0.8" in out
        man = json.loads((out_dir / "manifest.json").read_text())
        assert man["started_at"] and man["finished_at"]


class TestBudgetTable:
    def test_rows(self, pair, capsys):
        code, out, _ = _run(["budget-table", *_pair_args(pair)], capsys)
        assert code == 0
        rows = _csv(out)
        assert [r["budget"] for r in rows] == ["1%", "0.5%", "0.1%", "0%", "max_performance"]
        d0 = rows[3]
        assert (d0["threshold"], d0["expected_cost"], d0["saving_pct"]) == ("0.5", "1.8", "-55")
        assert rows[4]["accuracy"] == "1"

    def test_infeasible_exit_code(self, pair, capsys):
        # confident and always wrong: every grid point in {1, 0} exits everything
        worse = write_log(pair["dir"] / "worse.jsonl", "effv2", "train",
                          [(i, 1.0, False) for i, *_ in REFERENCE_ROWS])
        args = ["budget-table", "--saver-log", worse, "--base-log", pair["base"], "--profiles", pair["profiles"],
                "--grid", "2", "--budgets", "0"]
        code, out, err = _run(args, capsys)
        assert code == 3
        assert _csv(out)[0]["feasible"] == "false"
        # the auto grid always includes the no-exit sentinel
        code, _, _ = _run(args[:-4] + ["--budgets", "0"], capsys)
        assert code == 0


class TestChainSearch:
    def test_impossible_ceiling(self, pair, capsys, caplog):
        code, out, _ = _run(["chain-search", *_pair_args(pair), "--cost-ceiling", "0.5"], capsys)
        assert code == 3
        assert "infeasible" in caplog.text
        assert _csv(out)[-1]["cost"] == "1"

    def test_floor_writes_config(self, pair, tmp_path, capsys):
        out_dir = tmp_path / "chain"
        code, _, _ = _run(["chain-search", "--stage-log", pair["saver"], "--stage-log", pair["base"],
                           "--costs", "1,4", "--accuracy-drop", "0", "--out-dir", out_dir], capsys)
        assert code == 0
        cfg = json.loads((out_dir / "chain_config.json").read_text())
        assert cfg == {"thresholds": [0.5], "stage_ids": ["effv2", "maxvit"]}
        rows = _csv((out_dir / "chain_search.csv").read_text())
        assert rows[-1]["cost"] == "1.8"

    def test_needs_one_objective(self, pair, capsys):
        code, _, err = _run(["chain-search", *_pair_args(pair)], capsys)
        assert code == 2

    def test_cost_count_mismatch(self, pair, capsys):
        code, _, _ = _run(["chain-search", *_pair_args(pair), "--costs", "1", "--cost-ceiling", "3"], capsys)
        assert code == 2


class TestSimulate:
    def test_replay(self, pair, tmp_path, capsys):
        out_dir = tmp_path / "sim"
        code, _, _ = _run(["simulate", "--stage", f"replay:{pair['saver']}", "--stage", f"replay:{pair['base']}",
                           "--profiles", pair["profiles"], "--thresholds", "0.6", "--out-dir", out_dir], capsys)
        assert code == 0
        agg = json.loads((out_dir / "aggregate.json").read_text())
        assert (agg["exit_fractions"][0], agg["mean_cost"], agg["accuracy"]) == (0.6, 2.6, 0.8)
        traces = (out_dir / "traces.jsonl").read_text().splitlines()
        assert len(traces) == 5

    def test_chain_config_from_search(self, pair, tmp_path, capsys):
        out_dir = tmp_path / "chain"
        _run(["chain-search", *_pair_args(pair), "--accuracy-drop", "0", "--out-dir", out_dir], capsys)
        code, out, _ = _run(["simulate", "--saver-log", pair["saver"], "--base-log", pair["base"],
                             "--profiles", pair["profiles"], "--chain-config", out_dir / "chain_config.json"], capsys)
        assert code == 0
        assert json.loads(out)["mean_cost"] == 1.8

    def test_exec_stage(self, pair, tmp_path, capsys):
        samples = tmp_path / "samples.txt"
        samples.write_text("s1\ns2\n")
        cmd = f"{sys.executable} {STUB} fixed:0.99"
        code, out, _ = _run(["simulate", "--stage", f"exec:tiny:{cmd}", "--stage", f"replay:{pair['base']}",
                             "--costs", "0.5,4", "--thresholds", "0.9", "--samples", samples], capsys)
        assert code == 0
        agg = json.loads(out)
        assert agg["exit_counts"] == [2, 0]
        assert agg["accuracy"] is None

    def test_backend_failure(self, pair, tmp_path, capsys):
        samples = tmp_path / "samples.txt"
        samples.write_text("s1\nghost\n")
        args = ["simulate", "--saver-log", pair["saver"], "--base-log", pair["base"], "--profiles", pair["profiles"],
                "--thresholds", "0.6", "--samples", samples]
        code, _, err = _run(args, capsys)
        assert code == 2 and "ghost" in err
        code, out, _ = _run(args + ["--skip-errors"], capsys)
        assert code == 0
        assert json.loads(out)["n_skipped"] == 1


class TestReproducibility:
    def test_byte_stable(self, pair, tmp_path, capsys):
        outs = []
        for k in range(2):
            out_dir = tmp_path / f"o{k}"
            _run(["budget-table", *_pair_args(pair), "--out-dir", out_dir, "--format", "json"], capsys)
            outs.append((out_dir / "budget_table.json").read_bytes())
        assert outs[0] == outs[1]

    def test_hash_ignores_paths(self, pair, tmp_path, capsys):
        copy = tmp_path / "copy.jsonl"
        copy.write_bytes(Path(pair["saver"]).read_bytes())
        _, a, _ = _run(["match", *_pair_args(pair)], capsys)
        _, b, _ = _run(["match", "--saver-log", copy, "--base-log", pair["base"], "--profiles", pair["profiles"]], capsys)
        assert a.splitlines()[0] == b.splitlines()[0]

    def test_hash_tracks_options(self, pair, capsys):
        _, a, _ = _run(["match", *_pair_args(pair)], capsys)
        _, b, _ = _run(["match", *_pair_args(pair), "--delta-c-warn", "-0.5"], capsys)
        assert a.splitlines()[0] != b.splitlines()[0]

    def test_config_file_flags_win(self, pair, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"saver_log": pair["saver"], "base_log": pair["base"],
                                   "profiles": [pair["profiles"]], "format": "json"}))
        code, out, _ = _run(["match", "--config", cfg], capsys)
        assert code == 0
        assert json.loads(out)["match"]["r_match"] == 0.8
        code, out, _ = _run(["match", "--config", cfg, "--format", "csv"], capsys)
        assert out.startswith("# command=match")

    def test_config_unknown_key(self, pair, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        code, _, err = _run(["match", "--config", cfg], capsys)
        assert code == 2 and "bogus" in err
