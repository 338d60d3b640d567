import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from oracles import chain_walk
from saver_cascade import (
    NO_EXIT,
    ChainConfig,
    DomainError,
    ExitChain,
    JoinError,
    budget_table,
    cascade_eval,
    chain_eval,
    chain_search,
    threshold_sweep,
)
from saver_cascade.ingest import ModelLog, PredictionRecord
from saver_cascade.multiexit import Stage, _scan_stage, stage_candidates

C_S, C_B = 1.0, 4.0


@pytest.fixture
def three():
    # sample:      a     b     c     d
    conf = [[0.9, 0.4, 0.2, 0.6], [0.7, 0.8, 0.3, 0.1], [0.5, 0.5, 0.5, 0.5]]
    corr = [[True, False, False, True], [True, True, False, False], [True, True, True, False]]
    stages = [Stage(f"m{k}", c, np.array(conf[k]), np.array(corr[k])) for k, c in enumerate([1.0, 3.0, 10.0])]
    return ExitChain(["a", "b", "c", "d"], stages), conf, corr


def _random_chain(rng, n_stages, m, levels=None):
    stages = []
    for k in range(n_stages):
        conf = rng.integers(0, levels + 1, m) / levels if levels else rng.random(m)
        stages.append(Stage(f"m{k}", float(rng.uniform(0.5, 2.0) * 3**k), conf, rng.random(m) < 0.5 + 0.1 * k))
    return ExitChain([f"s{i}" for i in range(m)], stages)


class TestEval:
    def test_three_stage_fixture(self, three):
        chain, conf, corr = three
        res = chain_eval(chain, ChainConfig((0.6, 0.75)))
        # a, d exit at m0; b exits at m1; c falls through to m2
        assert res.exit_counts == (2, 1, 1)
        assert res.n_correct == 4
        assert res.accuracy == 1.0
        assert res.reach_fractions == (1.0, 0.5, 0.25)
        assert res.expected_cost == pytest.approx(1 + 0.5 * 3 + 0.25 * 10)

    def test_against_walk(self, three):
        chain, conf, corr = three
        for ths in [(0.0, 0.0), (NO_EXIT, NO_EXIT), (0.5, 0.5), (0.95, 0.2), (0.3, NO_EXIT)]:
            res = chain_eval(chain, ChainConfig(ths))
            counts, n_correct, costs = chain_walk(conf, corr, chain.costs, ths)
            assert list(res.exit_counts) == counts
            assert res.n_correct == n_correct
            assert res.expected_cost == pytest.approx(sum(costs) / 4, rel=1e-12)

    def test_sentinel_chain_is_last_stage(self, three):
        chain, _, corr = three
        res = chain_eval(chain, ChainConfig((NO_EXIT, NO_EXIT)))
        assert res.exit_counts == (0, 0, 4)
        assert res.accuracy == np.mean(corr[2])
        assert res.expected_cost == 14.0

    def test_wrong_threshold_count(self, three):
        with pytest.raises(DomainError):
            chain_eval(three[0], ChainConfig((0.5,)))

    def test_stage_id_mismatch(self, three):
        with pytest.raises(DomainError):
            chain_eval(three[0], ChainConfig((0.5, 0.5), ("m0", "zz")))

    def test_single_stage_rejected(self):
        with pytest.raises(DomainError):
            ExitChain(["a"], [Stage("m", 1.0, np.array([0.5]), np.array([True]))])

    @settings(max_examples=60)
    @given(st.integers(2, 5), st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_random_against_walk(self, n_stages, m, seed):
        rng = np.random.default_rng(seed)
        chain = _random_chain(rng, n_stages, m, levels=4 if seed % 2 else None)
        ths = tuple(float(x) for x in rng.choice([0.0, 0.25, 0.5, 0.75, 1.0, NO_EXIT], n_stages - 1))
        res = chain_eval(chain, ChainConfig(ths))
        confs = [s.confidence.tolist() for s in chain.stages]
        corrs = [s.correct.tolist() for s in chain.stages]
        counts, n_correct, costs = chain_walk(confs, corrs, chain.costs, ths)
        assert list(res.exit_counts) == counts
        assert res.n_correct == n_correct
        assert res.expected_cost == pytest.approx(sum(costs) / m, rel=1e-12)
        assert sum(res.exit_fractions) == pytest.approx(1.0, abs=1e-12)
        assert list(res.reach_fractions) == sorted(res.reach_fractions, reverse=True)


class TestTwoStageEquivalence:
    def test_bit_exact(self, rng):
        for i in range(200):
            ds = random_dataset(rng, levels=6 if i % 2 else None)
            chain = ExitChain.from_paired(ds, C_S, C_B)
            for t in [NO_EXIT, 0.0] + ds.distinct_confidences()[:5]:
                a = cascade_eval(ds, t, C_S, C_B)
                b = chain_eval(chain, ChainConfig((t,)))
                assert (a.accuracy, a.expected_cost, a.exit_ratio) == (b.accuracy, b.expected_cost, b.exit_fractions[0])


class TestConfig:
    def test_round_trip(self):
        cfg = ChainConfig((0.7, NO_EXIT), ("a", "b", "c"))
        assert ChainConfig.from_json(json.loads(cfg.dumps())) == cfg

    @pytest.mark.parametrize("obj", [{}, {"thresholds": 0.5}, {"thresholds": [-1]}])
    def test_bad(self, obj):
        with pytest.raises(ValueError):
            ChainConfig.from_json(obj)


class TestFromLogs:
    def _log(self, name, rows, split="val"):
        return ModelLog(name, split, tuple(PredictionRecord(i, c, ok) for i, c, ok in rows))

    def test_aligns_by_id(self):
        a = self._log("a", [("x", 0.9, True), ("y", 0.1, False)])
        b = self._log("b", [("y", 0.2, True), ("x", 0.3, False)])
        chain = ExitChain.from_logs([a, b], [1, 2])
        assert chain.stages[1].confidence.tolist() == [0.3, 0.2]

    def test_id_mismatch(self):
        a = self._log("a", [("x", 0.9, True)])
        b = self._log("b", [("y", 0.2, True)])
        with pytest.raises(JoinError):
            ExitChain.from_logs([a, b], [1, 2])

    def test_split_mismatch(self):
        a = self._log("a", [("x", 0.9, True)])
        b = self._log("b", [("x", 0.2, True)], split="test")
        with pytest.raises(JoinError):
            ExitChain.from_logs([a, b], [1, 2])


class TestSearch:
    def test_floor_at_base_matches_budget_table(self, reference):
        chain = ExitChain.from_paired(reference, C_S, C_B)
        found = chain_search(chain, accuracy_floor=reference.base_accuracy)
        row = budget_table(threshold_sweep(reference, C_S, C_B), [0.0]).rows[0]
        assert found.feasible
        assert found.result.expected_cost == row.expected_cost
        assert found.config.thresholds == (row.threshold,)

    def test_zero_floor_exits_at_first_stage(self, three):
        found = chain_search(three[0], accuracy_floor=0.0)
        assert found.result.expected_cost == 1.0
        assert found.result.exit_counts == (4, 0, 0)

    def test_impossible_ceiling(self, three):
        found = chain_search(three[0], cost_ceiling=0.5)
        assert not found.feasible

    def test_generous_ceiling_maximizes_accuracy(self, three):
        found = chain_search(three[0], cost_ceiling=100.0)
        assert found.feasible
        assert found.result.accuracy == 1.0

    def test_needs_one_objective(self, three):
        with pytest.raises(DomainError):
            chain_search(three[0])
        with pytest.raises(DomainError):
            chain_search(three[0], accuracy_floor=0.5, cost_ceiling=3.0)

    def test_resolution(self):
        cands = stage_candidates(np.linspace(0, 1, 101), 5)
        assert cands[0] == NO_EXIT and cands[-1] == 0.0
        assert len(cands) == 5
        with pytest.raises(DomainError):
            chain_search(_random_chain(np.random.default_rng(0), 2, 5), accuracy_floor=0.5, resolution=1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 4), st.integers(1, 25), st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_never_violates_floor(self, n_stages, m, seed, floor):
        chain = _random_chain(np.random.default_rng(seed), n_stages, m, levels=5)
        found = chain_search(chain, accuracy_floor=floor)
        last = chain.stages[-1].correct.mean()
        if floor <= last:
            # all-sentinel is feasible, so the search must stay feasible
            assert found.feasible
        if found.feasible:
            assert found.result.accuracy >= floor - 1e-12
        assert found.result == chain_eval(chain, found.config)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 4), st.integers(1, 25), st.integers(0, 2**32 - 1))
    def test_scan_agrees_with_eval(self, n_stages, m, seed):
        rng = np.random.default_rng(seed)
        chain = _random_chain(rng, n_stages, m, levels=3)
        ths = [float(x) for x in rng.choice([0.0, 0.5, 1.0, NO_EXIT], n_stages - 1)]
        for k in range(n_stages - 1):
            cands = stage_candidates(chain.stages[k].confidence, None)
            for t, res in zip(cands, _scan_stage(chain, ths, k, cands)):
                trial = list(ths)
                trial[k] = t
                assert res == chain_eval(chain, ChainConfig(tuple(trial)))
