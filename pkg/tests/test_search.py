import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reuselab.reuse import InvalidStrategyError, StrategyVector
from reuselab.search import (
    BudgetExceededError,
    SearchConfig,
    SearchSafeguardError,
    bit_flip_set,
    exhaustive_search,
    hurry,
    neighborhood_size,
    phast_search,
    strategy_space_size,
)


def separable_utility(strategy):
    """Synthetic utility with a unique optimum: position-weighted ones.

    Reuse is cheapest late and at even positions; best strategy is exactly
    computable, so greedy search and exhaustive search can be compared.
    """
    score = 0.0
    for i, b in enumerate(strategy.bits):
        if b == 1:
            score += 10.0 - 0.5 * i + (0.3 if i % 2 == 0 else 0.0)
    return score


class TestHurry:
    def test_6_3(self):
        assert str(hurry(6, 3)) == "111000"

    def test_10_3(self):
        assert str(hurry(10, 3)) == "1111111000"

    def test_no_reuse_is_all_ones(self):
        assert hurry(20, 0) == StrategyVector.all_ones(20)

    def test_r_too_large(self):
        with pytest.raises(InvalidStrategyError):
            hurry(6, 6)


class TestBitFlipSet:
    def test_count_small(self):
        assert len(bit_flip_set(hurry(6, 3))) == neighborhood_size(6, 3) == 6

    def test_count_20_10(self):
        assert len(bit_flip_set(hurry(20, 10))) == 90
        assert neighborhood_size(20, 10, constrained=False) == 100

    def test_all_ones_has_no_neighbors(self):
        assert bit_flip_set(StrategyVector.all_ones(8)) == []

    @given(n=st.integers(3, 12), r_frac=st.floats(0.1, 0.9),
           seed=st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_neighbors_preserve_reuse_count_and_differ_in_two(self, n, r_frac, seed):
        r = max(1, min(n - 2, int(r_frac * n)))
        base = StrategyVector.random(n, r, seed)
        neighbors = bit_flip_set(base)
        assert len(neighbors) == len(set(neighbors))
        for nb in neighbors:
            assert nb.r == base.r
            assert sum(a != b for a, b in zip(nb.bits, base.bits)) == 2
            assert nb.bits[0] == 1


class TestCounting:
    def test_space_sizes(self):
        assert strategy_space_size(20, 10, constrained=False) == 184_756
        assert strategy_space_size(20, 10) == 92_378
        assert strategy_space_size(7, 3) == 20
        assert strategy_space_size(10, 3) == 84


class TestExhaustive:
    def test_enumerates_c_n_minus_1_r(self):
        ranked = exhaustive_search(7, 3, separable_utility)
        assert len(ranked) == 20
        assert len({s.bits for s, _ in ranked}) == 20
        for s, _ in ranked:
            assert s.bits[0] == 1 and s.r == 3

    def test_sorted_descending(self):
        ranked = exhaustive_search(8, 3, separable_utility)
        utilities = [u for _, u in ranked]
        assert utilities == sorted(utilities, reverse=True)

    def test_budget_guard(self):
        with pytest.raises(BudgetExceededError):
            exhaustive_search(20, 10, separable_utility, budget=1000)

    def test_r_zero_single_strategy(self):
        ranked = exhaustive_search(6, 0, separable_utility)
        assert len(ranked) == 1
        assert ranked[0][0] == StrategyVector.all_ones(6)


class TestGreedySearch:
    def test_reaches_exhaustive_optimum_on_separable_utility(self):
        report = phast_search(SearchConfig(10, 4, epsilon=1e-9), separable_utility)
        ranked = exhaustive_search(10, 4, separable_utility)
        assert report.best == ranked[0][0]
        assert report.optima[-1] == ranked[0][1]

    def test_large_epsilon_keeps_heuristic_start(self):
        report = phast_search(SearchConfig(10, 4, epsilon=1e9), separable_utility)
        assert report.best == hurry(10, 4)
        assert report.rounds == 1

    def test_optima_non_decreasing(self):
        report = phast_search(SearchConfig(12, 5, epsilon=0.01), separable_utility)
        assert all(b >= a for a, b in zip(report.optima, report.optima[1:]))

    def test_deterministic(self):
        a = phast_search(SearchConfig(10, 4, epsilon=0.01), separable_utility)
        b = phast_search(SearchConfig(10, 4, epsilon=0.01), separable_utility)
        assert a.best == b.best and a.optima == b.optima

    def test_best_at_least_heuristic(self):
        report = phast_search(SearchConfig(12, 6, epsilon=0.05), separable_utility)
        assert report.optima[-1] >= separable_utility(hurry(12, 6))

    def test_max_rounds_safeguard(self):
        counter = {"n": 0}

        def antagonist(strategy):
            # strictly improving forever: never converges
            counter["n"] += 1
            return float(counter["n"])

        with pytest.raises(SearchSafeguardError):
            phast_search(SearchConfig(8, 3, epsilon=0.0, max_rounds=3), antagonist)

    def test_report_serialization(self):
        report = phast_search(SearchConfig(8, 3, epsilon=0.01), separable_utility)
        summary = json.loads(report.summary_json())
        assert summary["best_strategy"] == str(report.best)
        lines = report.to_jsonl().strip().splitlines()
        assert len(lines) == report.evaluations
        first = json.loads(lines[0])
        assert first["strategy"] == str(hurry(8, 3))


class TestMemoization:
    def test_memo_returns_same_value_without_recompute(self, tiny_weights):
        from reuselab.sampler import SamplerConfig
        from reuselab.search import UtilityEvaluator
        from reuselab.model import PromptSpec

        evaluator = UtilityEvaluator(
            tiny_weights, SamplerConfig(n_steps=6, seed=0),
            [(PromptSpec("circle", "red"), 0)])
        s = StrategyVector.parse("110010")
        v1 = evaluator(s)
        n_after_first = evaluator.evaluations
        v2 = evaluator(s)
        assert v1 == v2
        assert evaluator.evaluations == n_after_first
        assert evaluator(s, fresh=True) == v1
