"""Strategy construction and search: the late-reuse heuristic, greedy
bit-flip refinement of it, and the exhaustive oracle for small spaces.

The greedy search starts from the heuristic schedule (all reuse steps at
the end), scans the one-bit-flip neighborhood in a fixed lexicographic
order, accepts any strategy beating the round's optimum by more than
epsilon, and stops when a full round changes nothing. It is deterministic
by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

from .metrics import psnr
from .model import ModelWeights, PromptSpec
from .reuse import InvalidStrategyError, ReuseConfig, StrategyVector
from .sampler import SamplerConfig, sample


class BudgetExceededError(RuntimeError):
    pass


class SearchSafeguardError(RuntimeError):
    """max_rounds exhausted before the stop rule fired."""


def hurry(n: int, r: int) -> StrategyVector:
    """N-r compute steps followed by r reuse steps."""
    if not 0 <= r <= n - 1:
        raise InvalidStrategyError(f"need 0 <= r <= n-1, got n={n} r={r}")
    return StrategyVector((1,) * (n - r) + (0,) * r)


def bit_flip_set(strategy: StrategyVector) -> list[StrategyVector]:
    """All swaps of one compute step (never the first) with one reuse step.

    Each neighbor keeps the same reuse count and differs from its parent
    in exactly two positions. Order is lexicographic by (one-index,
    zero-index), which fixes the greedy scan order.
    """
    ones = [i for i, b in enumerate(strategy.bits) if b == 1 and i != 0]
    zeros = [i for i, b in enumerate(strategy.bits) if b == 0]
    neighbors = []
    for i in ones:
        for j in zeros:
            bits = list(strategy.bits)
            bits[i], bits[j] = 0, 1
            neighbors.append(StrategyVector(tuple(bits)))
    return neighbors


def neighborhood_size(n: int, r: int, constrained: bool = True) -> int:
    """(N-r-1)*r with the first-step constraint; (N-r)*r without."""
    return (n - r - 1) * r if constrained else (n - r) * r


def strategy_space_size(n: int, r: int, constrained: bool = True) -> int:
    """C(N-1, r) with the first step pinned to compute; C(N, r) without."""
    return math.comb(n - 1, r) if constrained else math.comb(n, r)


class UtilityEvaluator:
    """Mean PSNR of a strategy run against per-(prompt, seed) references.

    References are computed once; utilities are memoized by strategy bits.
    """

    def __init__(self, weights: ModelWeights, config: SamplerConfig,
                 prompt_seeds: list[tuple[PromptSpec, int]],
                 reuse_config: ReuseConfig | None = None):
        self.weights = weights
        self.config = config
        self.prompt_seeds = prompt_seeds
        self.reuse_config = reuse_config or ReuseConfig()
        self._references = {}
        for prompt, seed in prompt_seeds:
            cfg = SamplerConfig(config.n_steps, config.solver,
                                config.guidance_scale, seed)
            self._references[(prompt, seed)] = sample(weights, cfg, prompt).image
        self._memo: dict[tuple[int, ...], float] = {}
        self.evaluations = 0

    def evaluate(self, strategy: StrategyVector, fresh: bool = False) -> float:
        if not fresh and strategy.bits in self._memo:
            return self._memo[strategy.bits]
        total = 0.0
        for prompt, seed in self.prompt_seeds:
            cfg = SamplerConfig(self.config.n_steps, self.config.solver,
                                self.config.guidance_scale, seed)
            image = sample(self.weights, cfg, prompt, strategy=strategy,
                           reuse_config=self.reuse_config).image
            total += psnr(image, self._references[(prompt, seed)])
        value = total / len(self.prompt_seeds)
        self._memo[strategy.bits] = value
        self.evaluations += 1
        return value

    __call__ = evaluate


def evaluate_utility(strategy: StrategyVector, weights: ModelWeights,
                     config: SamplerConfig,
                     prompt_seeds: list[tuple[PromptSpec, int]],
                     reuse_config: ReuseConfig | None = None) -> float:
    return UtilityEvaluator(weights, config, prompt_seeds, reuse_config).evaluate(strategy)


@dataclass
class SearchConfig:
    n: int
    r: int
    epsilon: float = 0.05       # dB; blocks insignificant bit-flip rounds
    max_rounds: int = 64

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0 <= self.r <= self.n - 1:
            raise ValueError(f"need 0 <= r <= n-1, got n={self.n} r={self.r}")


@dataclass
class EvalRecord:
    strategy: StrategyVector
    utility: float
    round: int
    accepted: bool


@dataclass
class SearchReport:
    best: StrategyVector
    optima: list[float]          # Optima(0..Run)
    log: list[EvalRecord]
    rounds: int
    evaluations: int

    def to_jsonl(self) -> str:
        lines = [json.dumps({"strategy": str(rec.strategy),
                             "utility_db": rec.utility,
                             "round": rec.round,
                             "accepted": rec.accepted})
                 for rec in self.log]
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        return json.dumps({
            "best_strategy": str(self.best),
            "best_utility_db": self.optima[-1],
            "optima": self.optima,
            "rounds": self.rounds,
            "evaluations": self.evaluations,
        }, indent=2)


def phast_search(config: SearchConfig,
                 utility: Callable[[StrategyVector], float]) -> SearchReport:
    """Greedy bit-flip local search seeded at the late-reuse heuristic.

    Each round scans the neighborhood snapshot of the round's starting
    strategy in fixed order, accepting anything that beats the running
    optimum by more than epsilon; terminates when a round leaves the
    optimum unchanged.
    """
    best = hurry(config.n, config.r)
    optima = [float(utility(best))]
    log = [EvalRecord(best, optima[0], 0, True)]
    run = 0
    while True:
        run += 1
        if run > config.max_rounds:
            raise SearchSafeguardError(
                f"no convergence within {config.max_rounds} rounds")
        optimum = optima[-1]
        start_optimum = optimum
        for candidate in bit_flip_set(best):
            value = float(utility(candidate))
            accepted = bool(value > optimum + config.epsilon)
            log.append(EvalRecord(candidate, value, run, accepted))
            if accepted:
                best = candidate
                optimum = value
        optima.append(optimum)
        if optimum == start_optimum:
            break
    return SearchReport(best=best, optima=optima, log=log, rounds=run,
                        evaluations=len(log))


def exhaustive_search(n: int, r: int,
                      utility: Callable[[StrategyVector], float],
                      budget: int = 100_000) -> list[tuple[StrategyVector, float]]:
    """Evaluate every valid strategy (first step computes); rank by utility.

    Ties break lexicographically on the bitstring. Raises if the space
    exceeds the budget.
    """
    import itertools

    space = strategy_space_size(n, r)
    if space > budget:
        raise BudgetExceededError(
            f"{space} strategies exceed the budget of {budget}")
    ranked = []
    for zeros in itertools.combinations(range(1, n), r):
        zs = set(zeros)
        strategy = StrategyVector(tuple(0 if i in zs else 1 for i in range(n)))
        ranked.append((strategy, utility(strategy)))
    ranked.sort(key=lambda item: (-item[1], item[0].bits))
    return ranked
