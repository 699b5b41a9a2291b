#!/usr/bin/env python3
"""Strategy comparison on a trained checkpoint.

Evaluates the late-reuse heuristic, a greedy bit-flip search seeded from
it, a seed-0 random schedule, and a step-reduced sampler of matched
latency, all against the full-compute reference. Prints a small table and
writes comparison.json.

Usage: python scripts/run_comparison.py --checkpoint artifacts/toy_seed0.ckpt
"""

import argparse
import json
from pathlib import Path

import numpy as np

from reuselab.checkpoint import load_weights
from reuselab.metrics import latency_estimate, psnr
from reuselab.model import all_prompts
from reuselab.reuse import StrategyVector
from reuselab.sampler import SamplerConfig, sample
from reuselab.search import SearchConfig, UtilityEvaluator, hurry, phast_search


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", type=Path,
                        default=Path("artifacts/toy_seed0.ckpt"))
    parser.add_argument("--out", type=Path, default=Path("out/comparison"))
    parser.add_argument("--n-steps", type=int, default=20)
    parser.add_argument("--reuse-steps", type=int, default=10)
    parser.add_argument("--epsilon", type=float, default=0.05)
    args = parser.parse_args()

    weights = load_weights(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    n, r = args.n_steps, args.reuse_steps
    pairs = [(p, 0) for p in all_prompts()]
    evaluator = UtilityEvaluator(weights, SamplerConfig(n_steps=n, seed=0), pairs)

    late = hurry(n, r)
    report = phast_search(SearchConfig(n, r, epsilon=args.epsilon), evaluator)
    random_strategy = StrategyVector.random(n, r, seed=0)

    reuse_latency = latency_estimate(late)
    n_reduced = min(range(1, n + 1),
                    key=lambda k: abs(latency_estimate(StrategyVector.all_ones(k))
                                      - reuse_latency))
    reduced = float(np.mean([
        psnr(sample(weights, SamplerConfig(n_reduced, seed=seed), prompt).image,
             evaluator._references[(prompt, seed)])
        for prompt, seed in pairs]))

    rows = {
        "late_reuse": (str(late), evaluator(late), latency_estimate(late)),
        "searched": (str(report.best), report.optima[-1],
                     latency_estimate(report.best)),
        "random": (str(random_strategy), evaluator(random_strategy),
                   latency_estimate(random_strategy)),
        f"reduced_{n_reduced}_steps": ("1" * n_reduced, reduced,
                                       latency_estimate(StrategyVector.all_ones(n_reduced))),
    }
    print(f"{'variant':<18} {'strategy':<22} {'PSNR dB':>8} {'latency ms':>11}")
    for name, (strategy, value, ms) in rows.items():
        print(f"{name:<18} {strategy:<22} {value:>8.2f} {ms:>11.0f}")

    (args.out / "comparison.json").write_text(json.dumps(
        {name: {"strategy": s, "psnr_db": v, "latency_ms": ms}
         for name, (s, v, ms) in rows.items()}, indent=2))
    print(f"written to {args.out / 'comparison.json'}")


if __name__ == "__main__":
    main()
