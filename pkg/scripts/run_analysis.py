#!/usr/bin/env python3
"""Empirical probes on a trained checkpoint.

Runs the adjacent-step attention-similarity curve and the single-step
perturbation sweep over all nine prompts, writes CSVs plus the
exponential-fit summary, and prints the fitted decay constants.

Usage: python scripts/run_analysis.py --checkpoint artifacts/toy_seed0.ckpt
"""

import argparse
from pathlib import Path

from reuselab.analysis import (
    fit_summary_json,
    perturbation_sweep,
    similarity_curve,
    write_perturbation_csv,
    write_similarity_csv,
)
from reuselab.checkpoint import load_weights
from reuselab.model import all_prompts
from reuselab.sampler import SamplerConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", type=Path,
                        default=Path("artifacts/toy_seed0.ckpt"))
    parser.add_argument("--out", type=Path, default=Path("out/analysis"))
    parser.add_argument("--n-steps", type=int, default=20)
    parser.add_argument("--eta", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    weights = load_weights(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    config = SamplerConfig(n_steps=args.n_steps, seed=args.seed)
    prompts = all_prompts()

    curve = similarity_curve(weights, config, prompts)
    write_similarity_csv(args.out / "similarity.csv", curve)
    print(f"similarity curve written; mean self-attn distance "
          f"{float(curve.mean['self_attn'].mean()):.4f}")

    report = perturbation_sweep(weights, config, prompts, eta=args.eta)
    write_perturbation_csv(args.out / "perturbation.csv", report)
    (args.out / "fit.json").write_text(fit_summary_json(report))
    if report.fit is not None:
        print(f"perturbation decay: k1={report.fit.k1:.4f} "
              f"k2={report.fit.k2:.4f} pearson_r={report.fit.pearson_r:.3f}")
    else:
        print("perturbation decay: fit failed (non-positive values in window)")


if __name__ == "__main__":
    main()
