#!/usr/bin/env python3
"""Train the toy denoiser with the default configuration.

Usage: python scripts/train_toy.py [--seed N] [--out DIR] [--steps N]
Writes <out>/toy_seed<seed>.ckpt plus a metrics JSON next to it.
"""

import argparse
import json
from pathlib import Path

from reuselab.train import TrainConfig, train_toy


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("artifacts"))
    parser.add_argument("--steps", type=int, default=5000)
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / f"toy_seed{args.seed}.ckpt"
    config = TrainConfig(steps=args.steps)
    result = train_toy(config, seed=args.seed, checkpoint_path=ckpt)

    metrics = {
        "val_loss_initial": result.val_loss_initial,
        "val_loss_final": result.val_loss_final,
        "first_train_loss": result.losses[0] if result.losses else None,
        "final_train_loss": result.losses[-1] if result.losses else None,
        "steps": len(result.losses),
    }
    (args.out / f"toy_seed{args.seed}_metrics.json").write_text(
        json.dumps(metrics, indent=2))
    print(f"checkpoint: {ckpt}")
    print(f"val loss {result.val_loss_initial:.4f} -> {result.val_loss_final:.4f}")


if __name__ == "__main__":
    main()
