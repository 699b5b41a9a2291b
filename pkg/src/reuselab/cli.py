"""Command-line surface.

Subcommands: train | sample | similarity | perturb | search | exhaustive
| compare. Config files are flat UTF-8 key=value lines with '#' comments;
unknown keys are rejected. Every run writes its fully-resolved config next
to its outputs so artifacts alone reproduce the run.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 budget exceeded,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, ppm, search as search_mod
from .metrics import CostModel, latency_estimate, psnr
from .model import NumericError, PromptSpec, all_prompts
from .reuse import InvalidStrategyError, ReuseConfig, StrategyVector
from .sampler import SamplerConfig, sample
from .search import BudgetExceededError, SearchConfig, UtilityEvaluator
from .train import TrainConfig, TrainingDivergedError, train_toy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_BUDGET = 4
EXIT_NUMERIC = 5


class ConfigError(ValueError):
    pass


_COMMON_KEYS = {
    "checkpoint": str,
    "n_steps": int,
    "solver": str,
    "guidance_scale": float,
    "seed": int,
    "seeds": str,
    "prompts": str,
}
_COST_KEYS = {"full_call_ms": float, "reuse_call_ms": float, "passes_per_step": int}
_REUSE_KEYS = {"precision": str, "target": str}

COMMAND_KEYS: dict[str, dict[str, type]] = {
    "train": {"seed": int, "checkpoint": str, "train_steps": int,
              "batch_size": int, "dataset_size": int, "lr": float,
              "null_prob": float, "val_size": int},
    "sample": {**_COMMON_KEYS, **_COST_KEYS, **_REUSE_KEYS, "strategy": str},
    "similarity": {**_COMMON_KEYS},
    "perturb": {**_COMMON_KEYS, "eta": float, "fit_lo": int, "fit_hi": int},
    "search": {**_COMMON_KEYS, **_REUSE_KEYS, "reuse_steps": int,
               "epsilon": float, "max_rounds": int},
    "exhaustive": {**_COMMON_KEYS, **_REUSE_KEYS, "reuse_steps": int,
                   "budget": int},
    "compare": {**_COMMON_KEYS, **_COST_KEYS, **_REUSE_KEYS, "reuse_steps": int,
                "epsilon": float, "phast_strategy": str},
}

DEFAULTS = {
    "n_steps": 20,
    "solver": "ddim",
    "guidance_scale": 3.0,
    "seed": 0,
    "prompts": "circle:red",
    "precision": "f32",
    "target": "attention_maps",
    "eta": 0.1,
    "epsilon": 0.05,
    "max_rounds": 64,
    "budget": 100000,
    "train_steps": 5000,
    "batch_size": 32,
    "dataset_size": 2048,
    "lr": 2e-3,
    "null_prob": 0.1,
    "val_size": 256,
}


def parse_config_file(path: Path) -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(command: str, file_values: dict[str, str],
                   overrides: dict[str, str]) -> dict:
    schema = COMMAND_KEYS[command]
    merged = dict(file_values)
    merged.update(overrides)
    for key in merged:
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} for command {command!r}")
    resolved = {}
    for key, typ in schema.items():
        if key in merged:
            try:
                resolved[key] = typ(merged[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {merged[key]!r}") from exc
        elif key in DEFAULTS:
            resolved[key] = DEFAULTS[key]
    return resolved


def parse_prompts(spec: str) -> list[PromptSpec]:
    if spec.strip() == "all":
        return all_prompts()
    prompts = []
    for item in spec.split(","):
        item = item.strip()
        if ":" not in item:
            raise ConfigError(f"bad prompt {item!r}; use shape:color or 'all'")
        shape, color = item.split(":", 1)
        try:
            prompts.append(PromptSpec(shape.strip(), color.strip()))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not prompts:
        raise ConfigError("no prompts given")
    return prompts


def parse_seeds(cfg: dict) -> list[int]:
    if cfg.get("seeds"):
        try:
            return [int(s) for s in str(cfg["seeds"]).split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad seeds list {cfg['seeds']!r}") from exc
    return [int(cfg.get("seed", 0))]


def write_resolved_config(out_dir: Path, command: str, cfg: dict) -> None:
    lines = [f"command={command}"]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / f"{command}_config.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(cfg: dict):
    path = cfg.get("checkpoint")
    if not path:
        raise FileNotFoundError("no checkpoint configured")
    return checkpoint.load_weights(path)


def cost_model_from(cfg: dict) -> CostModel:
    kwargs = {k: cfg[k] for k in _COST_KEYS if k in cfg}
    return CostModel(**kwargs)


def reuse_config_from(cfg: dict) -> ReuseConfig:
    try:
        return ReuseConfig(target=cfg.get("target", "attention_maps"),
                           precision=cfg.get("precision", "f32"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def sampler_config_from(cfg: dict, seed: int) -> SamplerConfig:
    try:
        return SamplerConfig(n_steps=int(cfg["n_steps"]), solver=cfg["solver"],
                             guidance_scale=float(cfg["guidance_scale"]), seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# Commands -------------------------------------------------------------------

def cmd_train(cfg: dict, out_dir: Path) -> int:
    ckpt = cfg.get("checkpoint") or str(out_dir / "toy.ckpt")
    cfg["checkpoint"] = ckpt
    train_cfg = TrainConfig(steps=cfg["train_steps"], batch_size=cfg["batch_size"],
                            dataset_size=cfg["dataset_size"], lr=cfg["lr"],
                            null_prob=cfg["null_prob"], val_size=cfg["val_size"])
    result = train_toy(train_cfg, seed=cfg["seed"], checkpoint_path=ckpt)
    (out_dir / "train_metrics.json").write_text(json.dumps({
        "val_loss_initial": result.val_loss_initial,
        "val_loss_final": result.val_loss_final,
        "final_train_loss": result.losses[-1] if result.losses else None,
        "steps": len(result.losses),
        "checkpoint": str(ckpt),
    }, indent=2))
    print(f"checkpoint written to {ckpt} "
          f"(val loss {result.val_loss_initial:.4f} -> {result.val_loss_final:.4f})")
    return EXIT_OK


def cmd_sample(cfg: dict, out_dir: Path) -> int:
    weights = load_checkpoint(cfg)
    prompts = parse_prompts(cfg["prompts"])
    seeds = parse_seeds(cfg)
    strategy = None
    if cfg.get("strategy"):
        strategy = StrategyVector.parse(cfg["strategy"])
    reuse_cfg = reuse_config_from(cfg)
    cost_model = cost_model_from(cfg)
    costs = {}
    for prompt in prompts:
        for seed in seeds:
            result = sample(weights, sampler_config_from(cfg, seed), prompt,
                            strategy=strategy, reuse_config=reuse_cfg,
                            cost_model=cost_model)
            name = f"sample_{prompt.shape}_{prompt.color}_seed{seed}"
            ppm.write_ppm(out_dir / f"{name}.ppm", result.image)
            costs[name] = {
                "full_steps": result.cost.full_steps,
                "reuse_steps": result.cost.reuse_steps,
                "estimated_ms": result.cost.estimated_ms,
                "cache_bytes": result.cost.cache_bytes,
            }
    (out_dir / "cost.json").write_text(json.dumps(costs, indent=2))
    return EXIT_OK


def cmd_similarity(cfg: dict, out_dir: Path) -> int:
    weights = load_checkpoint(cfg)
    prompts = parse_prompts(cfg["prompts"])
    curve = analysis.similarity_curve(
        weights, sampler_config_from(cfg, cfg["seed"]), prompts)
    analysis.write_similarity_csv(out_dir / "similarity.csv", curve)
    summary = {kind: {"mean_of_means": float(np.mean(curve.mean[kind])),
                      "max_mean": float(np.max(curve.mean[kind]))}
               for kind in curve.mean}
    (out_dir / "similarity_summary.json").write_text(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_perturb(cfg: dict, out_dir: Path) -> int:
    weights = load_checkpoint(cfg)
    prompts = parse_prompts(cfg["prompts"])
    window = None
    if "fit_lo" in cfg and "fit_hi" in cfg:
        window = (cfg["fit_lo"], cfg["fit_hi"])
    report = analysis.perturbation_sweep(
        weights, sampler_config_from(cfg, cfg["seed"]), prompts,
        eta=cfg["eta"], fit_window=window)
    analysis.write_perturbation_csv(out_dir / "perturbation.csv", report)
    (out_dir / "fit.json").write_text(analysis.fit_summary_json(report))
    return EXIT_OK


def _evaluator(cfg: dict, weights) -> UtilityEvaluator:
    prompts = parse_prompts(cfg["prompts"])
    seeds = parse_seeds(cfg)
    prompt_seeds = [(p, s) for p in prompts for s in seeds]
    return UtilityEvaluator(weights, sampler_config_from(cfg, seeds[0]),
                            prompt_seeds, reuse_config_from(cfg))


def cmd_search(cfg: dict, out_dir: Path) -> int:
    weights = load_checkpoint(cfg)
    if "reuse_steps" not in cfg:
        raise ConfigError("search needs reuse_steps")
    evaluator = _evaluator(cfg, weights)
    try:
        search_cfg = SearchConfig(n=cfg["n_steps"], r=cfg["reuse_steps"],
                                  epsilon=cfg["epsilon"],
                                  max_rounds=cfg["max_rounds"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = search_mod.phast_search(search_cfg, evaluator)
    (out_dir / "search_log.jsonl").write_text(report.to_jsonl())
    (out_dir / "search_report.json").write_text(report.summary_json())
    print(f"best strategy {report.best} "
          f"utility {report.optima[-1]:.2f} dB in {report.rounds} rounds")
    return EXIT_OK


def cmd_exhaustive(cfg: dict, out_dir: Path) -> int:
    weights = load_checkpoint(cfg)
    if "reuse_steps" not in cfg:
        raise ConfigError("exhaustive needs reuse_steps")
    evaluator = _evaluator(cfg, weights)
    ranked = search_mod.exhaustive_search(cfg["n_steps"], cfg["reuse_steps"],
                                          evaluator, budget=cfg["budget"])
    with open(out_dir / "exhaustive.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "strategy", "utility_db"])
        for rank, (strategy, value) in enumerate(ranked, 1):
            writer.writerow([rank, str(strategy), f"{value:.6f}"])
    return EXIT_OK


def cmd_compare(cfg: dict, out_dir: Path) -> int:
    """Reference vs late-reuse heuristic vs searched strategy vs a
    step-reduced sampler of matched latency."""
    weights = load_checkpoint(cfg)
    if "reuse_steps" not in cfg:
        raise ConfigError("compare needs reuse_steps")
    n, r = cfg["n_steps"], cfg["reuse_steps"]
    cost_model = cost_model_from(cfg)
    evaluator = _evaluator(cfg, weights)

    hurry_strategy = search_mod.hurry(n, r)
    if cfg.get("phast_strategy"):
        phast_strategy = StrategyVector.parse(cfg["phast_strategy"])
        if phast_strategy.n != n:
            raise ConfigError("phast_strategy length != n_steps")
    else:
        search_cfg = SearchConfig(n=n, r=r, epsilon=cfg["epsilon"])
        phast_strategy = search_mod.phast_search(search_cfg, evaluator).best

    reuse_latency = latency_estimate(hurry_strategy, cost_model)
    n_reduced = min(range(1, n + 1),
                    key=lambda k: abs(latency_estimate(
                        StrategyVector.all_ones(k), cost_model) - reuse_latency))
    reduced_psnrs = []
    for prompt, seed in evaluator.prompt_seeds:
        cfg_red = SamplerConfig(n_reduced, cfg["solver"], cfg["guidance_scale"], seed)
        image = sample(weights, cfg_red, prompt).image
        reduced_psnrs.append(psnr(image, evaluator._references[(prompt, seed)]))

    report = {
        "reference": {"n_steps": n, "psnr_db": None,
                      "latency_ms": latency_estimate(StrategyVector.all_ones(n), cost_model)},
        "hurry": {"strategy": str(hurry_strategy),
                  "psnr_db": evaluator.evaluate(hurry_strategy),
                  "latency_ms": latency_estimate(hurry_strategy, cost_model)},
        "phast": {"strategy": str(phast_strategy),
                  "psnr_db": evaluator.evaluate(phast_strategy),
                  "latency_ms": latency_estimate(phast_strategy, cost_model)},
        "reduced": {"n_steps": n_reduced,
                    "psnr_db": float(np.mean(reduced_psnrs)),
                    "latency_ms": latency_estimate(
                        StrategyVector.all_ones(n_reduced), cost_model)},
    }
    (out_dir / "compare.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "similarity": cmd_similarity,
    "perturb": cmd_perturb,
    "search": cmd_search,
    "exhaustive": cmd_exhaustive,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reuselab",
        description="Attention-map reuse laboratory for a toy diffusion sampler")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=Path("out"))
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key] = value
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = resolve_config(args.command, file_values, overrides)
        args.out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, args.out)
        write_resolved_config(args.out, args.command, cfg)
        return code
    except (ConfigError, InvalidStrategyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, checkpoint.CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except BudgetExceededError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (NumericError, TrainingDivergedError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
