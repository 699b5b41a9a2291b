"""Empirical probes behind the two reuse conjectures.

1. Adjacent-step redundancy: the normalized L1 distance between attention
   maps at consecutive steps (per-row total variation, averaged over rows,
   so values land in [0,1]).
2. Perturbation decay: inject a norm-proportional perturbation into the
   pre-softmax logits at a single step and measure the L1 deviation of the
   final image; fit k1 * exp(-k2 * s). A positive k2 is the sign of a
   positive (attention-adapted) Lyapunov exponent, which is what makes
   late reuse cheap.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import l1_image_distance
from .model import ModelWeights, PromptSpec
from .numerics import ShapeMismatchError
from .sampler import SamplerConfig, sample


def attention_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-row total variation: 0.5 * sum_keys |a - b|, averaged over rows."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(
        0.5 * np.abs(a.astype(np.float64) - b.astype(np.float64)).sum(axis=-1).mean())


@dataclass
class SimilarityCurve:
    """d(A(s), A(s-1)) for s = 2..N, per site kind, over prompts and passes."""

    steps: list[int]
    mean: dict[str, np.ndarray]   # "self_attn"/"cross_attn" -> (N-1,)
    std: dict[str, np.ndarray]


def similarity_curve(weights: ModelWeights, config: SamplerConfig,
                     prompts: list[PromptSpec]) -> SimilarityCurve:
    if config.n_steps < 2:
        raise ValueError("similarity needs N >= 2")
    per_kind: dict[str, list[list[float]]] = {"self_attn": [], "cross_attn": []}
    for prompt in prompts:
        result = sample(weights, config, prompt)
        by_key: dict[tuple, dict[int, np.ndarray]] = {}
        for ob in result.observations:
            by_key.setdefault((ob.site.layer_id, ob.site.pass_id), {})[ob.step_index] = ob.map
        for (layer_id, _), maps in by_key.items():
            per_kind[layer_id].append(
                [attention_distance(maps[s], maps[s - 1])
                 for s in range(2, config.n_steps + 1)])
    steps = list(range(2, config.n_steps + 1))
    mean = {k: np.asarray(v).mean(axis=0) for k, v in per_kind.items()}
    std = {k: np.asarray(v).std(axis=0) for k, v in per_kind.items()}
    return SimilarityCurve(steps=steps, mean=mean, std=std)


@dataclass
class ExponentialFit:
    k1: float
    k2: float
    pearson_r: float
    window: tuple[int, int]


def fit_exponential(points: list[tuple[float, float]],
                    window: tuple[int, int] | None = None) -> ExponentialFit:
    """Least squares on (s, ln y): k2 = -slope, k1 = exp(intercept).

    pearson_r is computed between the data and the fitted curve in linear
    space. Degenerate zero-variance cases (constant data fit exactly) are
    reported as r = 1.
    """
    pts = sorted(points)
    if window is None:
        window = (math.floor(pts[0][0]), math.ceil(pts[-1][0]))
    in_window = [(s, y) for s, y in pts if window[0] <= s <= window[1]]
    if len(in_window) < 3:
        raise ValueError("need at least 3 points inside the fit window")
    s = np.array([p[0] for p in in_window], dtype=np.float64)
    y = np.array([p[1] for p in in_window], dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("fit requires positive values inside the window")
    slope, intercept = np.polyfit(s, np.log(y), 1)
    k2 = -slope
    k1 = float(np.exp(intercept))
    fitted = k1 * np.exp(-k2 * s)
    if np.std(y) < 1e-300 or np.std(fitted) < 1e-300:
        r = 1.0 if np.max(np.abs(y - fitted)) <= 1e-9 * max(1.0, np.max(np.abs(y))) else 0.0
    else:
        r = float(np.corrcoef(y, fitted)[0, 1])
    return ExponentialFit(k1=k1, k2=float(k2), pearson_r=r, window=window)


@dataclass
class PerturbationReport:
    steps: list[int]
    mean_dev: np.ndarray          # per-prompt min-max scaled, then averaged
    std_dev: np.ndarray
    raw_dev: np.ndarray           # (prompts, steps) unscaled L1 deviations
    eta: float
    fit: ExponentialFit | None


def perturbation_sweep(weights: ModelWeights, config: SamplerConfig,
                       prompts: list[PromptSpec], eta: float = 0.1,
                       fit_window: tuple[int, int] | None = None) -> PerturbationReport:
    """Perturb pre-softmax logits at each step in turn; measure final-image drift.

    The perturbation hits all four attention sites of the chosen step,
    matching the step granularity of the reuse vector. Deviations are
    min-max scaled to [0,1] per prompt before averaging.
    """
    if eta <= 0:
        raise ValueError("eta must be > 0")
    n = config.n_steps
    if fit_window is None:
        fit_window = (1, max(1, n - 2))
    raw = np.zeros((len(prompts), n))
    for i, prompt in enumerate(prompts):
        reference = sample(weights, config, prompt)
        for s in range(1, n + 1):
            perturbed = sample(weights, config, prompt,
                               perturb_step=s, perturb_eta=eta)
            raw[i, s - 1] = l1_image_distance(perturbed.image, reference.image)
    span = raw.max(axis=1) - raw.min(axis=1)
    span[span == 0] = 1.0
    scaled = (raw - raw.min(axis=1, keepdims=True)) / span[:, None]
    mean = scaled.mean(axis=0)
    std = scaled.std(axis=0)
    steps = list(range(1, n + 1))
    try:
        fit = fit_exponential(list(zip(steps, mean.tolist())), fit_window)
    except ValueError:
        fit = None
    return PerturbationReport(steps=steps, mean_dev=mean, std_dev=std,
                              raw_dev=raw, eta=eta, fit=fit)


# CSV / JSON emission --------------------------------------------------------

def write_similarity_csv(path, curve: SimilarityCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "site_kind", "mean", "std"])
        for kind in ("self_attn", "cross_attn"):
            for i, s in enumerate(curve.steps):
                writer.writerow([s, kind, f"{curve.mean[kind][i]:.8f}",
                                 f"{curve.std[kind][i]:.8f}"])


def write_perturbation_csv(path, report: PerturbationReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mean_dev", "std_dev", "fitted"])
        for i, s in enumerate(report.steps):
            fitted = ""
            if report.fit is not None:
                fitted = f"{report.fit.k1 * np.exp(-report.fit.k2 * s):.8f}"
            writer.writerow([s, f"{report.mean_dev[i]:.8f}",
                             f"{report.std_dev[i]:.8f}", fitted])


def fit_summary_json(report: PerturbationReport) -> str:
    payload = {"eta": report.eta}
    if report.fit is None:
        payload["fit"] = None
    else:
        payload["fit"] = {
            "k1": report.fit.k1,
            "k2": report.fit.k2,
            "pearson_r": report.fit.pearson_r,
            "window": list(report.fit.window),
        }
    return json.dumps(payload, indent=2)
