"""End-to-end acceptance gates for the reuse laboratory.

Each test prints one PASS/FAIL line for its criterion (run with -s or read
the captured output). Criteria cover: exact no-op reuse, cache provenance,
strategy-space counting, the latency model, greedy-vs-exhaustive search
quality, heuristic ordering on the trained model, perturbation decay,
cache-precision robustness, feature-level reuse reporting, and numerical
correctness of the training stack.
"""

import math

import numpy as np
import pytest

from reuselab.analysis import fit_exponential, perturbation_sweep
from reuselab.metrics import latency_estimate, psnr
from reuselab.model import NULL_TOKEN_ROW, PromptSpec, all_prompts
from reuselab.numerics import SeededRng, softmax_rows
from reuselab.ppm import write_ppm
from reuselab.reuse import ReuseConfig, StrategyVector
from reuselab.sampler import SamplerConfig, sample
from reuselab.search import (
    SearchConfig,
    UtilityEvaluator,
    bit_flip_set,
    exhaustive_search,
    hurry,
    neighborhood_size,
    phast_search,
    strategy_space_size,
)
from reuselab.train import generate_dataset, gradient_check

RED_CIRCLE = PromptSpec("circle", "red")

# Utility comparisons average PSNR over the full prompt set so that no
# single shape/color combination dominates the ordering.
EVAL_PAIRS = [(p, 0) for p in all_prompts()]


def _report(name: str, ok: bool, detail: str = ""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f" — {detail}"
    print(line)
    assert ok, line


def test_ac1_all_compute_reuse_is_exact_noop(trained_weights, tmp_path):
    """Reusing maps just written must reproduce the reference byte for byte."""
    worst = 100.0
    identical = True
    for prompt in all_prompts():
        for seed in (0, 1, 2):
            cfg = SamplerConfig(n_steps=20, seed=seed)
            ref = sample(trained_weights, cfg, prompt)
            ones = sample(trained_weights, cfg, prompt,
                          strategy=StrategyVector.all_ones(20))
            p_ref = tmp_path / f"ref_{prompt.label()}_{seed}.ppm"
            p_one = tmp_path / f"one_{prompt.label()}_{seed}.ppm"
            write_ppm(p_ref, ref.image)
            write_ppm(p_one, ones.image)
            identical &= p_ref.read_bytes() == p_one.read_bytes()
            worst = min(worst, psnr(ref.image, ones.image))
    _report("AC1 no-op reuse equivalence (9 prompts x 3 seeds)",
            identical and worst == 100.0,
            f"bytes identical={identical}, min PSNR={worst:.1f} dB")


def test_ac2_cache_provenance_worked_example(trained_weights):
    """Strategy 110010: steps 3-4 reuse the step-2 maps, step 6 the step-5 maps."""
    cfg = SamplerConfig(n_steps=6, seed=0)
    res = sample(trained_weights, cfg, RED_CIRCLE,
                 strategy=StrategyVector.parse("110010"))
    got = {}
    for ob in res.observations:
        got.setdefault(ob.step_index, set()).add(ob.provenance)
    expected = {1: {1}, 2: {2}, 3: {2}, 4: {2}, 5: {5}, 6: {5}}
    _report("AC2 cache provenance for strategy 110010", got == expected,
            f"provenance map {dict(sorted(got.items()))}")


def test_ac3_strategy_space_counting():
    checks = [
        strategy_space_size(20, 10, constrained=False) == 184_756,
        strategy_space_size(20, 10, constrained=True) == 92_378,
        neighborhood_size(20, 10, constrained=True) == 90,
        neighborhood_size(20, 10, constrained=False) == 100,
        len(bit_flip_set(hurry(20, 10))) == 90,
        all(strategy_space_size(n, r) == math.comb(n - 1, r)
            for n in range(2, 16) for r in range(0, n)),
    ]
    _report("AC3 strategy-space and neighborhood counts", all(checks),
            "C(20,10)=184756, C(19,10)=92378, |neighborhood|=90/100")


def test_ac4_latency_model():
    half = latency_estimate(hurry(20, 10))
    full13 = latency_estimate(StrategyVector.all_ones(13))
    _report("AC4 latency model", half == 3980.0 and full13 == 3952.0,
            f"20-step half-reuse={half:.0f} ms, 13-step full={full13:.0f} ms")


def test_ac5_greedy_search_vs_exhaustive(trained_weights):
    """N=8, r=3: greedy must end locally optimal and beat the median strategy."""

    def separable(strategy):
        return sum(10.0 - 0.5 * i + (0.3 if i % 2 == 0 else 0.0)
                   for i, b in enumerate(strategy.bits) if b == 1)

    synth_best = phast_search(SearchConfig(8, 3, epsilon=1e-9), separable).best
    synth_opt = exhaustive_search(8, 3, separable)[0][0]

    epsilon = 0.05
    evaluator = UtilityEvaluator(trained_weights, SamplerConfig(n_steps=8, seed=0),
                                 EVAL_PAIRS)
    report = phast_search(SearchConfig(8, 3, epsilon=epsilon), evaluator)
    ranked = exhaustive_search(8, 3, evaluator)
    utilities = [u for _, u in ranked]
    median = sorted(utilities)[len(utilities) // 2]
    best_u = evaluator(report.best)
    locally_opt = all(evaluator(nb) <= best_u + epsilon
                      for nb in bit_flip_set(report.best))
    ok = (len(ranked) == 35 and synth_best == synth_opt
          and best_u >= median and locally_opt)
    _report("AC5 greedy search quality at N=8, r=3", ok,
            f"|space|={len(ranked)}, greedy={best_u:.2f} dB, "
            f"median={median:.2f} dB, top={utilities[0]:.2f} dB, "
            f"synthetic optimum matched={synth_best == synth_opt}")


def test_ac6_late_reuse_beats_early_and_random(trained_weights):
    """At N=20, r=10 the late-reuse schedule must beat early and random reuse."""
    evaluator = UtilityEvaluator(
        trained_weights, SamplerConfig(n_steps=20, seed=0), EVAL_PAIRS)
    late = evaluator(hurry(20, 10))
    early = evaluator(StrategyVector((1,) + (0,) * 10 + (1,) * 9))
    rand = evaluator(StrategyVector.random(20, 10, seed=0))
    ok = late > early and late > rand
    _report("AC6 late reuse beats early/random reuse", ok,
            f"late={late:.2f} dB, early={early:.2f} dB, random={rand:.2f} dB")


def test_ac7_perturbation_decay(trained_weights):
    synth = fit_exponential([(s, 2.0 * math.exp(-0.3 * s)) for s in range(1, 19)])
    synth_ok = (abs(synth.k1 - 2.0) < 1e-6 and abs(synth.k2 - 0.3) < 1e-6
                and synth.pearson_r > 1 - 1e-9)

    prompts = [RED_CIRCLE, PromptSpec("square", "blue"), PromptSpec("cross", "green")]
    report = perturbation_sweep(trained_weights, SamplerConfig(n_steps=20, seed=0),
                                prompts, eta=0.1)
    fit = report.fit
    decay_ok = fit is not None and fit.k2 > 0
    ok = synth_ok and decay_ok
    detail = (f"synthetic fit exact={synth_ok}; "
              f"trained k2={fit.k2:.4f}, r={fit.pearson_r:.3f}" if fit else
              "trained fit failed")
    if fit is not None and fit.pearson_r < 0.8:
        detail += " [FLAG: pearson r below 0.8, decay not cleanly exponential]"
    _report("AC7 perturbation influence decays with step index", ok, detail)


@pytest.fixture(scope="module")
def searched_strategy(trained_weights):
    evaluator = UtilityEvaluator(trained_weights, SamplerConfig(n_steps=20, seed=0),
                                 EVAL_PAIRS)
    return phast_search(SearchConfig(20, 10, epsilon=0.05), evaluator).best


def _mean_psnr(weights, strategy, reuse_config):
    vals = []
    for prompt, seed in EVAL_PAIRS:
        cfg = SamplerConfig(n_steps=20, seed=seed)
        ref = sample(weights, cfg, prompt).image
        img = sample(weights, cfg, prompt, strategy=strategy,
                     reuse_config=reuse_config).image
        vals.append(psnr(img, ref))
    return float(np.mean(vals))


def test_ac8_cache_precision_robustness(trained_weights, searched_strategy):
    f32 = _mean_psnr(trained_weights, searched_strategy, ReuseConfig(precision="f32"))
    f16 = _mean_psnr(trained_weights, searched_strategy, ReuseConfig(precision="f16"))
    i8 = _mean_psnr(trained_weights, searched_strategy, ReuseConfig(precision="i8"))
    ok = abs(f16 - f32) <= 0.5 and abs(i8 - f32) <= 2.0
    _report("AC8 cache precision robustness (searched strategy, N=20 r=10)", ok,
            f"f32={f32:.2f} dB, f16={f16:.2f} dB, i8={i8:.2f} dB")


def test_ac9_feature_reuse_report(trained_weights, searched_strategy):
    """Feature-level reuse is reported alongside map-level reuse, not gated."""
    rows = {}
    for name, strategy in (("late", hurry(20, 10)), ("searched", searched_strategy)):
        rows[name] = {
            "maps": _mean_psnr(trained_weights, strategy,
                               ReuseConfig(target="attention_maps")),
            "features": _mean_psnr(trained_weights, strategy,
                                   ReuseConfig(target="features")),
        }
    ok = all(np.isfinite(v) for row in rows.values() for v in row.values())
    detail = "; ".join(f"{k}: maps={v['maps']:.2f} dB, features={v['features']:.2f} dB"
                       for k, v in rows.items())
    _report("AC9 feature-vs-map reuse fidelity report", ok, detail)


def test_ac10_numerical_correctness(tiny_weights):
    # analytic gradients vs float64 central differences
    data = generate_dataset(4, seed=0)
    x = (np.stack([d[0] for d in data]) * 2.0 - 1.0).astype(np.float32)
    rows = np.stack([d[1].token_rows() for d in data]).astype(np.int64)
    rows[0] = (NULL_TOKEN_ROW, NULL_TOKEN_ROW)
    t_idx = np.array([100, 400, 700, 1000])
    target = SeededRng(33).gaussian((4, 3, 16, 16))
    rel = gradient_check(tiny_weights, x, t_idx, rows, target)
    grad_ok = max(rel.values()) <= 1e-2

    # softmax rows sum to one across magnitudes
    logits = SeededRng(9).gaussian((64, 64)) * np.float32(30.0)
    sm = softmax_rows(logits)
    softmax_ok = bool(np.max(np.abs(sm.sum(axis=-1) - 1.0)) <= 1e-6)

    # map distance behaves as a metric on 1000 random triples
    from reuselab.analysis import attention_distance
    rng = SeededRng(4)
    metric_ok = True
    for _ in range(1000):
        logits = rng.gaussian((3, 5, 4)).astype(np.float64)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        a, b, c = e / e.sum(axis=-1, keepdims=True)
        dab = attention_distance(a, b)
        metric_ok &= 0.0 <= dab <= 1.0
        metric_ok &= dab == attention_distance(b, a)
        metric_ok &= dab <= (attention_distance(a, c)
                             + attention_distance(c, b) + 1e-12)
    _report("AC10 numerical correctness (gradients, softmax, map metric)",
            grad_ok and softmax_ok and metric_ok,
            f"max grad rel err={max(rel.values()):.2e}, "
            f"softmax ok={softmax_ok}, metric axioms ok={metric_ok}")
