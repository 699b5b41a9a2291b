"""Discrete reverse-diffusion solvers orchestrating per-step reuse directives.

Indexing follows the reuse semantics: the trajectory runs x_0 (Gaussian
noise) through x_N (the sample); step s in {1..N} evaluates the denoiser
at timestep t_s and advances to t_{s+1}, with t_{N+1} = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import CostModel, CostTally, latency_estimate
from .model import (
    IMG_SHAPE,
    T_TRAIN,
    AttentionDirective,
    AttentionObservation,
    Compute,
    ModelWeights,
    PerturbLogits,
    PromptSpec,
    Reuse,
    cfg_predict,
)
from .numerics import SeededRng
from .reuse import AttentionCache, InvalidStrategyError, ReuseConfig, StrategyVector, cache_memory_bytes

X0_CLAMP = 1.5  # x0-estimate clamp, in model space [-1, 1]

SOLVERS = ("ddim", "multistep2")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta discrete schedule; alpha_bar[0] = 1 by convention."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray  # length T_TRAIN + 1, indexed by timestep

    @property
    def t_train(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])


def make_schedule(t_train: int = T_TRAIN, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def timestep_map(n_steps: int, t_train: int = T_TRAIN) -> np.ndarray:
    """Uniform stride from t_train down to 1, strictly decreasing ints."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    ts = np.rint(np.linspace(t_train, 1, n_steps)).astype(int)
    if np.any(np.diff(ts) >= 0):
        raise ValueError(f"timestep map not strictly decreasing for N={n_steps}")
    return ts


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int
    solver: str = "ddim"
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def timesteps(self) -> np.ndarray:
        return timestep_map(self.n_steps)


@dataclass
class SampleResult:
    image: np.ndarray                      # [0,1], shape (3,16,16)
    trajectory: list[np.ndarray]           # length N+1, x_0 noise .. x_N sample
    observations: list[AttentionObservation]
    cost: CostTally


def ddim_step(x_t: np.ndarray, eps: np.ndarray, t_now: int, t_next: int,
              schedule: NoiseSchedule, clamp: bool = True) -> np.ndarray:
    """Deterministic (eta=0) update from timestep t_now to t_next."""
    if not t_now >= t_next >= 0:
        raise ValueError(f"need t_now >= t_next >= 0, got {t_now} -> {t_next}")
    ab_now = schedule.alpha_bar(t_now)
    ab_next = schedule.alpha_bar(t_next)
    x0_hat = (x_t - np.float32(np.sqrt(1.0 - ab_now)) * eps) / np.float32(np.sqrt(ab_now))
    if clamp:
        x0_hat = np.clip(x0_hat, -X0_CLAMP, X0_CLAMP)
    return np.float32(np.sqrt(ab_next)) * x0_hat + np.float32(np.sqrt(1.0 - ab_next)) * eps


def extrapolate_midpoint_eps(eps_now: np.ndarray, eps_prev: np.ndarray,
                             t_now: float, t_prev: float, t_next: float) -> np.ndarray:
    """Two-point linear extrapolation of eps to the midpoint of [t_next, t_now]."""
    t_mid = 0.5 * (t_now + t_next)
    slope_scale = (t_mid - t_now) / (t_now - t_prev)
    return eps_now + np.float32(slope_scale) * (eps_now - eps_prev)


def multistep2_step(x_t: np.ndarray, eps: np.ndarray, t_now: int, t_next: int,
                    schedule: NoiseSchedule,
                    eps_prev: np.ndarray | None = None,
                    t_prev: int | None = None) -> np.ndarray:
    """Second-order linear multistep on eps; falls back to DDIM on step one."""
    if eps_prev is None or t_prev is None:
        return ddim_step(x_t, eps, t_now, t_next, schedule)
    eps_mid = extrapolate_midpoint_eps(eps, eps_prev, t_now, t_prev, t_next)
    return ddim_step(x_t, eps_mid, t_now, t_next, schedule)


def sample(
    weights: ModelWeights,
    config: SamplerConfig,
    prompt: PromptSpec,
    strategy: StrategyVector | None = None,
    reuse_config: ReuseConfig | None = None,
    schedule: NoiseSchedule | None = None,
    perturb_step: int | None = None,
    perturb_eta: float = 0.1,
    cost_model: CostModel | None = None,
) -> SampleResult:
    """Run the reverse process under an optional reuse strategy.

    strategy=None is the strategy-free reference: every step computes and
    no cache exists. An all-ones strategy is bitwise identical to it.
    With a strategy, step s computes and refreshes the cache when
    pi_s = 1 and substitutes the cached payload when pi_s = 0.
    """
    n = config.n_steps
    if strategy is not None and strategy.n != n:
        raise InvalidStrategyError(
            f"strategy length {strategy.n} != n_steps {n}")
    if reuse_config is None:
        reuse_config = ReuseConfig()
    if schedule is None:
        schedule = make_schedule()
    kind = "map" if reuse_config.target == "attention_maps" else "feature"

    rng = SeededRng(config.seed)
    x = rng.derive(0).gaussian(IMG_SHAPE)
    tmap = config.timesteps()
    cache = AttentionCache() if strategy is not None else None

    trajectory = [x.copy()]
    observations: list[AttentionObservation] = []
    eps_prev = None
    t_prev = None

    for s in range(1, n + 1):
        t_now = int(tmap[s - 1])
        t_next = int(tmap[s]) if s < n else 0
        compute_here = strategy is None or strategy.bits[s - 1] == 1

        directives = {}
        for pass_idx, pass_id in enumerate(("conditional", "unconditional")):
            if perturb_step == s:
                directives[pass_id] = AttentionDirective(
                    self_mode=PerturbLogits(perturb_eta, rng.derive(1, s, pass_idx, 0)),
                    cross_mode=PerturbLogits(perturb_eta, rng.derive(1, s, pass_idx, 1)),
                )
            elif compute_here:
                directives[pass_id] = AttentionDirective(Compute(), Compute())
            else:
                directives[pass_id] = AttentionDirective(Reuse(cache), Reuse(cache))

        eps, obs = cfg_predict(weights, x, t_now, prompt,
                               config.guidance_scale, directives)
        for ob in obs:
            ob.step_index = s
            if ob.provenance is None:
                ob.provenance = s
        if cache is not None and compute_here:
            for ob in obs:
                payload = ob.map if kind == "map" else ob.feature
                cache.store(ob.site, payload, s,
                            precision=reuse_config.precision, kind=kind)
        observations.extend(obs)

        if config.solver == "multistep2":
            x = multistep2_step(x, eps, t_now, t_next, schedule, eps_prev, t_prev)
        else:
            x = ddim_step(x, eps, t_now, t_next, schedule)
        eps_prev, t_prev = eps, t_now
        trajectory.append(x.copy())

    image = np.clip((x + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
    ones = n if strategy is None else sum(strategy.bits)
    tally = CostTally(
        full_steps=ones,
        reuse_steps=n - ones,
        estimated_ms=latency_estimate(
            strategy if strategy is not None else StrategyVector.all_ones(n),
            cost_model),
        cache_bytes=cache_memory_bytes(reuse_config) if strategy is not None else 0,
    )
    return SampleResult(image=image, trajectory=trajectory,
                        observations=observations, cost=tally)
