"""Image fidelity metrics and the per-call latency/memory cost model.

Latency is modeled from two constants: the cost of a full denoiser call
and the cost of a call whose attention maps are reused, summed over the
schedule (times two passes per step under classifier-free guidance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeMismatchError
from .reuse import StrategyVector

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-10


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0,1], capped at 100 dB."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def l1_image_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute pixel difference."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"l1 shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


@dataclass(frozen=True)
class CostModel:
    """Per-call latency constants (milliseconds)."""

    full_call_ms: float = 152.0
    reuse_call_ms: float = 47.0
    passes_per_step: int = 2  # conditional + unconditional

    def __post_init__(self):
        if not self.full_call_ms > self.reuse_call_ms > 0:
            raise ValueError("need full_call_ms > reuse_call_ms > 0")
        if self.passes_per_step < 1:
            raise ValueError("passes_per_step must be >= 1")


@dataclass
class CostTally:
    full_steps: int = 0
    reuse_steps: int = 0
    estimated_ms: float = 0.0
    cache_bytes: int = 0


def latency_estimate(strategy: StrategyVector, model: CostModel | None = None) -> float:
    """passes_per_step * (full steps * full_ms + reuse steps * reuse_ms)."""
    if model is None:
        model = CostModel()
    ones = sum(strategy.bits)
    zeros = strategy.n - ones
    return model.passes_per_step * (ones * model.full_call_ms + zeros * model.reuse_call_ms)
