"""Reuse machinery: binary strategies, per-site memory cells, cache precision.

A strategy is a binary vector over sampling steps: 1 = compute the maps
from keys/queries (and refresh the cache), 0 = substitute the cached
payload. Cached payloads are either post-softmax attention maps or the
attention-block outputs ("features"), stored at f32/f16/i8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ALL_SITES, D_MODEL, N_PROMPT_KEYS, N_TOKENS, AttentionSite
from .numerics import SeededRng, ShapeMismatchError

PRECISIONS = ("f32", "f16", "i8")
TARGETS = ("attention_maps", "features")

BYTES_PER_ELEMENT = {"f32": 4, "f16": 2, "i8": 1}
I8_SCALE_OVERHEAD_BYTES = 4  # one f32 absmax scale per cached tensor

MAP_SHAPES = {
    "self_attn": (N_TOKENS, N_TOKENS),
    "cross_attn": (N_TOKENS, N_PROMPT_KEYS),
}
FEATURE_SHAPE = (N_TOKENS, D_MODEL)


class InvalidStrategyError(ValueError):
    """Strategy literal or vector violates the strategy contract."""


class ReuseViolationError(RuntimeError):
    """Reuse was requested from a cache cell that was never written."""


@dataclass(frozen=True)
class StrategyVector:
    """Binary reuse schedule over N sampling steps (1 = compute, 0 = reuse)."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) < 1:
            raise InvalidStrategyError("empty strategy")
        if any(b not in (0, 1) for b in self.bits):
            raise InvalidStrategyError("strategy bits must be 0 or 1")
        if self.bits[0] != 1:
            raise InvalidStrategyError("first step must compute (bit 1)")

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def r(self) -> int:
        """Number of reuse steps."""
        return self.n - sum(self.bits)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def parse(cls, literal: str) -> "StrategyVector":
        """Accepts plain bitstrings and the bracketed list form [1,1,0,...]."""
        s = literal.strip()
        if s.startswith("[") and s.endswith("]"):
            s = "".join(ch for ch in s[1:-1] if ch not in ", \t")
        if not s or any(ch not in "01" for ch in s):
            raise InvalidStrategyError(f"bad strategy literal: {literal!r}")
        return cls(tuple(int(ch) for ch in s))

    @classmethod
    def all_ones(cls, n: int) -> "StrategyVector":
        return cls((1,) * n)

    @classmethod
    def random(cls, n: int, r: int, seed: int) -> "StrategyVector":
        """Uniform over valid strategies (first bit 1, exactly r zeros)."""
        if not 0 <= r <= n - 1:
            raise InvalidStrategyError(f"need 0 <= r <= n-1, got n={n} r={r}")
        rng = SeededRng(seed).derive(n, r)
        positions = list(range(1, n))
        # Fisher-Yates driven by the counter-based stream.
        u = rng.uniforms(len(positions))
        order = [p for _, p in sorted(zip(u, positions))]
        zeros = set(order[:r])
        return cls(tuple(0 if i in zeros else 1 for i in range(n)))


@dataclass(frozen=True)
class ReuseConfig:
    target: str = "attention_maps"
    precision: str = "f32"

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")


@dataclass
class _Cell:
    encoded: np.ndarray
    scale: float | None       # i8 only
    precision: str
    kind: str                 # "map" | "feature"
    provenance: int


def _encode(payload: np.ndarray, precision: str) -> tuple[np.ndarray, float | None]:
    if precision == "f32":
        return payload.astype(np.float32).copy(), None
    if precision == "f16":
        return payload.astype(np.float16), None
    # i8: symmetric per-tensor absmax scaling, round half to even.
    absmax = float(np.max(np.abs(payload)))
    scale = absmax / 127.0 if absmax > 0 else 1.0
    q = np.clip(np.round(payload / np.float32(scale)), -127, 127).astype(np.int8)
    return q, scale


def _decode(cell: _Cell) -> np.ndarray:
    if cell.precision == "f32":
        return cell.encoded.copy()
    if cell.precision == "f16":
        return cell.encoded.astype(np.float32)
    return (cell.encoded.astype(np.float32) * np.float32(cell.scale)).astype(np.float32)


class AttentionCache:
    """Per-site memory cells holding the most recently computed payloads."""

    def __init__(self):
        self._cells: dict[AttentionSite, _Cell] = {}

    def store(self, site: AttentionSite, payload: np.ndarray, step: int,
              precision: str = "f32", kind: str = "map") -> None:
        expected = MAP_SHAPES[site.layer_id] if kind == "map" else FEATURE_SHAPE
        if tuple(payload.shape) != expected:
            raise ShapeMismatchError(
                f"{kind} payload for {site}: {payload.shape} != {expected}")
        prev = self._cells.get(site)
        if prev is not None and step <= prev.provenance:
            raise ValueError("cache provenance must strictly increase")
        encoded, scale = _encode(payload, precision)
        self._cells[site] = _Cell(encoded, scale, precision, kind, step)

    def fetch_cell(self, site: AttentionSite) -> tuple[np.ndarray, str, int]:
        """Decoded payload, its kind, and the step that wrote it."""
        cell = self._cells.get(site)
        if cell is None:
            raise ReuseViolationError(f"reuse requested from empty cell {site}")
        payload = _decode(cell)
        if cell.kind == "map" and cell.precision != "f32":
            # Restore the row-stochastic invariant lost to quantization.
            payload = payload / payload.sum(axis=-1, keepdims=True)
        return payload, cell.kind, cell.provenance

    def fetch(self, site: AttentionSite) -> np.ndarray:
        return self.fetch_cell(site)[0]

    def provenance(self, site: AttentionSite) -> int:
        cell = self._cells.get(site)
        if cell is None:
            raise ReuseViolationError(f"empty cell {site}")
        return cell.provenance


def cache_memory_bytes(config: ReuseConfig) -> int:
    """Cache footprint for the toy model under the given config.

    Payload bytes at the configured precision; i8 additionally carries one
    f32 absmax scale (4 bytes) per cached tensor.
    """
    total = 0
    n_tensors = 0
    for site in ALL_SITES:
        shape = (MAP_SHAPES[site.layer_id] if config.target == "attention_maps"
                 else FEATURE_SHAPE)
        total += int(np.prod(shape)) * BYTES_PER_ELEMENT[config.precision]
        n_tensors += 1
    if config.precision == "i8":
        total += n_tensors * I8_SCALE_OVERHEAD_BYTES
    return total
