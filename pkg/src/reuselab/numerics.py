"""Minimal dense numeric kernel.

Everything downstream (the denoiser, the samplers, the analysis probes)
routes its linear algebra through this module so that reductions happen
in a single, fixed order. That keeps reference samples bit-stable, which
matters because strategy utilities are PSNR-against-reference.

The random generator is counter-based (splitmix64 over an index stream),
so independent substreams can be derived per (prompt, step, site) without
any sequencing constraints.
"""

from __future__ import annotations

import numpy as np
from numba import njit


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


@njit(cache=True)
def _matmul_kernel(a, b, out):  # pragma: no cover - exercised via matmul
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            acc = a[i, 0] * b[0, j]
            for p in range(1, k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with row-major, left-to-right accumulation.

    The summation order is fixed (k ascending per output element), so the
    result is bitwise reproducible and matches a naive triple-loop oracle
    exactly, at any dtype.
    """
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"inner dims differ: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    _matmul_kernel(a.astype(out.dtype, copy=False), b.astype(out.dtype, copy=False), out)
    return out


@njit(cache=True)
def _bmm_kernel(a, b, out):  # pragma: no cover
    for s in range(a.shape[0]):
        m, k = a.shape[1], a.shape[2]
        n = b.shape[2]
        for i in range(m):
            for j in range(n):
                acc = a[s, i, 0] * b[s, 0, j]
                for p in range(1, k):
                    acc += a[s, i, p] * b[s, p, j]
                out[s, i, j] = acc


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matmul, same accumulation order as :func:`matmul`."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatchError(f"bmm shapes: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=np.result_type(a, b))
    _bmm_kernel(a.astype(out.dtype, copy=False), b.astype(out.dtype, copy=False), out)
    return out


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction (overflow-safe)."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax_rows requires finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = (x + _GOLDEN).astype(_U64)
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class SeededRng:
    """Counter-based deterministic RNG.

    Output is a pure function of (seed, stream position): identical seed
    plus identical call sequence gives identical values, bit for bit.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = int(position)

    def derive(self, *keys: int) -> "SeededRng":
        """Fold extra keys into the seed, yielding an independent stream."""
        s = np.array([self.seed], dtype=_U64)
        s = _splitmix64(s)
        for k in keys:
            s = _splitmix64(s ^ _splitmix64(np.array([int(k) & 0xFFFFFFFFFFFFFFFF], dtype=_U64)))
        return SeededRng(int(s[0]))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.position, self.position + n, dtype=_U64)
        self.position += n
        base = _splitmix64(np.array([self.seed], dtype=_U64))[0]
        return _splitmix64(idx ^ base)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in (0, 1]."""
        return ((self._raw(n) >> _U64(11)) + _U64(1)) * (2.0 ** -53)

    def gaussian(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller on the uniform stream (float32)."""
        shape = tuple(int(d) for d in (shape if np.iterable(shape) else (shape,)))
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        u1, u2 = u[:m], u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.astype(np.float32).reshape(shape)


def gaussian(rng: SeededRng, shape) -> np.ndarray:
    return rng.gaussian(shape)
