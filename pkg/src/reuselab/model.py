"""Tiny conditional epsilon-prediction denoiser with attention tap points.

Architecture: a 16x16x3 image is cut into 2x2 patches (an 8x8 grid of
32-dim tokens), passed through one block of [self-attention ->
cross-attention over 2 prompt tokens -> feed-forward], and unembedded
back to image shape. Single head; map shapes are 64x64 (self) and 64x2
(cross) -- the smallest sizes at which caching and reuse are nontrivial.

Every attention site can be told, per call, to compute its map, to reuse
a cached map or block output, or to perturb its pre-softmax logits (used
only by the Lyapunov analysis).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, matmul, softmax_rows

IMG_SHAPE = (3, 16, 16)
PATCH = 2
GRID = 8
N_TOKENS = GRID * GRID            # 64 latent positions
PATCH_DIM = 3 * PATCH * PATCH     # 12
D_MODEL = 32
D_FF = 64
T_TRAIN = 1000
N_PROMPT_KEYS = 2                 # prompt token + register token

SHAPES = ("circle", "square", "cross")
COLORS = ("red", "green", "blue")
NULL_TOKEN_ROW = 9                # token table has 9 prompt rows + 1 null row

_INV_SQRT_D = np.float32(1.0 / np.sqrt(D_MODEL))


class NumericError(RuntimeError):
    """A non-finite activation appeared on the compute path."""


@dataclass(frozen=True)
class PromptSpec:
    shape: str | None
    color: str | None
    is_null: bool = False

    def __post_init__(self):
        if not self.is_null:
            if self.shape not in SHAPES or self.color not in COLORS:
                raise ValueError(f"unknown prompt tokens: {self.shape!r}/{self.color!r}")

    @property
    def class_index(self) -> int:
        if self.is_null:
            raise ValueError("null prompt has no class index")
        return SHAPES.index(self.shape) * len(COLORS) + COLORS.index(self.color)

    def token_rows(self) -> tuple[int, int]:
        """Rows of the token table used as cross-attention keys/values."""
        if self.is_null:
            return (NULL_TOKEN_ROW, NULL_TOKEN_ROW)
        return (self.class_index, NULL_TOKEN_ROW)

    def label(self) -> str:
        return "null" if self.is_null else f"{self.shape}:{self.color}"


NULL_PROMPT = PromptSpec(None, None, is_null=True)


def all_prompts() -> list[PromptSpec]:
    return [PromptSpec(s, c) for s in SHAPES for c in COLORS]


@dataclass(frozen=True)
class AttentionSite:
    layer_id: str   # "self_attn" | "cross_attn"
    pass_id: str    # "conditional" | "unconditional"

    def __post_init__(self):
        if self.layer_id not in ("self_attn", "cross_attn"):
            raise ValueError(f"bad layer_id {self.layer_id!r}")
        if self.pass_id not in ("conditional", "unconditional"):
            raise ValueError(f"bad pass_id {self.pass_id!r}")


ALL_SITES = tuple(
    AttentionSite(layer, pid)
    for pid in ("conditional", "unconditional")
    for layer in ("self_attn", "cross_attn")
)


@dataclass
class AttentionObservation:
    """What actually happened at one attention site during one call."""

    site: AttentionSite
    step_index: int | None
    map: np.ndarray | None       # post-softmax, rows sum to 1 (None for feature reuse)
    feature: np.ndarray          # attention-block output (before residual add)
    provenance: int | None = None  # step whose computation produced the payload used

    def __post_init__(self):
        if self.map is not None:
            sums = self.map.sum(axis=-1)
            if np.max(np.abs(sums - 1.0)) > 1e-6:
                raise NumericError("attention map rows must sum to 1")


# Per-site directive modes -------------------------------------------------

@dataclass(frozen=True)
class Compute:
    pass


@dataclass(frozen=True)
class Reuse:
    cache: object  # AttentionCache; fetched at the matching site


@dataclass(frozen=True)
class PerturbLogits:
    eta: float
    rng: SeededRng


@dataclass
class AttentionDirective:
    """Modes for the two sites of one denoiser pass."""

    self_mode: object = field(default_factory=Compute)
    cross_mode: object = field(default_factory=Compute)

    def mode_for(self, layer_id: str):
        return self.self_mode if layer_id == "self_attn" else self.cross_mode


# Weights ------------------------------------------------------------------

ARCH = (
    ("patch_embed", (PATCH_DIM, D_MODEL)),
    ("time_embed", (T_TRAIN, D_MODEL)),
    ("token_embed", (NULL_TOKEN_ROW + 1, D_MODEL)),
    ("self_q", (D_MODEL, D_MODEL)),
    ("self_k", (D_MODEL, D_MODEL)),
    ("self_v", (D_MODEL, D_MODEL)),
    ("self_o", (D_MODEL, D_MODEL)),
    ("cross_q", (D_MODEL, D_MODEL)),
    ("cross_k", (D_MODEL, D_MODEL)),
    ("cross_v", (D_MODEL, D_MODEL)),
    ("cross_o", (D_MODEL, D_MODEL)),
    ("ff1", (D_MODEL, D_FF)),
    ("ff2", (D_FF, D_MODEL)),
    ("unembed", (D_MODEL, PATCH_DIM)),
)


def arch_hash() -> bytes:
    desc = ";".join(f"{name}:{'x'.join(map(str, shp))}" for name, shp in ARCH)
    return hashlib.sha256(desc.encode()).digest()[:8]


@dataclass
class ModelWeights:
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = {name: shp for name, shp in ARCH}
        if set(self.tensors) != set(expected):
            raise ValueError("weight tensor names do not match the architecture")
        for name, t in self.tensors.items():
            if tuple(t.shape) != expected[name]:
                raise ValueError(f"{name}: shape {t.shape} != {expected[name]}")
            if not np.all(np.isfinite(t)):
                raise NumericError(f"{name} contains non-finite values")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights({k: v.astype(dtype) for k, v in self.tensors.items()})


def init_weights(rng: SeededRng) -> ModelWeights:
    """Gaussian init, 1/sqrt(fan_in) for projections, 0.1 for embeddings."""
    tensors = {}
    for idx, (name, shp) in enumerate(ARCH):
        g = rng.derive(idx).gaussian(shp)
        if name in ("time_embed", "token_embed"):
            scale = 0.1
        else:
            scale = 1.0 / np.sqrt(shp[0])
        tensors[name] = (g * np.float32(scale)).astype(np.float32)
    return ModelWeights(tensors)


# Forward pass -------------------------------------------------------------

def patchify(x: np.ndarray) -> np.ndarray:
    """(3,16,16) image -> (64,12) tokens, channel-major within each patch."""
    c, h, w = IMG_SHAPE
    return (
        x.reshape(c, GRID, PATCH, GRID, PATCH)
        .transpose(1, 3, 0, 2, 4)
        .reshape(N_TOKENS, PATCH_DIM)
    )


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    """(64,12) tokens -> (3,16,16) image."""
    c = IMG_SHAPE[0]
    return (
        tokens.reshape(GRID, GRID, c, PATCH, PATCH)
        .transpose(2, 0, 3, 1, 4)
        .reshape(IMG_SHAPE)
    )


def prompt_tokens(weights: ModelWeights, prompt: PromptSpec) -> np.ndarray:
    rows = prompt.token_rows()
    return weights["token_embed"][list(rows)]


def _attention(h, kv, wq, wk, wv, wo, mode, site: AttentionSite):
    """One attention block. Returns (output, map_or_None, provenance_or_None)."""
    if isinstance(mode, Reuse):
        payload, kind, provenance = mode.cache.fetch_cell(site)
        if kind == "feature":
            return payload, None, provenance
        a = payload
    else:
        q = matmul(h, wq)
        k = matmul(kv, wk)
        z = matmul(q, k.T) * _INV_SQRT_D
        if isinstance(mode, PerturbLogits) and mode.eta != 0.0:
            g = mode.rng.gaussian(z.shape)
            nz = float(np.linalg.norm(z))
            ng = float(np.linalg.norm(g))
            if ng > 0.0:
                z = z + np.float32(mode.eta * nz / ng) * g
        a = softmax_rows(z)
        provenance = None
    v = matmul(kv, wv)
    out = matmul(matmul(a, v), wo)
    return out, a, provenance


def predict_noise(
    weights: ModelWeights,
    x: np.ndarray,
    t_index: int,
    prompt: PromptSpec,
    directive: AttentionDirective | None = None,
) -> tuple[np.ndarray, list[AttentionObservation]]:
    """One denoiser pass. Returns (eps, observations at the 2 sites touched)."""
    if not (1 <= t_index <= T_TRAIN):
        raise ValueError(f"t_index {t_index} outside [1, {T_TRAIN}]")
    if directive is None:
        directive = AttentionDirective()
    pass_id = "unconditional" if prompt.is_null else "conditional"

    h = matmul(patchify(x), weights["patch_embed"])
    h = h + weights["time_embed"][t_index - 1]

    observations = []
    for layer_id, kv_of in (("self_attn", None), ("cross_attn", "prompt")):
        site = AttentionSite(layer_id, pass_id)
        kv = h if kv_of is None else prompt_tokens(weights, prompt)
        pfx = "self" if layer_id == "self_attn" else "cross"
        out, a, provenance = _attention(
            h, kv,
            weights[f"{pfx}_q"], weights[f"{pfx}_k"],
            weights[f"{pfx}_v"], weights[f"{pfx}_o"],
            directive.mode_for(layer_id), site,
        )
        observations.append(
            AttentionObservation(site=site, step_index=None, map=a,
                                 feature=out, provenance=provenance)
        )
        h = h + out

    h = h + matmul(np.tanh(matmul(h, weights["ff1"])), weights["ff2"])
    eps = unpatchify(matmul(h, weights["unembed"]))
    if not np.all(np.isfinite(eps)):
        raise NumericError("non-finite activation in denoiser output")
    return eps, observations


def cfg_predict(
    weights: ModelWeights,
    x: np.ndarray,
    t_index: int,
    prompt: PromptSpec,
    guidance_scale: float,
    directives: dict[str, AttentionDirective] | None = None,
) -> tuple[np.ndarray, list[AttentionObservation]]:
    """Classifier-free guidance: eps_u + w * (eps_c - eps_u)."""
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    if directives is None:
        directives = {}
    eps_c, obs_c = predict_noise(
        weights, x, t_index, prompt, directives.get("conditional"))
    eps_u, obs_u = predict_noise(
        weights, x, t_index, NULL_PROMPT, directives.get("unconditional"))
    # Exact collapse at the endpoints keeps w=0/w=1 runs bit-identical to
    # the corresponding single pass.
    if guidance_scale == 0.0:
        eps = eps_u
    elif guidance_scale == 1.0:
        eps = eps_c
    else:
        eps = eps_u + np.float32(guidance_scale) * (eps_c - eps_u)
    return eps, obs_c + obs_u
