"""Desk-scale training for the toy denoiser.

Procedural dataset (colored shapes on a dark background), epsilon-prediction
MSE objective, manual backward pass, Adam. Everything is driven by the
counter-based RNG, so a (config, seed) pair pins the checkpoint bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .model import (
    D_MODEL,
    IMG_SHAPE,
    N_TOKENS,
    NULL_TOKEN_ROW,
    PATCH_DIM,
    T_TRAIN,
    ModelWeights,
    PromptSpec,
    all_prompts,
    init_weights,
    patchify,
    unpatchify,
)
from .numerics import SeededRng, bmm, matmul
from .sampler import make_schedule

_INV_SQRT_D = np.float32(1.0 / np.sqrt(D_MODEL))


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


# Dataset ------------------------------------------------------------------

_BACKGROUND = 0.05
_CHANNEL = {"red": 0, "green": 1, "blue": 2}


def _render(prompt: PromptSpec, rng: SeededRng) -> np.ndarray:
    """One 16x16 RGB image in [0,1]: the shape in its color on dark ground."""
    u = rng.uniforms(3)
    extent = 3 + int(u[0] * 3)          # 3..5
    lo, hi = extent, 15 - extent
    cx = lo + u[1] * (hi - lo)
    cy = lo + u[2] * (hi - lo)
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if prompt.shape == "circle":
        mask = dx * dx + dy * dy <= extent * extent
    elif prompt.shape == "square":
        mask = (np.abs(dx) <= extent) & (np.abs(dy) <= extent)
    else:  # cross
        mask = ((np.abs(dx) <= 1) & (np.abs(dy) <= extent)) | (
            (np.abs(dy) <= 1) & (np.abs(dx) <= extent))
    img = np.full(IMG_SHAPE, _BACKGROUND, dtype=np.float32)
    img[_CHANNEL[prompt.color], mask] = 1.0
    return img


def generate_dataset(n: int, seed: int) -> list[tuple[np.ndarray, PromptSpec]]:
    """n procedural (image, prompt) pairs, balanced over the 9 classes."""
    if n <= 0:
        raise ValueError("n must be > 0")
    prompts = all_prompts()
    base = SeededRng(seed)
    out = []
    for i in range(n):
        prompt = prompts[i % len(prompts)]
        out.append((_render(prompt, base.derive(2, i)), prompt))
    return out


# Batched forward / backward -----------------------------------------------

def _mm2(a3: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(B,T,d) @ (d,e) via the deterministic 2-d kernel."""
    b, t, d = a3.shape
    return matmul(a3.reshape(b * t, d), w).reshape(b, t, w.shape[1])


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(weights: ModelWeights, x: np.ndarray, t_idx: np.ndarray,
                  rows: np.ndarray) -> tuple[np.ndarray, dict]:
    """All-compute forward over a batch. x is in model space [-1, 1].

    Returns (eps, cache-of-intermediates). Dtype follows the inputs, which
    lets the finite-difference check run the same code in float64.
    """
    w = weights.tensors
    b = x.shape[0]
    patches = np.stack([patchify(xi) for xi in x])                # (B,64,12)
    tok = _mm2(patches, w["patch_embed"])
    h0 = tok + w["time_embed"][t_idx - 1][:, None, :]

    q = _mm2(h0, w["self_q"])
    k = _mm2(h0, w["self_k"])
    v = _mm2(h0, w["self_v"])
    z = bmm(q, k.transpose(0, 2, 1)) * z_scale(x.dtype)
    a = _softmax(z)
    sv = bmm(a, v)
    so = _mm2(sv, w["self_o"])
    h1 = h0 + so

    p = w["token_embed"][rows]                                    # (B,2,32)
    qc = _mm2(h1, w["cross_q"])
    kc = _mm2(p, w["cross_k"])
    vc = _mm2(p, w["cross_v"])
    zc = bmm(qc, kc.transpose(0, 2, 1)) * z_scale(x.dtype)
    ac = _softmax(zc)
    cv = bmm(ac, vc)
    co = _mm2(cv, w["cross_o"])
    h2 = h1 + co

    f1 = np.tanh(_mm2(h2, w["ff1"]))
    h3 = h2 + _mm2(f1, w["ff2"])
    out = _mm2(h3, w["unembed"])
    eps = np.stack([unpatchify(oi) for oi in out])

    cache = dict(patches=patches, h0=h0, q=q, k=k, v=v, a=a, sv=sv, h1=h1,
                 p=p, qc=qc, kc=kc, vc=vc, ac=ac, cv=cv, h2=h2, f1=f1, h3=h3,
                 t_idx=t_idx, rows=rows)
    return eps, cache


def z_scale(dtype) -> np.ndarray:
    return np.asarray(1.0 / np.sqrt(D_MODEL), dtype=dtype)


def _flat(a3: np.ndarray) -> np.ndarray:
    return a3.reshape(-1, a3.shape[-1])


def _softmax_back(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    return a * (da - (da * a).sum(axis=-1, keepdims=True))


def backward_batch(weights: ModelWeights, cache: dict,
                   d_eps: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every weight tensor, given d(loss)/d(eps)."""
    w = weights.tensors
    c = cache
    scale = z_scale(d_eps.dtype)
    grads = {}

    dout = np.stack([patchify(di) for di in d_eps])               # (B,64,12)
    grads["unembed"] = matmul(_flat(c["h3"]).T, _flat(dout))
    dh3 = _mm2(dout, w["unembed"].T)

    dff_out = dh3
    grads["ff2"] = matmul(_flat(c["f1"]).T, _flat(dff_out))
    dpre = _mm2(dff_out, w["ff2"].T) * (1.0 - c["f1"] ** 2)
    grads["ff1"] = matmul(_flat(c["h2"]).T, _flat(dpre))
    dh2 = dh3 + _mm2(dpre, w["ff1"].T)

    # cross-attention block
    dco = dh2
    grads["cross_o"] = matmul(_flat(c["cv"]).T, _flat(dco))
    dcv = _mm2(dco, w["cross_o"].T)
    dac = bmm(dcv, c["vc"].transpose(0, 2, 1))
    dvc = bmm(c["ac"].transpose(0, 2, 1), dcv)
    dzc = _softmax_back(c["ac"], dac) * scale
    dqc = bmm(dzc, c["kc"])
    dkc = bmm(dzc.transpose(0, 2, 1), c["qc"])
    grads["cross_q"] = matmul(_flat(c["h1"]).T, _flat(dqc))
    grads["cross_k"] = matmul(_flat(c["p"]).T, _flat(dkc))
    grads["cross_v"] = matmul(_flat(c["p"]).T, _flat(dvc))
    dh1 = dh2 + _mm2(dqc, w["cross_q"].T)
    dp = _mm2(dkc, w["cross_k"].T) + _mm2(dvc, w["cross_v"].T)
    g_tok = np.zeros_like(w["token_embed"], dtype=d_eps.dtype)
    for j in range(c["rows"].shape[1]):
        np.add.at(g_tok, c["rows"][:, j], dp[:, j, :])
    grads["token_embed"] = g_tok

    # self-attention block
    dso = dh1
    grads["self_o"] = matmul(_flat(c["sv"]).T, _flat(dso))
    dsv = _mm2(dso, w["self_o"].T)
    da = bmm(dsv, c["v"].transpose(0, 2, 1))
    dv = bmm(c["a"].transpose(0, 2, 1), dsv)
    dz = _softmax_back(c["a"], da) * scale
    dq = bmm(dz, c["k"])
    dk = bmm(dz.transpose(0, 2, 1), c["q"])
    grads["self_q"] = matmul(_flat(c["h0"]).T, _flat(dq))
    grads["self_k"] = matmul(_flat(c["h0"]).T, _flat(dk))
    grads["self_v"] = matmul(_flat(c["h0"]).T, _flat(dv))
    dh0 = (dh1 + _mm2(dq, w["self_q"].T) + _mm2(dk, w["self_k"].T)
           + _mm2(dv, w["self_v"].T))

    g_time = np.zeros_like(w["time_embed"], dtype=d_eps.dtype)
    np.add.at(g_time, c["t_idx"] - 1, dh0.sum(axis=1))
    grads["time_embed"] = g_time
    grads["patch_embed"] = matmul(_flat(c["patches"]).T, _flat(dh0))
    return grads


def mse_loss_and_grad(eps: np.ndarray, target: np.ndarray):
    diff = eps - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    d_eps = (2.0 / diff.size) * diff
    return loss, d_eps


# Training loop ------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    dataset_size: int = 2048
    lr: float = 2e-3
    null_prob: float = 0.1
    val_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 500


@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list[float]
    val_loss_initial: float
    val_loss_final: float


def _make_batch(data, schedule, rng: SeededRng, batch_size: int, null_prob: float):
    n = len(data)
    u = rng.uniforms(batch_size * 3)
    idx = np.minimum((u[:batch_size] * n).astype(int), n - 1)
    t_idx = np.minimum((u[batch_size:2 * batch_size] * T_TRAIN).astype(int) + 1, T_TRAIN)
    is_null = u[2 * batch_size:] < null_prob
    noise = rng.gaussian((batch_size,) + IMG_SHAPE)

    x0 = np.stack([data[i][0] for i in idx]) * 2.0 - 1.0
    ab = schedule.alpha_bars[t_idx].astype(np.float32)
    x_t = (np.sqrt(ab)[:, None, None, None] * x0
           + np.sqrt(1.0 - ab)[:, None, None, None] * noise)
    rows = np.empty((batch_size, 2), dtype=np.int64)
    for b in range(batch_size):
        if is_null[b]:
            rows[b] = (NULL_TOKEN_ROW, NULL_TOKEN_ROW)
        else:
            rows[b] = data[idx[b]][1].token_rows()
    return x_t.astype(np.float32), t_idx, rows, noise


def denoising_loss(weights: ModelWeights, data, seed: int) -> float:
    """Deterministic validation loss: each item noised once at a fixed t."""
    schedule = make_schedule()
    rng = SeededRng(seed).derive(3)
    n = len(data)
    u = rng.uniforms(n)
    t_idx = np.minimum((u * T_TRAIN).astype(int) + 1, T_TRAIN)
    noise = rng.gaussian((n,) + IMG_SHAPE)
    x0 = np.stack([d[0] for d in data]) * 2.0 - 1.0
    ab = schedule.alpha_bars[t_idx].astype(np.float32)
    x_t = (np.sqrt(ab)[:, None, None, None] * x0
           + np.sqrt(1.0 - ab)[:, None, None, None] * noise).astype(np.float32)
    rows = np.stack([d[1].token_rows() for d in data]).astype(np.int64)
    eps, _ = forward_batch(weights, x_t, t_idx, rows)
    loss, _ = mse_loss_and_grad(eps, noise)
    return loss


def train_toy(config: TrainConfig | None = None, seed: int = 0,
              checkpoint_path=None) -> TrainResult:
    """Train the toy denoiser; deterministic per (config, seed)."""
    if config is None:
        config = TrainConfig()
    data = generate_dataset(config.dataset_size, seed)
    val = generate_dataset(config.val_size, seed + 1_000_003)
    weights = init_weights(SeededRng(seed).derive(1))
    schedule = make_schedule()

    val_initial = denoising_loss(weights, val, seed)

    m = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
    v2 = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
    losses = []
    b1, b2 = np.float32(config.beta1), np.float32(config.beta2)
    for step in range(1, config.steps + 1):
        rng = SeededRng(seed).derive(4, step)
        x_t, t_idx, rows, noise = _make_batch(
            data, schedule, rng, config.batch_size, config.null_prob)
        eps, cache = forward_batch(weights, x_t, t_idx, rows)
        loss, d_eps = mse_loss_and_grad(eps, noise)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        losses.append(loss)
        grads = backward_batch(weights, cache, d_eps.astype(np.float32))

        bias1 = 1.0 - config.beta1 ** step
        bias2 = 1.0 - config.beta2 ** step
        lr_t = np.float32(config.lr * np.sqrt(bias2) / bias1)
        for name, g in grads.items():
            m[name] = b1 * m[name] + (np.float32(1) - b1) * g
            v2[name] = b2 * v2[name] + (np.float32(1) - b2) * (g * g)
            weights.tensors[name] -= lr_t * m[name] / (
                np.sqrt(v2[name]) + np.float32(config.adam_eps))

    val_final = denoising_loss(weights, val, seed)
    result = TrainResult(weights=weights, losses=losses,
                         val_loss_initial=val_initial, val_loss_final=val_final)
    if checkpoint_path is not None:
        ckpt_io.save_weights(checkpoint_path, weights)
    return result


# Gradient check -----------------------------------------------------------

def gradient_check(weights: ModelWeights, x: np.ndarray, t_idx: np.ndarray,
                   rows: np.ndarray, target: np.ndarray,
                   fd_step: float = 1e-3) -> dict[str, float]:
    """Max relative error, analytic vs central differences, per tensor.

    Runs in float64 so finite-difference noise stays below the tolerance.
    Embedding rows not touched by the batch must have exactly zero analytic
    gradient; they are verified as such and skipped in the FD loop.
    """
    w64 = weights.astype(np.float64)
    x64 = x.astype(np.float64)
    tgt = target.astype(np.float64)

    eps_out, cache = forward_batch(w64, x64, t_idx, rows)
    _, d_eps = mse_loss_and_grad(eps_out, tgt)
    grads = backward_batch(w64, cache, d_eps)

    def loss_of(wts):
        e, _ = forward_batch(wts, x64, t_idx, rows)
        return mse_loss_and_grad(e, tgt)[0]

    used_time = set((t_idx - 1).tolist())
    used_tok = set(rows.ravel().tolist())
    max_rel = {}
    for name, g in grads.items():
        tensor = w64.tensors[name]
        flat = tensor.ravel()
        gflat = g.ravel()
        worst = 0.0
        for i in range(flat.size):
            if name == "time_embed" and (i // D_MODEL) not in used_time:
                assert gflat[i] == 0.0
                continue
            if name == "token_embed" and (i // D_MODEL) not in used_tok:
                assert gflat[i] == 0.0
                continue
            orig = flat[i]
            flat[i] = orig + fd_step
            hi = loss_of(w64)
            flat[i] = orig - fd_step
            lo = loss_of(w64)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * fd_step)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
        max_rel[name] = worst
    return max_rel
