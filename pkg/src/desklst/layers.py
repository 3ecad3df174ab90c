"""Neural building blocks and losses on top of :mod:`desklst.tensor`.

Sequence tensors are either ``(L, d)`` or batched ``(B, L, d)``.  Parameter
sets are plain dicts of tensors keyed by short names (``"ln1.g"`` etc.).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError, DimensionError, UsageError
from .tensor import Tensor, make

NEG_INF = -1e9


@dataclass(frozen=True)
class Conv1dSpec:
    in_channels: int
    out_channels: int
    kernel: int = 5
    stride: int = 2
    padding: int = 2

    def out_length(self, length: int) -> int:
        return (length + 2 * self.padding - self.kernel) // self.stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: Conv1dSpec) -> Tensor:
    """Zero-padded strided cross-correlation over the length axis.

    ``weight`` has shape ``(kernel, in_channels, out_channels)``.
    """
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, L, C = xd.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    if C != spec.in_channels or weight.shape != (k, spec.in_channels, spec.out_channels):
        raise DimensionError(
            f"conv1d: input channels {C} / weight {weight.shape} do not match "
            f"spec ({spec.in_channels}->{spec.out_channels}, kernel {k})")
    if L < 1:
        raise DimensionError("conv1d: empty input")
    lout = spec.out_length(L)
    if lout < 1:
        raise DimensionError(f"conv1d: input length {L} too short for kernel {k}")
    span = s * (lout - 1) + 1
    xp = np.zeros((B, L + 2 * p, C), dtype=xd.dtype)
    xp[:, p:p + L] = xd
    cols = np.stack([xp[:, j:j + span:s] for j in range(k)], axis=2).reshape(B, lout, k * C)
    wmat = weight.data.reshape(k * C, spec.out_channels)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g3 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g3 @ wmat.T).reshape(B, lout, k, C)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + span:s] += gcols[:, :, j]
            gx = gxp[:, p:p + L]
            if squeeze:
                gx = gx[0]
        if weight.requires_grad:
            gw = (cols.reshape(-1, k * C).T @ g3.reshape(-1, spec.out_channels)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 1))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make(out[0] if squeeze else out, parents, bw, "conv1d")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return make(out, (x, gain, bias), bw, "layer_norm")


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : dim // 2])
    return pe.astype(dtype)


def attention_mask(length: int, causal: bool, key_valid: np.ndarray | None = None,
                   dtype=np.float32) -> np.ndarray:
    """Additive mask, shape (1|B, 1, L, L): 0 where allowed, -1e9 where not."""
    allowed = np.ones((1, 1, length, length), dtype=bool)
    if causal:
        allowed = allowed & np.tril(np.ones((length, length), dtype=bool))[None, None]
    if key_valid is not None:
        allowed = allowed & key_valid[:, None, None, :].astype(bool)
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)


def _attention_core(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """softmax(q k^T / sqrt(dh) + mask) v over (B, h, L, dh) operands."""
    qd, kd, vd = q.data, k.data, v.data
    sc = qd.dtype.type(1.0 / math.sqrt(qd.shape[-1]))
    s = (qd @ np.swapaxes(kd, -1, -2)) * sc
    if mask is not None:
        s = s + mask
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.swapaxes(p, -1, -2) @ g
        if q.requires_grad or k.requires_grad:
            dp = g @ np.swapaxes(vd, -1, -2)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * sc
            if q.requires_grad:
                gq = ds @ kd
            if k.requires_grad:
                gk = np.swapaxes(ds, -1, -2) @ qd
        return gq, gk, gv

    return make(out, (q, k, v), bw, "attention")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, w_o: Tensor,
                         b_o: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Per-head scaled dot-product attention, head concat, output projection.

    ``q``, ``k``, ``v`` are already-projected ``(L, d)`` or ``(B, L, d)`` tensors.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    squeeze = q.data.ndim == 2
    if squeeze:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
    o = _merge_heads(_attention_core(_split_heads(q, heads), _split_heads(k, heads),
                                     _split_heads(v, heads), mask))
    out = T.linear(o, w_o, b_o)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def causal_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, w_o: Tensor,
                     b_o: Tensor | None = None) -> Tensor:
    L = q.shape[-2]
    return multi_head_attention(q, k, v, heads, w_o, b_o,
                                attention_mask(L, causal=True, dtype=q.dtype))


def self_attention(x: Tensor, p: dict, heads: int, mask: np.ndarray | None) -> Tensor:
    q = T.linear(x, p["attn.wq"], p["attn.bq"])
    k = T.linear(x, p["attn.wk"], p["attn.bk"])
    v = T.linear(x, p["attn.wv"], p["attn.bv"])
    return multi_head_attention(q, k, v, heads, p["attn.wo"], p["attn.bo"], mask)


def transformer_block(x: Tensor, p: dict, heads: int, mask: np.ndarray | None) -> Tensor:
    """Pre-norm block: x + Attn(LN(x)), then + FFN(LN(.)) with a gelu hidden layer."""
    if x.shape[-1] != p["attn.wq"].shape[0]:
        raise ConfigError(f"block width {p['attn.wq'].shape[0]} does not match input {x.shape[-1]}")
    h = T.add(x, self_attention(layer_norm(x, p["ln1.g"], p["ln1.b"]), p, heads, mask))
    f = T.gelu(T.linear(layer_norm(h, p["ln2.g"], p["ln2.b"]), p["ffn.w1"], p["ffn.b1"]))
    return T.add(h, T.linear(f, p["ffn.w2"], p["ffn.b2"]))


BLOCK_KEYS = ("ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
              "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b", "ffn.w1", "ffn.b1",
              "ffn.w2", "ffn.b2")


def init_block(rng: np.random.Generator, d: int, dtype=np.float32, std: float | None = None,
               n_layers: int = 1) -> dict[str, np.ndarray]:
    """Block parameters as raw arrays; residual output projections are down-scaled.

    ``std`` defaults to 1/sqrt(d).  Much smaller weights leave attention
    near-uniform for hundreds of steps before any routing is learned.
    """
    std = 1.0 / math.sqrt(d) if std is None else std
    out_std = std / math.sqrt(2 * n_layers)
    p = {
        "ln1.g": np.ones(d), "ln1.b": np.zeros(d),
        "attn.wq": rng.normal(0, std, (d, d)), "attn.bq": np.zeros(d),
        "attn.wk": rng.normal(0, std, (d, d)), "attn.bk": np.zeros(d),
        "attn.wv": rng.normal(0, std, (d, d)), "attn.bv": np.zeros(d),
        "attn.wo": rng.normal(0, out_std, (d, d)), "attn.bo": np.zeros(d),
        "ln2.g": np.ones(d), "ln2.b": np.zeros(d),
        "ffn.w1": rng.normal(0, std, (d, 4 * d)), "ffn.b1": np.zeros(4 * d),
        "ffn.w2": rng.normal(0, out_std, (4 * d, d)), "ffn.b2": np.zeros(d),
    }
    return {k: v.astype(dtype) for k, v in p.items()}


# -- losses -------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise UsageError("cross_entropy: loss mask selects no positions")
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= V):
        raise IndexError(f"cross_entropy: target out of range for vocabulary of {V}")
    safe = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (mask[..., None] * (g / n)).astype(grad.dtype)
        return (grad,)

    return make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def ctc_min_frames(target) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_tables(lp: np.ndarray, ext: np.ndarray, blank: int):
    Tn, S = lp.shape[0], ext.size
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]                                   # (T, S)
    alpha = np.full((Tn, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, Tn):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta = np.full((Tn, S), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if S > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(Tn - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    return alpha, beta, emit


def ctc_loss(log_probs: Tensor, target, blank: int | None = None) -> Tensor:
    """-log P(target | frames) summed over all alignments that collapse to target.

    ``log_probs`` is ``(T, V+1)`` log-probabilities; the blank is the last
    class unless given explicitly.
    """
    target = np.asarray(list(target), dtype=np.int64)
    Tn, C = log_probs.shape
    blank = C - 1 if blank is None else blank
    if target.size < 1:
        raise UsageError("ctc_loss: empty target")
    if target.min() < 0 or target.max() >= C or np.any(target == blank):
        raise IndexError(f"ctc_loss: target ids must lie in [0, {C}) and avoid blank {blank}")
    need = ctc_min_frames(target)
    if Tn < need:
        raise AlignmentError(f"ctc_loss: {Tn} frames cannot align a target needing {need}")
    ext = np.full(2 * target.size + 1, blank, dtype=np.int64)
    ext[1::2] = target
    lp = log_probs.data.astype(np.float64)
    alpha, beta, emit = _ctc_tables(lp, ext, blank)
    logp = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(logp):
        raise AlignmentError("ctc_loss: no alignment has non-zero probability")

    def bw(g):
        occ = np.exp(alpha + beta - emit - logp)           # (T, S)
        grad = np.zeros((Tn, C))
        for s, lab in enumerate(ext):
            grad[:, lab] -= occ[:, s]
        return ((grad * g).astype(log_probs.dtype),)

    return make(np.asarray(-logp, dtype=log_probs.dtype), (log_probs,), bw, "ctc_loss")


def masked_reconstruction_loss(frames, encoder_out: Tensor, mask, head: dict) -> Tensor:
    """Mean over masked frames of ||W h_t + b - s_t||^2.

    Works on ``(T, ·)`` or batched ``(B, T, ·)`` inputs with a matching mask.
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise UsageError("masked_reconstruction_loss: no masked frames")
    frames = np.asarray(frames, dtype=encoder_out.dtype)
    pred = T.linear(encoder_out, head["w"], head["b"])
    diff = T.sub(pred, frames)
    w = (mask[..., None] / n).astype(encoder_out.dtype)
    return T.tsum(T.mul(T.mul(diff, diff), w))
