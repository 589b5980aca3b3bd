"""Multi-head attention and its gated variant.

The gated form multiplies the concatenated per-head attention output by a
sigmoid gate computed from the block input by one linear layer shared across
heads (but not across token positions), before the output projection:

    gated(x) = W_O ( sigmoid(G(x)) * concat_heads(attend(x)) ) + b_O

An optional `hook(site_suffix, tensor)` callback lets the owning model route
intermediate tensors through quantizer sites; suffixes used: in_q, in_k, in_v,
in_gate, probs, head_concat, out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as qt
from .errors import ConfigError

GATE_BIAS_INIT = 4.0  # gates start near-open: sigmoid(4) ~ 0.982
MASK_NEG = np.float32(-1e9)  # additive mask value; exp underflows to exactly 0

Hook = Callable[[str, qt.Tensor], qt.Tensor]


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    head_dim: int
    gated: bool = False
    causal: bool = False

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim


class AttentionBlock:
    """Projection weights for one attention block, plus the optional shared gate."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, init_std: float = 0.02):
        self.cfg = cfg
        d = cfg.model_dim

        def proj():
            return qt.Tensor(rng.normal(0.0, init_std, (d, d)), requires_grad=True)

        def bias():
            return qt.Tensor(np.zeros(d), requires_grad=True)

        self.w_q, self.b_q = proj(), bias()
        self.w_k, self.b_k = proj(), bias()
        self.w_v, self.b_v = proj(), bias()
        self.w_o, self.b_o = proj(), bias()
        if cfg.gated:
            self.w_g = proj()
            self.b_g = qt.Tensor(np.full(d, GATE_BIAS_INIT), requires_grad=True)
        else:
            self.w_g = None
            self.b_g = None

    def parameters(self) -> dict[str, qt.Tensor]:
        named = {
            "w_q": self.w_q, "b_q": self.b_q,
            "w_k": self.w_k, "b_k": self.b_k,
            "w_v": self.w_v, "b_v": self.b_v,
            "w_o": self.w_o, "b_o": self.b_o,
        }
        if self.w_g is not None:
            named["w_g"] = self.w_g
            named["b_g"] = self.b_g
        return named


def causal_mask(t: int) -> np.ndarray:
    """Additive [t, t] mask; future positions get MASK_NEG."""
    m = np.zeros((t, t), dtype=np.float32)
    m[np.triu_indices(t, k=1)] = MASK_NEG
    return m


def key_padding_mask(valid: np.ndarray, t_query: int, n_heads: int) -> np.ndarray:
    """Additive [B, n, t_query, t_key] mask hiding padded key positions.

    valid: [B, t_key] with 1 for real positions, 0 for padding.
    """
    b, t_key = valid.shape
    m = np.where(valid[:, None, None, :] > 0, np.float32(0.0), MASK_NEG)
    return np.broadcast_to(m, (b, n_heads, t_query, t_key)).astype(np.float32)


def _split_heads(t: qt.Tensor, n: int, d: int) -> qt.Tensor:
    b, length, _ = t.shape
    return qt.transpose(qt.reshape(t, (b, length, n, d)), (0, 2, 1, 3))


def _merge_heads(t: qt.Tensor) -> qt.Tensor:
    b, n, length, d = t.shape
    return qt.reshape(qt.transpose(t, (0, 2, 1, 3)), (b, length, n * d))


def _identity_hook(_suffix: str, t: qt.Tensor) -> qt.Tensor:
    return t


def _ensure_batched(x: qt.Tensor) -> tuple[qt.Tensor, bool]:
    if x.ndim == 2:
        return qt.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"attention expects [T, D] or [B, T, D], got {x.shape}")


def _attend(block: AttentionBlock, q_src: qt.Tensor, kv_src: qt.Tensor,
            mask: np.ndarray | None, gated: bool, hook: Hook) -> qt.Tensor:
    """Core of Eq.-style scaled dot-product attention over [B, T, D] inputs."""
    cfg = block.cfg
    n, d = cfg.n_heads, cfg.head_dim
    q_in = hook("in_q", q_src)
    k_in = hook("in_k", kv_src)
    v_in = hook("in_v", kv_src)
    q = _split_heads(qt.linear(q_in, block.w_q, block.b_q), n, d)
    k = _split_heads(qt.linear(k_in, block.w_k, block.b_k), n, d)
    v = _split_heads(qt.linear(v_in, block.w_v, block.b_v), n, d)

    scores = qt.mul(qt.matmul(q, qt.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if mask is not None:
        full = np.broadcast_to(mask.astype(np.float32), scores.shape)
        scores = qt.add(scores, qt.Tensor(np.ascontiguousarray(full)))
    probs = hook("probs", qt.softmax(scores, axis=-1))
    concat = _merge_heads(qt.matmul(probs, v))

    if gated:
        if block.w_g is None:
            raise ConfigError("gated attention requested but block has no gate")
        gate_in = hook("in_gate", q_src)
        gate = qt.sigmoid(qt.linear(gate_in, block.w_g, block.b_g))
        concat = qt.mul(concat, gate)
    concat = hook("head_concat", concat)
    out = qt.linear(concat, block.w_o, block.b_o)
    return hook("out", out)


def self_attention(block: AttentionBlock, x: qt.Tensor,
                   mask: np.ndarray | None = None, hook: Hook | None = None) -> qt.Tensor:
    """Plain multi-head self-attention (no gate, even if the block carries one)."""
    hook = hook or _identity_hook
    xb, squeeze = _ensure_batched(x)
    if mask is None and block.cfg.causal:
        mask = causal_mask(xb.shape[1])
    out = _attend(block, xb, xb, mask, gated=False, hook=hook)
    return qt.reshape(out, out.shape[1:]) if squeeze else out


def gated_attention(block: AttentionBlock, x: qt.Tensor,
                    mask: np.ndarray | None = None, hook: Hook | None = None) -> qt.Tensor:
    """Self-attention with the shared sigmoid gate applied before the output projection."""
    if block.w_g is None:
        raise ConfigError("gated_attention: block has no gate layer")
    hook = hook or _identity_hook
    xb, squeeze = _ensure_batched(x)
    if mask is None and block.cfg.causal:
        mask = causal_mask(xb.shape[1])
    out = _attend(block, xb, xb, mask, gated=True, hook=hook)
    return qt.reshape(out, out.shape[1:]) if squeeze else out


def cross_attention(block: AttentionBlock, x_dec: qt.Tensor, memory: qt.Tensor,
                    mask: np.ndarray | None = None, hook: Hook | None = None) -> qt.Tensor:
    """Attention with queries from the decoder stream and keys/values from encoder memory.

    Gated only when the block was built gated (the cross-gating config flag).
    """
    hook = hook or _identity_hook
    xb, squeeze = _ensure_batched(x_dec)
    mb, _ = _ensure_batched(memory)
    if xb.shape[0] != mb.shape[0]:
        raise ValueError("cross_attention: batch sizes disagree")
    out = _attend(block, xb, mb, mask, gated=block.cfg.gated, hook=hook)
    return qt.reshape(out, out.shape[1:]) if squeeze else out


def inspect(block: AttentionBlock, x: qt.Tensor, mask: np.ndarray | None = None,
            memory: qt.Tensor | None = None) -> dict[str, np.ndarray]:
    """Per-head attention internals for one example: probabilities P [n, T, Tk],
    values V [n, Tk, d], and their product PV [n, T, d]. Read-only."""
    cfg = block.cfg
    n, d = cfg.n_heads, cfg.head_dim
    with qt.no_grad():
        xb, _ = _ensure_batched(x)
        kv = xb if memory is None else _ensure_batched(memory)[0]
        if mask is None and memory is None and cfg.causal:
            mask = causal_mask(xb.shape[1])
        q = _split_heads(qt.linear(xb, block.w_q, block.b_q), n, d)
        k = _split_heads(qt.linear(kv, block.w_k, block.b_k), n, d)
        v = _split_heads(qt.linear(kv, block.w_v, block.b_v), n, d)
        scores = qt.mul(qt.matmul(q, qt.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        if mask is not None:
            full = np.broadcast_to(mask.astype(np.float32), scores.shape)
            scores = qt.add(scores, qt.Tensor(np.ascontiguousarray(full)))
        p = qt.softmax(scores, axis=-1)
        pv = qt.matmul(p, v)
    return {"P": p.data[0].copy(), "V": v.data[0].copy(), "PV": pv.data[0].copy()}
