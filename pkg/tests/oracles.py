"""Independent float64 reference implementations used as test oracles.

Everything here is written directly against numpy in float64, sharing no code
with the package, so finite-difference and value comparisons check the real
implementation against an independent path.
"""

from __future__ import annotations

import math

import numpy as np


def softmax64(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm64(x, gamma, beta, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return np.asarray(gamma, np.float64) * (x - mu) / np.sqrt(var + eps) + np.asarray(
        beta, np.float64
    )


def sigmoid64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def log_softmax64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    return z - (zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)))


def cross_entropy64(logits, targets) -> float:
    lp = log_softmax64(logits)
    n = lp.shape[0]
    return float(-lp[np.arange(n), np.asarray(targets)].mean())


def kl64(student_logits, teacher_logits, direction: str = "forward") -> float:
    ls = log_softmax64(student_logits)
    lt = log_softmax64(teacher_logits)
    ps, pt = np.exp(ls), np.exp(lt)
    if direction == "forward":
        per_row = np.where(pt > 0, pt * (lt - ls), 0.0).sum(axis=1)
    else:
        per_row = (ps * (ls - lt)).sum(axis=1)
    return float(per_row.mean())


def attention64(x, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, n_heads, mask=None,
                gate_w=None, gate_b=None, kv=None):
    """Loop-based multi-head attention computed head by head in float64.

    Scores scaled by 1/sqrt(d); optional additive mask; optional sigmoid gate
    multiplying the concatenated head output before the output projection.
    Returns (output, P_heads, V_heads) with P/V stacked per head.
    """
    x = np.asarray(x, dtype=np.float64)
    kv = x if kv is None else np.asarray(kv, dtype=np.float64)
    dm = x.shape[-1]
    d = dm // n_heads
    q = x @ np.asarray(w_q, np.float64) + np.asarray(b_q, np.float64)
    k = kv @ np.asarray(w_k, np.float64) + np.asarray(b_k, np.float64)
    v = kv @ np.asarray(w_v, np.float64) + np.asarray(b_v, np.float64)
    heads = []
    probs = []
    values = []
    for h in range(n_heads):
        sl = slice(h * d, (h + 1) * d)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        scores = qh @ kh.T / math.sqrt(d)
        if mask is not None:
            scores = scores + np.asarray(mask, np.float64)
        p = softmax64(scores, axis=-1)
        heads.append(p @ vh)
        probs.append(p)
        values.append(vh)
    concat = np.concatenate(heads, axis=-1)
    if gate_w is not None:
        concat = concat * sigmoid64(x @ np.asarray(gate_w, np.float64) + np.asarray(gate_b, np.float64))
    out = concat @ np.asarray(w_o, np.float64) + np.asarray(b_o, np.float64)
    return out, np.stack(probs), np.stack(values)


def fd_grad(fn, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x, element by element."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def edit_distance(ref, hyp) -> int:
    """Plain O(n*m) Levenshtein DP over token lists."""
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j] + 1, dp[i, j - 1] + 1, dp[i - 1, j - 1] + cost)
    return int(dp[n, m])


def kurtosis_two_pass(x) -> float:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    mu = v.mean()
    m2 = ((v - mu) ** 2).mean()
    m4 = ((v - mu) ** 4).mean()
    return float(m4 / (m2 * m2))
