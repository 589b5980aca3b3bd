"""Outlier measurement and attention-behavior inspection.

Kurtosis is the Pearson convention m4/m2^2 with population moments (a normal
distribution scores 3); note the Fisher "excess" convention differs by 3.
Outliers are values more than six standard deviations from the mean of their
activation tensor, with mean/std computed per tensor per batch and counts
accumulated across batches; each outlier is attributed to its last-axis
(hidden-dimension) index. All moment accumulation runs in float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import attention as qatt
from . import tensor as qt
from .errors import DataError, UndefinedMetricError

OUTLIER_SIGMA = 6.0
DUMP_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1


def kurtosis(x) -> float:
    """Pearson kurtosis m4/m2^2 over all values, computed in float64."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size < 4:
        raise UndefinedMetricError(f"kurtosis needs >= 4 values, got {v.size}")
    mu = v.mean()
    c = v - mu
    m2 = (c * c).mean()
    if m2 == 0.0:
        raise UndefinedMetricError("kurtosis undefined for zero-variance input")
    m4 = (c ** 4).mean()
    return float(m4 / (m2 * m2))


def inf_norm(x) -> float:
    v = np.asarray(x)
    if v.size == 0:
        raise ValueError("inf_norm of empty tensor")
    return float(np.abs(v).max())


def count_outliers(x) -> tuple[int, np.ndarray]:
    """(count, per-dimension counts) of values beyond six sigma of the tensor mean.

    The last axis is the hidden dimension; zero-std tensors contain no outliers
    by convention.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError("count_outliers needs at least one axis")
    d = arr.shape[-1]
    mu = arr.mean()
    std = arr.std()
    if std == 0.0:
        return 0, np.zeros(d, dtype=np.int64)
    mask = np.abs(arr - mu) > OUTLIER_SIGMA * std
    per_dim = mask.reshape(-1, d).sum(axis=0).astype(np.int64)
    return int(mask.sum()), per_dim


class ActivationTrace:
    """Streaming per-site accumulator: float64 power sums for moments, plus
    per-batch outlier counts and the running max-abs."""

    def __init__(self, site_id: str):
        self.site_id = site_id
        self.count = 0
        self.s1 = 0.0
        self.s2 = 0.0
        self.s3 = 0.0
        self.s4 = 0.0
        self.max_abs = 0.0
        self.outlier_count = 0
        self.per_dim: np.ndarray | None = None
        self.batches = 0

    def add_batch(self, values: np.ndarray) -> None:
        arr = np.asarray(values, dtype=np.float64)
        self.count += arr.size
        self.s1 += float(arr.sum())
        sq = arr * arr
        self.s2 += float(sq.sum())
        self.s3 += float((sq * arr).sum())
        self.s4 += float((sq * sq).sum())
        self.max_abs = max(self.max_abs, float(np.abs(arr).max()))
        n, per_dim = count_outliers(arr)
        self.outlier_count += n
        if self.per_dim is None:
            self.per_dim = per_dim
        else:
            if per_dim.shape != self.per_dim.shape:
                raise ValueError(f"trace {self.site_id}: hidden dimension changed")
            self.per_dim = self.per_dim + per_dim
        self.batches += 1

    def moments(self) -> tuple[float, float, float]:
        """(mean, m2, m4) central moments from the raw power sums."""
        if self.count == 0:
            raise UndefinedMetricError(f"trace {self.site_id} saw no values")
        n = self.count
        mu = self.s1 / n
        m2 = self.s2 / n - mu * mu
        m4 = (self.s4 - 4 * mu * self.s3 + 6 * mu * mu * self.s2) / n - 3 * mu ** 4
        return mu, m2, m4

    def kurtosis(self) -> float:
        _, m2, m4 = self.moments()
        if m2 <= 0.0:
            raise UndefinedMetricError(f"trace {self.site_id}: zero variance")
        return float(m4 / (m2 * m2))


@dataclass
class SiteStats:
    kurtosis: float
    max_abs: float
    outlier_count: int
    per_dim_counts: list[int]


@dataclass
class OutlierReport:
    per_site: dict[str, SiteStats]
    average_kurtosis: float
    max_inf_norm: float
    total_outliers: int
    per_dimension_shares: dict[int, float]

    def top_shares(self, k: int = 10) -> list[tuple[int, float]]:
        items = sorted(self.per_dimension_shares.items(), key=lambda kv: (-kv[1], kv[0]))
        return items[:k]

    def to_json(self) -> str:
        doc = {
            "format_version": REPORT_FORMAT_VERSION,
            "average_kurtosis": self.average_kurtosis,
            "max_inf_norm": self.max_inf_norm,
            "total_outliers": self.total_outliers,
            "top10_dimension_shares": [[d, s] for d, s in self.top_shares(10)],
            "per_site": {
                sid: {"kurtosis": st.kurtosis, "max_abs": st.max_abs,
                      "outliers": st.outlier_count}
                for sid, st in sorted(self.per_site.items())
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def aggregate(traces: Mapping[str, ActivationTrace] | Iterable[ActivationTrace]) -> OutlierReport:
    """Combine per-site traces: mean of per-site kurtosis (site order fixed by id sort),
    max inf-norm over sites, outlier counts summed with per-dimension shares."""
    if isinstance(traces, Mapping):
        traces = list(traces.values())
    else:
        traces = list(traces)
    if not traces:
        raise ValueError("aggregate: no traces")
    traces = sorted(traces, key=lambda t: t.site_id)
    per_site: dict[str, SiteStats] = {}
    kurtoses = []
    max_norm = 0.0
    total = 0
    dim_counts: np.ndarray | None = None
    for tr in traces:
        k = tr.kurtosis()
        kurtoses.append(k)
        max_norm = max(max_norm, tr.max_abs)
        total += tr.outlier_count
        per_site[tr.site_id] = SiteStats(k, tr.max_abs, tr.outlier_count,
                                         [] if tr.per_dim is None else tr.per_dim.tolist())
        if tr.per_dim is not None:
            if dim_counts is None:
                dim_counts = tr.per_dim.copy()
            elif tr.per_dim.shape == dim_counts.shape:
                dim_counts = dim_counts + tr.per_dim
    shares: dict[int, float] = {}
    if total > 0 and dim_counts is not None:
        for d in np.flatnonzero(dim_counts):
            shares[int(d)] = float(dim_counts[d] / total)
    return OutlierReport(per_site, float(np.mean(kurtoses)), max_norm, total, shares)


# ---------------------------------------------------------------------------
# attention dumps: P, V, PV for one (layer, head) plus token labels
# ---------------------------------------------------------------------------


def dump_attention(model, features: np.ndarray, dec_ids: Iterable[int],
                   kind: str, layer: int, head: int, out_dir: str) -> dict:
    """Write the inspected P/V/PV matrices of one head to out_dir.

    kind is "encoder", "decoder" (self-attention) or "cross"; labels are frame
    indices for encoder inputs and token strings for decoder positions.
    """
    insp, labels = inspect_model_attention(model, features, dec_ids, kind, layer)
    n_heads = insp["P"].shape[0]
    if not 0 <= head < n_heads:
        raise IndexError(f"head {head} out of range [0, {n_heads})")
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, f"attn_{kind}{layer}_head{head}")
    with open(base + ".bin", "wb") as f:
        for name in ("P", "V", "PV"):
            qt.write_array(f, insp[name][head])
    sidecar = {
        "format_version": DUMP_FORMAT_VERSION,
        "kind": kind,
        "layer": layer,
        "head": head,
        "matrices": ["P", "V", "PV"],
        "labels": labels,
    }
    with open(base + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"P": insp["P"][head], "V": insp["V"][head], "PV": insp["PV"][head],
            "path": base}


def load_attention_dump(base_path: str) -> dict:
    with open(base_path + ".json") as f:
        sidecar = json.load(f)
    if sidecar.get("format_version") != DUMP_FORMAT_VERSION:
        raise DataError(f"{base_path}: unsupported dump version")
    out = dict(sidecar)
    with open(base_path + ".bin", "rb") as f:
        for name in sidecar["matrices"]:
            out[name] = qt.read_array(f)
    return out


def inspect_model_attention(model, features: np.ndarray, dec_ids: Iterable[int],
                            kind: str, layer: int) -> tuple[dict, list[str]]:
    """Recompute one block's P/V/PV on the layer's actual input for one example."""
    from . import model as qm  # local import to avoid a cycle

    feats = np.asarray(features, dtype=np.float32)
    ids = np.asarray(list(dec_ids), dtype=np.int64)
    with qt.no_grad():
        memory = model.encode(feats)
        if kind == "encoder":
            if not 0 <= layer < model.cfg.enc_layers:
                raise IndexError(f"encoder layer {layer} out of range")
            x = _encoder_layer_input(model, feats, layer)
            blk = model.enc_layers[layer].attn
            insp = qatt.inspect(blk, x)
            labels = [f"f{i}" for i in range(feats.shape[0])]
        elif kind in ("decoder", "cross"):
            if not 0 <= layer < model.cfg.dec_layers:
                raise IndexError(f"decoder layer {layer} out of range")
            x, x_cross = _decoder_layer_inputs(model, memory, ids, layer)
            if kind == "decoder":
                blk = model.dec_layers[layer].self_attn
                insp = qatt.inspect(blk, x, mask=qatt.causal_mask(len(ids)))
            else:
                blk = model.dec_layers[layer].cross_attn
                insp = qatt.inspect(blk, x_cross, memory=memory)
            labels = [_token_label(int(t)) for t in ids]
        else:
            raise ValueError(f"unknown attention kind {kind!r}")
    return insp, labels


def _token_label(t: int) -> str:
    from .model import BOS_ID, EOS_ID, N_SPECIAL, PAD_ID

    if t == PAD_ID:
        return "<pad>"
    if t == BOS_ID:
        return "<bos>"
    if t == EOS_ID:
        return "<eos>"
    return f"s{t - N_SPECIAL}"


def _encoder_layer_input(model, feats: np.ndarray, layer: int) -> qt.Tensor:
    """Post-ln1 input that encoder layer `layer`'s attention actually sees."""
    x = model.encode_batch(feats[None], stop_at_layer=layer)
    return qt.reshape(x, x.shape[1:])


def _decoder_layer_inputs(model, memory: qt.Tensor, ids: np.ndarray, layer: int):
    """(self-attention input, cross-attention input) for decoder layer `layer`."""
    mem = qt.reshape(memory, (1,) + memory.shape)
    xs, xc = model.decode_layer_inputs(mem, ids[None])
    return (qt.reshape(xs[layer], xs[layer].shape[1:]),
            qt.reshape(xc[layer], xc[layer].shape[1:]))
