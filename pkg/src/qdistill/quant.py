"""Fake quantization to a b-bit unsigned integer grid with affine scale/zero-point.

Values are quantize-dequantized in float64 internally:

    x_q = s * (clip(round(x / s) + z, 0, 2^b - 1) - z)

with round-half-away-from-zero so results are bit-reproducible across
platforms. Activation ranges come from an exponential-moving-average min/max
observer fed by calibration batches; weight ranges use the tensor's full range.
Ranges are widened to include zero before computing (s, z) so that real zero
always maps to an exact grid point.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as qt
from .errors import CalibrationError, ConfigError

DEFAULT_BITS = 8
DEFAULT_EMA_DECAY = 0.9


@dataclass(frozen=True)
class QuantParams:
    """Affine map between real values and the integer grid [0, 2^bits - 1]."""

    scale: float
    zero_point: int
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero_point <= self.qmax:
            raise ValueError(f"zero_point {self.zero_point} outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class RangeState:
    """Running EMA min/max over observed batches; order-dependent by design."""

    running_min: float = 0.0
    running_max: float = 0.0
    decay: float = DEFAULT_EMA_DECAY
    observed_batches: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")


@dataclass
class QuantizerSite:
    """One quantization point in the model, addressed by a stable string path."""

    site_id: str
    kind: str  # "weight" | "activation"
    enabled: bool = True
    params: QuantParams | None = None
    range_state: RangeState | None = None

    def __post_init__(self):
        if self.kind not in ("weight", "activation"):
            raise ValueError(f"unknown site kind {self.kind!r}")
        if self.kind == "weight" and self.range_state is not None:
            raise ValueError(f"weight site {self.site_id} must not hold a RangeState")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (the fixed rounding mode)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def compute_qparams(lo: float, hi: float, bits: int = DEFAULT_BITS) -> QuantParams:
    """Affine qparams for range [lo, hi], widened to include zero first.

    Degenerate all-zero range falls back to scale=1, zero_point=0 with a warning.
    """
    if lo > hi:
        raise ValueError(f"invalid range: min {lo} > max {hi}")
    lo = min(float(lo), 0.0)
    hi = max(float(hi), 0.0)
    if lo == 0.0 and hi == 0.0:
        warnings.warn("degenerate all-zero range; falling back to scale=1, zero_point=0",
                      RuntimeWarning, stacklevel=2)
        return QuantParams(1.0, 0, bits)
    qmax = (1 << bits) - 1
    scale = (hi - lo) / qmax
    zero = int(np.clip(round_half_away(-lo / scale), 0, qmax))
    return QuantParams(scale, zero, bits)


def weight_qparams(w, bits: int = DEFAULT_BITS) -> QuantParams:
    """Per-tensor qparams from the full range of a weight tensor."""
    arr = w.data if isinstance(w, qt.Tensor) else np.asarray(w)
    if arr.size == 0:
        raise ValueError("weight_qparams: empty tensor")
    return compute_qparams(float(arr.min()), float(arr.max()), bits)


def _fq_core(arr: np.ndarray, p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """float64 quantize-dequantize plus the straight-through pass mask."""
    a = arr.astype(np.float64)
    q = round_half_away(a / p.scale) + p.zero_point
    out = p.scale * (np.clip(q, 0, p.qmax) - p.zero_point)
    mask = ((q >= 0) & (q <= p.qmax)).astype(np.float32)
    return out.astype(np.float32), mask


def fake_quantize_array(arr: np.ndarray, p: QuantParams) -> np.ndarray:
    out, _ = _fq_core(np.asarray(arr), p)
    return out


def fake_quantize(x: qt.Tensor, p: QuantParams) -> qt.Tensor:
    """Quantize-dequantize a tensor; straight-through estimator backward
    (gradient 1 inside the representable range, 0 where clipped)."""
    out, mask = _fq_core(x.data, p)
    return qt.from_op(out, (x,), lambda g: (g * mask,), name="fake_quantize")


def observe(state: RangeState, batch) -> RangeState:
    """Fold one batch's min/max into the EMA state (mutates and returns it)."""
    arr = batch.data if isinstance(batch, qt.Tensor) else np.asarray(batch)
    if arr.size == 0:
        raise ValueError("observe: empty batch")
    if not np.all(np.isfinite(arr)):
        raise CalibrationError("non-finite values in calibration batch")
    bmin = float(arr.min())
    bmax = float(arr.max())
    if state.observed_batches == 0:
        state.running_min = bmin
        state.running_max = bmax
    else:
        c = state.decay
        state.running_min = c * state.running_min + (1.0 - c) * bmin
        state.running_max = c * state.running_max + (1.0 - c) * bmax
    state.observed_batches += 1
    return state


def calibrate(model, batches: Sequence, bits: int = DEFAULT_BITS) -> dict[str, QuantizerSite]:
    """Run calibration batches through the model and parameterize every enabled
    activation site from its final EMA range.

    The model must carry quantizer sites (see model.apply_policy); any enabled
    activation site that never observes a value is a configuration error.
    """
    if model.sites is None:
        raise ConfigError("calibrate: model has no quantization policy applied")
    model.set_mode("calibrate")
    try:
        for batch in batches:
            model.forward_batch(batch)
    finally:
        model.set_mode("fp")
    unobserved = []
    for sid in sorted(model.sites):
        site = model.sites[sid]
        if site.kind != "activation" or not site.enabled:
            continue
        if site.range_state is None or site.range_state.observed_batches == 0:
            unobserved.append(sid)
            continue
        site.params = compute_qparams(site.range_state.running_min,
                                      site.range_state.running_max, bits)
    if unobserved:
        raise ConfigError(f"activation sites never observed during calibration: {unobserved}")
    return model.sites


# ---------------------------------------------------------------------------
# calibration file: the contract between the calibrate and eval stages
# ---------------------------------------------------------------------------

CALIBRATION_FORMAT_VERSION = 1


def calibration_to_json(sites: Iterable[QuantizerSite] | dict) -> str:
    if isinstance(sites, dict):
        sites = sites.values()
    entries = []
    for s in sorted(sites, key=lambda s: s.site_id):
        entries.append({
            "site_id": s.site_id,
            "kind": s.kind,
            "enabled": s.enabled,
            "s": s.params.scale if s.params else None,
            "z": s.params.zero_point if s.params else None,
            "b": s.params.bits if s.params else None,
            "running_min": s.range_state.running_min if s.range_state else None,
            "running_max": s.range_state.running_max if s.range_state else None,
        })
    doc = {"format_version": CALIBRATION_FORMAT_VERSION, "sites": entries}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def calibration_from_json(text: str) -> dict[str, QuantizerSite]:
    doc = json.loads(text)
    if doc.get("format_version") != CALIBRATION_FORMAT_VERSION:
        raise ConfigError(f"unsupported calibration format version {doc.get('format_version')}")
    sites: dict[str, QuantizerSite] = {}
    for e in doc["sites"]:
        params = None
        if e["s"] is not None:
            params = QuantParams(e["s"], e["z"], e["b"])
        rs = None
        if e["kind"] == "activation" and e["running_min"] is not None:
            rs = RangeState(e["running_min"], e["running_max"], observed_batches=1)
        sites[e["site_id"]] = QuantizerSite(e["site_id"], e["kind"], e["enabled"],
                                            params=params, range_state=rs)
    return sites
