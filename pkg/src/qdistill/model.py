"""Toy encoder-decoder transcription model with a declarative quantization policy.

Shape conventions: source features [B, L, feature_dim], decoder token ids
[B, T]. The frontend is a single linear projection plus sinusoidal positions
(stride 1, so the memory length M equals L). Blocks are pre-norm; the token
embedding is tied to the output projection; the decoder uses a learned
positional table.

Every quantizable tensor flows through a named site. In "fp" mode sites pass
values through untouched; "calibrate" mode feeds activation observers;
"quant" mode fake-quantizes activations with calibrated params and weights
with their full-range params.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import attention as att
from . import quant as qz
from . import tensor as qt
from .errors import CheckpointError, ConfigError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_SPECIAL = 3

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 8
    dec_layers: int = 4
    model_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 512
    vocab_size: int = 64
    feature_dim: int = 64
    max_source_len: int = 36
    max_target_len: int = 10
    gated: bool = False
    gated_cross: bool = False

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.dec_layers < 1:
            raise ConfigError("dec_layers must be >= 1")
        if self.vocab_size <= N_SPECIAL:
            raise ConfigError(f"vocab_size must exceed {N_SPECIAL} special tokens")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * (-np.log(10000.0) / dim))
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)
    return table.astype(np.float32)


class _LayerNorm:
    def __init__(self, dim: int):
        self.g = qt.Tensor(np.ones(dim), requires_grad=True)
        self.b = qt.Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: qt.Tensor) -> qt.Tensor:
        return qt.layer_norm(x, self.g, self.b, eps=LN_EPS)

    def parameters(self):
        return {"g": self.g, "b": self.b}


class _FFN:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = qt.Tensor(rng.normal(0.0, INIT_STD, (dim, hidden)), requires_grad=True)
        self.b1 = qt.Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = qt.Tensor(rng.normal(0.0, INIT_STD, (hidden, dim)), requires_grad=True)
        self.b2 = qt.Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class _EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng):
        self.ln1 = _LayerNorm(cfg.model_dim)
        self.attn = att.AttentionBlock(
            att.AttentionConfig(cfg.n_heads, cfg.head_dim, gated=cfg.gated), rng)
        self.ln2 = _LayerNorm(cfg.model_dim)
        self.ffn = _FFN(cfg.model_dim, cfg.ffn_dim, rng)


class _DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng):
        self.ln1 = _LayerNorm(cfg.model_dim)
        self.self_attn = att.AttentionBlock(
            att.AttentionConfig(cfg.n_heads, cfg.head_dim, gated=cfg.gated, causal=True), rng)
        self.ln2 = _LayerNorm(cfg.model_dim)
        self.cross_attn = att.AttentionBlock(
            att.AttentionConfig(cfg.n_heads, cfg.head_dim, gated=cfg.gated_cross), rng)
        self.ln3 = _LayerNorm(cfg.model_dim)
        self.ffn = _FFN(cfg.model_dim, cfg.ffn_dim, rng)


# ---------------------------------------------------------------------------
# site enumeration (kept in sync with the forward pass below)
# ---------------------------------------------------------------------------


def _attn_site_suffixes(gated: bool) -> list[str]:
    base = ["in_q", "in_k", "in_v"]
    if gated:
        base.append("in_gate")
    return base + ["probs", "head_concat", "out"]


def activation_site_ids(cfg: ModelConfig) -> list[str]:
    ids = ["frontend/out"]
    for i in range(cfg.enc_layers):
        p = f"encoder/layer{i}"
        ids += [f"{p}/attn/{s}" for s in _attn_site_suffixes(cfg.gated)]
        ids += [f"{p}/ffn/in", f"{p}/ffn/hidden", f"{p}/ffn/out"]
    ids.append("encoder/final_norm")
    ids.append("decoder/embed/out")
    for i in range(cfg.dec_layers):
        p = f"decoder/layer{i}"
        ids += [f"{p}/self_attn/{s}" for s in _attn_site_suffixes(cfg.gated)]
        ids += [f"{p}/cross_attn/{s}" for s in _attn_site_suffixes(cfg.gated_cross)]
        ids += [f"{p}/ffn/in", f"{p}/ffn/hidden", f"{p}/ffn/out"]
    ids.append("decoder/final_norm")
    return ids


def default_skipped_sites(cfg: ModelConfig) -> set[str]:
    """Activation sites left unquantized by default: the output projection of the
    last encoder layer and the encoder's final layer norm."""
    return {f"encoder/layer{cfg.enc_layers - 1}/attn/out", "encoder/final_norm"}


def linear_weight_names(cfg: ModelConfig) -> list[str]:
    """Names of every linear-layer weight (the weight-quantization sites).

    The tied embedding table doubles as the output projection; the learned
    decoder positional table is a lookup, not a linear layer, and is excluded.
    """
    names = ["frontend.w", "embed.table"]
    for i in range(cfg.enc_layers):
        names += [f"enc.{i}.attn.{w}" for w in ("w_q", "w_k", "w_v", "w_o")]
        if cfg.gated:
            names.append(f"enc.{i}.attn.w_g")
        names += [f"enc.{i}.ffn.w1", f"enc.{i}.ffn.w2"]
    for i in range(cfg.dec_layers):
        names += [f"dec.{i}.self_attn.{w}" for w in ("w_q", "w_k", "w_v", "w_o")]
        if cfg.gated:
            names.append(f"dec.{i}.self_attn.w_g")
        names += [f"dec.{i}.cross_attn.{w}" for w in ("w_q", "w_k", "w_v", "w_o")]
        if cfg.gated_cross:
            names.append(f"dec.{i}.cross_attn.w_g")
        names += [f"dec.{i}.ffn.w1", f"dec.{i}.ffn.w2"]
    return names


ATTENTION_OUTPUT_SITES_PATTERN = ("/attn/out", "/self_attn/out", "/cross_attn/out")


def attention_output_sites(cfg: ModelConfig) -> list[str]:
    """Sites whose values are 'the outputs of all attention layers' for analytics."""
    return [s for s in activation_site_ids(cfg) if s.endswith(ATTENTION_OUTPUT_SITES_PATTERN)]


@dataclass
class QuantPolicy:
    """Set of quantizer sites over the whole model, with skip flags."""

    sites: dict[str, qz.QuantizerSite]
    bits: int = qz.DEFAULT_BITS
    ema_decay: float = qz.DEFAULT_EMA_DECAY

    @classmethod
    def default(cls, cfg: ModelConfig, bits: int = qz.DEFAULT_BITS,
                ema_decay: float = qz.DEFAULT_EMA_DECAY) -> "QuantPolicy":
        skipped = default_skipped_sites(cfg)
        sites: dict[str, qz.QuantizerSite] = {}
        for sid in activation_site_ids(cfg):
            sites[sid] = qz.QuantizerSite(sid, "activation", enabled=sid not in skipped,
                                          range_state=qz.RangeState(decay=ema_decay))
        for name in linear_weight_names(cfg):
            sid = f"weights/{name}"
            sites[sid] = qz.QuantizerSite(sid, "weight", enabled=True)
        return cls(sites, bits=bits, ema_decay=ema_decay)

    @classmethod
    def all_disabled(cls, cfg: ModelConfig) -> "QuantPolicy":
        policy = cls.default(cfg)
        for site in policy.sites.values():
            site.enabled = False
        return policy


class EncoderDecoder:
    """Whisper-shaped toy model; see module docstring for conventions."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
        d = cfg.model_dim

        fan = np.sqrt(2.0 / (cfg.feature_dim + d))
        self.frontend_w = qt.Tensor(rng.normal(0.0, fan, (cfg.feature_dim, d)), requires_grad=True)
        self.frontend_b = qt.Tensor(np.zeros(d), requires_grad=True)
        self.enc_pos = sinusoidal_positions(cfg.max_source_len, d)  # constant

        self.embed = qt.Tensor(rng.normal(0.0, INIT_STD, (cfg.vocab_size, d)), requires_grad=True)
        self.dec_pos = qt.Tensor(rng.normal(0.0, INIT_STD, (cfg.max_target_len, d)),
                                 requires_grad=True)

        self.enc_layers = [_EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.enc_final_ln = _LayerNorm(d)
        self.dec_layers = [_DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.dec_final_ln = _LayerNorm(d)

        self._params = self._build_registry()

        self.mode = "fp"
        self.sites: dict[str, qz.QuantizerSite] | None = None
        self.quant_bits = qz.DEFAULT_BITS
        self.trace = None  # optional dict[str, obj with add_batch(ndarray)]
        self._qweights: dict[str, qt.Tensor] = {}

    # -- parameter registry --------------------------------------------------

    def _build_registry(self) -> dict[str, qt.Tensor]:
        params: dict[str, qt.Tensor] = {
            "frontend.w": self.frontend_w,
            "frontend.b": self.frontend_b,
            "embed.table": self.embed,
            "dec_pos.table": self.dec_pos,
        }
        for i, layer in enumerate(self.enc_layers):
            for n, p in layer.ln1.parameters().items():
                params[f"enc.{i}.ln1.{n}"] = p
            for n, p in layer.attn.parameters().items():
                params[f"enc.{i}.attn.{n}"] = p
            for n, p in layer.ln2.parameters().items():
                params[f"enc.{i}.ln2.{n}"] = p
            for n, p in layer.ffn.parameters().items():
                params[f"enc.{i}.ffn.{n}"] = p
        for n, p in self.enc_final_ln.parameters().items():
            params[f"enc.final_ln.{n}"] = p
        for i, layer in enumerate(self.dec_layers):
            for n, p in layer.ln1.parameters().items():
                params[f"dec.{i}.ln1.{n}"] = p
            for n, p in layer.self_attn.parameters().items():
                params[f"dec.{i}.self_attn.{n}"] = p
            for n, p in layer.ln2.parameters().items():
                params[f"dec.{i}.ln2.{n}"] = p
            for n, p in layer.cross_attn.parameters().items():
                params[f"dec.{i}.cross_attn.{n}"] = p
            for n, p in layer.ln3.parameters().items():
                params[f"dec.{i}.ln3.{n}"] = p
            for n, p in layer.ffn.parameters().items():
                params[f"dec.{i}.ffn.{n}"] = p
        for n, p in self.dec_final_ln.parameters().items():
            params[f"dec.final_ln.{n}"] = p
        return params

    def named_parameters(self) -> dict[str, qt.Tensor]:
        return dict(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    # -- quantization plumbing -----------------------------------------------

    def apply_policy(self, policy: QuantPolicy) -> None:
        """Attach a copy of the policy's sites; unresolved site ids are an error."""
        valid = set(activation_site_ids(self.cfg))
        valid.update(f"weights/{n}" for n in linear_weight_names(self.cfg))
        unknown = sorted(set(policy.sites) - valid)
        if unknown:
            raise ConfigError(f"policy site ids do not resolve against this model: {unknown}")
        sites: dict[str, qz.QuantizerSite] = {}
        for sid, s in policy.sites.items():
            rs = None
            if s.range_state is not None:
                rs = qz.RangeState(s.range_state.running_min, s.range_state.running_max,
                                   s.range_state.decay, s.range_state.observed_batches)
            sites[sid] = qz.QuantizerSite(s.site_id, s.kind, s.enabled, s.params, rs)
        self.sites = sites
        self.quant_bits = policy.bits
        self.mode = "fp"
        self._qweights = {}

    def set_mode(self, mode: str) -> None:
        if mode not in ("fp", "calibrate", "quant"):
            raise ConfigError(f"unknown model mode {mode!r}")
        if mode in ("calibrate", "quant") and self.sites is None:
            raise ConfigError(f"mode {mode!r} requires a quantization policy")
        if mode == "quant":
            missing = [sid for sid, s in self.sites.items()
                       if s.kind == "activation" and s.enabled and s.params is None]
            if missing:
                raise ConfigError(f"quant mode requires calibrated params; missing: {sorted(missing)}")
            self._refresh_quantized_weights()
        self.mode = mode

    def _refresh_quantized_weights(self) -> None:
        self._qweights = {}
        for name in linear_weight_names(self.cfg):
            site = self.sites.get(f"weights/{name}")
            if site is None or not site.enabled:
                continue
            w = self._params[name]
            site.params = qz.weight_qparams(w, self.quant_bits)
            self._qweights[name] = qt.Tensor(qz.fake_quantize_array(w.data, site.params))

    def _w(self, name: str) -> qt.Tensor:
        if self.mode == "quant" and name in self._qweights:
            return self._qweights[name]
        return self._params[name]

    def _act(self, sid: str, t: qt.Tensor) -> qt.Tensor:
        if self.sites is not None:
            site = self.sites.get(sid)
            if site is not None and site.enabled and site.kind == "activation":
                if self.mode == "calibrate":
                    try:
                        qz.observe(site.range_state, t.data)
                    except Exception as e:
                        raise type(e)(f"{e} (site {sid})") from e
                elif self.mode == "quant":
                    t = qz.fake_quantize(t, site.params)
        if self.trace is not None and sid in self.trace:
            self.trace[sid].add_batch(t.data)
        return t

    def _attn_hook(self, path: str):
        return lambda suffix, t: self._act(f"{path}/{suffix}", t)

    # -- forward -------------------------------------------------------------

    def _linear(self, x: qt.Tensor, wname: str, bname: str | None) -> qt.Tensor:
        b = self._params[bname] if bname else None
        return qt.linear(x, self._w(wname), b)

    def _attention_block(self, block: att.AttentionBlock, prefix: str):
        """AttentionBlock whose projections respect quantized-weight mode."""
        if self.mode != "quant":
            return block
        clone = object.__new__(att.AttentionBlock)
        clone.cfg = block.cfg
        for w, b in (("w_q", "b_q"), ("w_k", "b_k"), ("w_v", "b_v"), ("w_o", "b_o")):
            name = f"{prefix}.{w}"
            setattr(clone, w, self._qweights.get(name, getattr(block, w)))
            setattr(clone, b, getattr(block, b))
        gname = f"{prefix}.w_g"
        clone.w_g = self._qweights.get(gname, block.w_g) if block.w_g is not None else None
        clone.b_g = block.b_g
        return clone

    def _ffn(self, layer_path: str, prefix: str, ffn: _FFN, x: qt.Tensor) -> qt.Tensor:
        x = self._act(f"{layer_path}/ffn/in", x)
        h = qt.gelu(qt.linear(x, self._w(f"{prefix}.ffn.w1"), ffn.b1))
        h = self._act(f"{layer_path}/ffn/hidden", h)
        out = qt.linear(h, self._w(f"{prefix}.ffn.w2"), ffn.b2)
        return self._act(f"{layer_path}/ffn/out", out)

    def encode_batch(self, features: np.ndarray, feat_valid: np.ndarray | None = None,
                     stop_at_layer: int | None = None) -> qt.Tensor:
        """features [B, L, feature_dim] -> memory [B, L, model_dim].

        With stop_at_layer=i, returns the post-ln1 tensor that layer i's
        attention sees (analytics introspection path).
        """
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 3 or feats.shape[2] != self.cfg.feature_dim:
            raise ValueError(f"encode expects [B, L, {self.cfg.feature_dim}] features, got {feats.shape}")
        b, length, _ = feats.shape
        if length > self.cfg.max_source_len:
            raise ValueError(f"source length {length} exceeds max_source_len {self.cfg.max_source_len}")
        if feat_valid is None:
            feat_valid = np.ones((b, length), dtype=np.float32)

        x = self._linear(qt.Tensor(feats), "frontend.w", "frontend.b")
        pos = np.broadcast_to(self.enc_pos[:length], (b, length, self.cfg.model_dim))
        x = qt.add(x, qt.Tensor(np.ascontiguousarray(pos)))
        x = self._act("frontend/out", x)

        mask = None
        if not np.all(feat_valid > 0):
            mask = att.key_padding_mask(feat_valid, length, self.cfg.n_heads)
        for i, layer in enumerate(self.enc_layers):
            p = f"encoder/layer{i}"
            hook = self._attn_hook(f"{p}/attn")
            block = self._attention_block(layer.attn, f"enc.{i}.attn")
            h = layer.ln1(x)
            if stop_at_layer == i:
                return h
            if self.cfg.gated:
                a = att.gated_attention(block, h, mask=mask, hook=hook)
            else:
                a = att.self_attention(block, h, mask=mask, hook=hook)
            x = qt.add(x, a)
            x = qt.add(x, self._ffn(p, f"enc.{i}", layer.ffn, layer.ln2(x)))
        x = self.enc_final_ln(x)
        return self._act("encoder/final_norm", x)

    def decode_batch(self, memory: qt.Tensor, feat_valid: np.ndarray | None,
                     ids: np.ndarray) -> qt.Tensor:
        """memory [B, L, D] + decoder input ids [B, T] -> logits [B, T, vocab]."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("decode expects [B, T] token ids")
        b, t = ids.shape
        if t > self.cfg.max_target_len:
            raise ValueError(f"target length {t} exceeds max_target_len {self.cfg.max_target_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError("token id out of range")

        emb = qt.embedding_lookup(self._w("embed.table"), ids)
        pos = np.broadcast_to(self.dec_pos.data[:t], (b, t, self.cfg.model_dim))
        x = qt.add(emb, qt.Tensor(np.ascontiguousarray(pos)))
        x = self._act("decoder/embed/out", x)

        cmask = att.causal_mask(t)
        xmask = None
        if feat_valid is not None and not np.all(feat_valid > 0):
            xmask = att.key_padding_mask(feat_valid, t, self.cfg.n_heads)
        for i, layer in enumerate(self.dec_layers):
            p = f"decoder/layer{i}"
            sblock = self._attention_block(layer.self_attn, f"dec.{i}.self_attn")
            shook = self._attn_hook(f"{p}/self_attn")
            h = layer.ln1(x)
            if self.cfg.gated:
                a = att.gated_attention(sblock, h, mask=cmask, hook=shook)
            else:
                a = att.self_attention(sblock, h, mask=cmask, hook=shook)
            x = qt.add(x, a)
            cblock = self._attention_block(layer.cross_attn, f"dec.{i}.cross_attn")
            c = att.cross_attention(cblock, layer.ln2(x), memory, mask=xmask,
                                    hook=self._attn_hook(f"{p}/cross_attn"))
            x = qt.add(x, c)
            x = qt.add(x, self._ffn(p, f"dec.{i}", layer.ffn, layer.ln3(x)))
        x = self.dec_final_ln(x)
        x = self._act("decoder/final_norm", x)
        return qt.linear(x, qt.transpose(self._w("embed.table"), (1, 0)))

    def decode_layer_inputs(self, memory: qt.Tensor, ids: np.ndarray
                            ) -> tuple[list[qt.Tensor], list[qt.Tensor]]:
        """Per-layer (self-attention input, cross-attention input) tensors for
        one decoder pass (analytics introspection path)."""
        ids = np.asarray(ids)
        b, t = ids.shape
        emb = qt.embedding_lookup(self._w("embed.table"), ids)
        pos = np.broadcast_to(self.dec_pos.data[:t], (b, t, self.cfg.model_dim))
        x = qt.add(emb, qt.Tensor(np.ascontiguousarray(pos)))
        x = self._act("decoder/embed/out", x)
        cmask = att.causal_mask(t)
        self_ins: list[qt.Tensor] = []
        cross_ins: list[qt.Tensor] = []
        for i, layer in enumerate(self.dec_layers):
            h = layer.ln1(x)
            self_ins.append(h)
            if self.cfg.gated:
                a = att.gated_attention(layer.self_attn, h, mask=cmask)
            else:
                a = att.self_attention(layer.self_attn, h, mask=cmask)
            x = qt.add(x, a)
            hc = layer.ln2(x)
            cross_ins.append(hc)
            x = qt.add(x, att.cross_attention(layer.cross_attn, hc, memory))
            x = qt.add(x, self._ffn(f"decoder/layer{i}", f"dec.{i}", layer.ffn, layer.ln3(x)))
        return self_ins, cross_ins

    def forward(self, features: np.ndarray, feat_valid: np.ndarray | None,
                dec_input: np.ndarray) -> qt.Tensor:
        memory = self.encode_batch(features, feat_valid)
        return self.decode_batch(memory, feat_valid, dec_input)

    def forward_batch(self, batch) -> qt.Tensor:
        """Teacher-forcing forward over a collated Batch (calibration/eval path)."""
        return self.forward(batch.features, batch.feat_valid, batch.dec_input)

    # -- single-example inference ---------------------------------------------

    def encode(self, features) -> qt.Tensor:
        """Single example [L, feature_dim] -> hidden states [M, model_dim], M == L."""
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 2:
            raise ValueError("encode expects [L, feature_dim]")
        memory = self.encode_batch(feats[None])
        return qt.reshape(memory, memory.shape[1:])

    def decode_step(self, memory: qt.Tensor, prefix_ids) -> np.ndarray:
        """Next-token logits [vocab] for a prefix, conditioned on encoder memory [M, D]."""
        ids = np.asarray(prefix_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("decode_step expects a flat prefix")
        with qt.no_grad():
            mem = qt.reshape(memory, (1,) + memory.shape) if memory.ndim == 2 else memory
            logits = self.decode_batch(mem, None, ids[None, :])
        return logits.data[0, -1].copy()

    def greedy_decode(self, features, max_len: int | None = None,
                      eos_id: int = EOS_ID) -> list[int]:
        """Argmax decoding until eos or max_len; returns emitted ids without bos/eos."""
        out = self.greedy_decode_batch(np.asarray(features, np.float32)[None], None,
                                       max_len=max_len, eos_id=eos_id)
        return out[0]

    def greedy_decode_batch(self, features: np.ndarray, feat_valid: np.ndarray | None,
                            max_len: int | None = None, eos_id: int = EOS_ID) -> list[list[int]]:
        if max_len is None:
            max_len = self.cfg.max_target_len - 1
        with qt.no_grad():
            memory = self.encode_batch(features, feat_valid)
            b = memory.shape[0]
            ids = np.full((b, 1), BOS_ID, dtype=np.int64)
            finished = np.zeros(b, dtype=bool)
            for _ in range(min(max_len, self.cfg.max_target_len - 1)):
                logits = self.decode_batch(memory, feat_valid, ids)
                nxt = logits.data[:, -1, :].argmax(axis=1).astype(np.int64)
                nxt[finished] = PAD_ID
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
                finished |= nxt == eos_id
                if finished.all():
                    break
        outs = []
        for row in ids[:, 1:]:
            toks = []
            for t in row:
                if t == eos_id or t == PAD_ID:
                    break
                toks.append(int(t))
            outs.append(toks)
        return outs


# ---------------------------------------------------------------------------
# checkpoints: magic, version, embedded config JSON, named tensors, crc32
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"QDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: EncoderDecoder, path: str) -> None:
    payload = io.BytesIO()
    payload.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = model.cfg.to_json().encode("utf-8")
    payload.write(struct.pack("<Q", len(cfg_bytes)))
    payload.write(cfg_bytes)
    params = model.named_parameters()
    payload.write(struct.pack("<Q", len(params)))
    for name in sorted(params):
        nb = name.encode("utf-8")
        payload.write(struct.pack("<Q", len(nb)))
        payload.write(nb)
        qt.write_array(payload, params[name].data)
    body = payload.getvalue()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path: str, expected_config: ModelConfig | None = None) -> EncoderDecoder:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, crc_stored = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    f = io.BytesIO(body)
    version = struct.unpack("<I", f.read(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = struct.unpack("<Q", f.read(8))[0]
    try:
        cfg = ModelConfig.from_json(f.read(cfg_len).decode("utf-8"))
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad embedded config: {e}") from e
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint config does not match the expected config "
            f"(stored {cfg}, expected {expected_config})")
    model = EncoderDecoder(cfg, seed=0)
    params = model.named_parameters()
    (n_tensors,) = struct.unpack("<Q", f.read(8))
    seen = set()
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<Q", f.read(8))
        name = f.read(name_len).decode("utf-8")
        arr = qt.read_array(f)
        if name not in params:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        if arr.shape != params[name].data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: {arr.shape} vs {params[name].data.shape}")
        params[name].data[...] = arr
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    return model


def checkpoint_sha256(path: str) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
