"""Student initialization by layer copying and teacher-student training.

The objective is alpha_ce * CE(student, targets) + alpha_kl * KL between the
teacher and student output distributions, with padding positions masked out of
both terms. Optimization is AdamW with decoupled weight decay, a linear warmup
ramp and linear decay to zero. The checkpoint with the lowest validation token
error rate wins.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import data as qd
from . import model as qm
from . import tensor as qt
from .errors import ConfigError, DivergenceError


@dataclass(frozen=True)
class DistillConfig:
    alpha_ce: float = 1.0
    alpha_kl: float = 0.8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 2000
    warmup_steps: int | None = None  # None: 5% of total_steps
    batch_size: int = 16
    seed: int = 0
    kl_direction: str = "forward"
    eval_every: int = 200
    eval_examples: int = 64

    def __post_init__(self):
        if self.alpha_ce < 0 or self.alpha_kl < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.resolved_warmup >= self.total_steps:
            raise ConfigError("warmup_steps must be smaller than total_steps")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, round(0.05 * self.total_steps))


# ---------------------------------------------------------------------------
# layer copy plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CopyPlan:
    source_indices: tuple[int, ...]

    def __post_init__(self):
        idx = self.source_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError("copy plan indices must be strictly increasing")
        if idx and idx[0] < 0:
            raise ConfigError("copy plan indices must be nonnegative")


def make_copy_plan(teacher_depth: int, student_depth: int) -> CopyPlan:
    """Encoder rule: copy every k-th layer starting with the first, k = teacher/student.

    Only defined for divisible depths; see evenly_spaced_plan for the
    generalization the grid uses at non-divisible ratios.
    """
    if teacher_depth % student_depth != 0:
        raise ConfigError(
            f"teacher depth {teacher_depth} not divisible by student depth {student_depth}")
    stride = teacher_depth // student_depth
    return CopyPlan(tuple(range(0, teacher_depth, stride)))


def evenly_spaced_plan(teacher_depth: int, student_depth: int) -> CopyPlan:
    """floor(i * teacher/student): reduces to the strided rule when depths divide."""
    if student_depth > teacher_depth:
        raise ConfigError("student cannot be deeper than the teacher")
    return CopyPlan(tuple(i * teacher_depth // student_depth for i in range(student_depth)))


def make_decoder_plan(teacher_depth: int) -> CopyPlan:
    """Decoder rule: initial and final teacher layers (student decoder depth is 2)."""
    if teacher_depth < 2:
        raise ConfigError("decoder plan needs a teacher with at least 2 layers")
    return CopyPlan((0, teacher_depth - 1))


_GATE_PARAMS = ("w_g", "b_g")


def init_student(teacher: qm.EncoderDecoder, student_cfg: qm.ModelConfig,
                 enc_plan: CopyPlan, dec_plan: CopyPlan, seed: int = 0) -> qm.EncoderDecoder:
    """Build a student initialized from teacher weights per the copy plans.

    Copied layers are bit-equal to their teacher sources. Gate layers (absent in
    the teacher) keep their fresh near-open initialization.
    """
    tcfg = teacher.cfg
    for attr in ("model_dim", "n_heads", "ffn_dim", "vocab_size", "feature_dim",
                 "max_source_len", "max_target_len"):
        if getattr(tcfg, attr) != getattr(student_cfg, attr):
            raise ConfigError(f"teacher/student {attr} mismatch")
    if len(enc_plan.source_indices) != student_cfg.enc_layers:
        raise ConfigError("encoder plan length must equal student encoder depth")
    if len(dec_plan.source_indices) != student_cfg.dec_layers:
        raise ConfigError("decoder plan length must equal student decoder depth")
    if max(enc_plan.source_indices) >= tcfg.enc_layers:
        raise ConfigError("encoder plan exceeds teacher depth")
    if max(dec_plan.source_indices) >= tcfg.dec_layers:
        raise ConfigError("decoder plan exceeds teacher depth")

    student = qm.EncoderDecoder(student_cfg, seed=seed)
    tp = teacher.named_parameters()
    sp = student.named_parameters()

    def copy(dst: str, src: str):
        sp[dst].data[...] = tp[src].data

    for name in ("frontend.w", "frontend.b", "embed.table", "dec_pos.table",
                 "enc.final_ln.g", "enc.final_ln.b", "dec.final_ln.g", "dec.final_ln.b"):
        copy(name, name)
    for j, src in enumerate(enc_plan.source_indices):
        for name in sp:
            prefix = f"enc.{j}."
            if name.startswith(prefix) and not name.endswith(_GATE_PARAMS):
                copy(name, f"enc.{src}." + name[len(prefix):])
    for j, src in enumerate(dec_plan.source_indices):
        for name in sp:
            prefix = f"dec.{j}."
            if name.startswith(prefix) and not name.endswith(_GATE_PARAMS):
                copy(name, f"dec.{src}." + name[len(prefix):])
    return student


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def kd_loss_parts(student_logits: qt.Tensor, teacher_logits: qt.Tensor | None,
                  target_ids: np.ndarray, cfg: DistillConfig,
                  mask: np.ndarray | None = None) -> tuple[qt.Tensor, float, float]:
    """(total loss, ce value, kl value); logits [B, T, V] or [N, V]."""
    v = student_logits.shape[-1]
    flat_s = qt.reshape(student_logits, (-1, v)) if student_logits.ndim == 3 else student_logits
    targets = np.asarray(target_ids).reshape(-1)
    if mask is not None:
        keep = np.flatnonzero(np.asarray(mask).reshape(-1) > 0)
        if keep.size == 0:
            raise ValueError("kd_loss: mask removes every position")
        flat_s = _take_rows(flat_s, keep)
        targets = targets[keep]
    ce = qt.cross_entropy(flat_s, targets)
    loss = qt.mul(ce, cfg.alpha_ce)
    kl_value = 0.0
    if teacher_logits is not None and cfg.alpha_kl > 0:
        flat_t = qt.reshape(teacher_logits, (-1, v)) if teacher_logits.ndim == 3 else teacher_logits
        if mask is not None:
            flat_t = _take_rows(flat_t, keep)
        kl = qt.kl_divergence(flat_s, flat_t, direction=cfg.kl_direction)
        kl_value = kl.item()
        loss = qt.add(loss, qt.mul(kl, cfg.alpha_kl))
    return loss, ce.item(), kl_value


def kd_loss(student_logits: qt.Tensor, teacher_logits: qt.Tensor | None,
            target_ids: np.ndarray, cfg: DistillConfig,
            mask: np.ndarray | None = None) -> qt.Tensor:
    loss, _, _ = kd_loss_parts(student_logits, teacher_logits, target_ids, cfg, mask)
    return loss


def _take_rows(x: qt.Tensor, idx: np.ndarray) -> qt.Tensor:
    # row gather shares the embedding-lookup primitive (scatter-add backward)
    return qt.embedding_lookup(x, idx)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def lr_schedule(step: int, warmup: int, total: int) -> float:
    """Linear ramp 0 -> 1 over warmup, then linear decay 1 -> 0 at total."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step <= warmup:
        return step / warmup if warmup > 0 else 1.0
    return (total - step) / (total - warmup)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, qt.Tensor], state: AdamWState, cfg: DistillConfig,
               step: int, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update; step is 1-indexed for bias correction.

    Weight decay applies only to rank >= 2 parameters (biases, layer-norm
    params, and gate biases are excluded).
    """
    if lr is None:
        lr = cfg.learning_rate
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    step_size = np.float32(lr / (1.0 - cfg.beta1 ** step))
    inv_sqrt_bc2 = np.float32(1.0 / np.sqrt(1.0 - cfg.beta2 ** step))
    eps = np.float32(cfg.eps)
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (np.float32(1.0) - b1) * g
        v *= b2
        v += (np.float32(1.0) - b2) * (g * g)
        denom = np.sqrt(v)
        denom *= inv_sqrt_bc2
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= step_size
        if cfg.weight_decay and p.data.ndim >= 2:
            p.data *= np.float32(1.0 - lr * cfg.weight_decay)
        p.data -= denom


# ---------------------------------------------------------------------------
# training loop (also used, with teacher=None, to pretrain the teacher)
# ---------------------------------------------------------------------------

LOG_COLUMNS = ["step", "lr", "loss", "ce_term", "kl_term", "val_ter", "checkpoint_path"]


@dataclass
class TrainResult:
    best_checkpoint: str
    best_val_ter: float
    best_step: int
    log_rows: list[dict]


def _batch_order(n: int, batch_size: int, total_steps: int, seed: int) -> list[np.ndarray]:
    """Seeded epoch permutations chunked into full batches, cycled to cover total_steps."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB47C)))
    order: list[np.ndarray] = []
    while len(order) < total_steps:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            order.append(perm[start:start + batch_size])
            if len(order) >= total_steps:
                break
    return order


def validation_ter(mdl: qm.EncoderDecoder, examples: Sequence[qd.Example],
                   batch_size: int = 32) -> float:
    refs, hyps = [], []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = qd.collate(chunk)
        outs = mdl.greedy_decode_batch(batch.features, batch.feat_valid)
        for e, h in zip(chunk, outs):
            refs.append(e.target_ids)
            hyps.append(h)
    return qd.token_error_rate(refs, hyps)


def distill(teacher: qm.EncoderDecoder | None, student: qm.EncoderDecoder,
            train_ds: qd.Dataset, val_ds: qd.Dataset, cfg: DistillConfig,
            out_dir: str, tag: str = "student") -> TrainResult:
    """Train the student; returns the checkpoint with the lowest validation TER.

    With teacher=None this is plain cross-entropy training (used for the teacher
    itself). The teacher is never touched: only student parameters are updated.
    """
    os.makedirs(out_dir, exist_ok=True)
    params = student.named_parameters()
    state = AdamWState()
    warmup = cfg.resolved_warmup
    if len(train_ds.examples) < cfg.batch_size:
        raise ConfigError("training set smaller than one batch")
    order = _batch_order(len(train_ds.examples), cfg.batch_size, cfg.total_steps, cfg.seed)
    val_subset = val_ds.examples[: cfg.eval_examples]

    best_ter = float("inf")
    best_step = -1
    best_path = os.path.join(out_dir, f"{tag}-best.qdck")
    log_rows: list[dict] = []

    for step in range(1, cfg.total_steps + 1):
        batch = qd.collate([train_ds.examples[i] for i in order[step - 1]])
        lr = cfg.learning_rate * lr_schedule(step, warmup, cfg.total_steps)

        teacher_logits = None
        if teacher is not None:
            with qt.no_grad():
                teacher_logits = teacher.forward_batch(batch)
        with qt.finite_checks(False):  # the loss itself is screened below
            with qt.Tape() as tape:
                student_logits = student.forward_batch(batch)
                loss, ce_val, kl_val = kd_loss_parts(
                    student_logits, teacher_logits, batch.targets, cfg, batch.target_mask)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise DivergenceError(f"non-finite loss at step {step} ({tag})")
                tape.backward(loss)
        adamw_step(params, state, cfg, step, lr=lr)
        student.zero_grads()

        row = {"step": step, "lr": f"{lr:.8e}", "loss": f"{loss_val:.6f}",
               "ce_term": f"{ce_val:.6f}", "kl_term": f"{kl_val:.6f}",
               "val_ter": "", "checkpoint_path": ""}
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            ter = validation_ter(student, val_subset)
            row["val_ter"] = f"{ter:.6f}"
            if ter < best_ter:
                best_ter = ter
                best_step = step
                qm.save_checkpoint(student, best_path)
                row["checkpoint_path"] = best_path
        log_rows.append(row)

    log_path = os.path.join(out_dir, f"{tag}-train-log.csv")
    with open(log_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        w.writerows(log_rows)

    # leave the student holding the best weights
    best = qm.load_checkpoint(best_path)
    for name, p in student.named_parameters().items():
        p.data[...] = best.named_parameters()[name].data
    return TrainResult(best_path, best_ter, best_step, log_rows)
