"""Synthetic frame-sequence transcription task and token error metrics.

Each example encodes a random symbol string as continuous frames: symbol k's
frames are its fixed prototype vector repeated 1-3 times (variable "speaking
rate") plus Gaussian noise. Prototypes are random orthonormal rows shared by
all splits of a task; splits draw from disjoint seeded streams. The OOD
variant differs only in noise level and frame-count distribution.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as qt
from .errors import DataError
from .model import BOS_ID, EOS_ID, N_SPECIAL, PAD_ID

DATASET_FORMAT_VERSION = 1

_SPLIT_TAGS = {"train": 1, "val": 2, "test": 3, "ood_test": 4}
_PROTO_TAG = 0x9A0


@dataclass(frozen=True)
class TaskSpec:
    n_symbols: int = 61
    feature_dim: int = 64
    frames_min: int = 1
    frames_max: int = 3
    noise_sigma: float = 0.1
    min_symbols: int = 3
    max_symbols: int = 8
    seed: int = 7

    def __post_init__(self):
        if self.n_symbols > self.feature_dim:
            raise DataError("orthonormal prototypes need feature_dim >= n_symbols")
        if not 1 <= self.frames_min <= self.frames_max:
            raise DataError("invalid frames_per_symbol range")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise DataError("invalid symbol-count range")

    @property
    def vocab_size(self) -> int:
        return self.n_symbols + N_SPECIAL

    @property
    def max_frames(self) -> int:
        return self.max_symbols * self.frames_max

    def ood(self, noise_sigma: float = 0.3, frames_min: int = 2, frames_max: int = 4) -> "TaskSpec":
        """Domain-shifted variant: same prototypes/vocab, noisier and slower frames."""
        return replace(self, noise_sigma=noise_sigma, frames_min=frames_min,
                       frames_max=frames_max)


@dataclass
class Example:
    features: np.ndarray  # [L, feature_dim] float32
    target_ids: list[int]  # bos, symbols..., eos

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f4").tobytes())
        h.update(np.asarray(self.target_ids, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass
class Dataset:
    spec: TaskSpec
    split: str
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)


def prototypes(spec: TaskSpec) -> np.ndarray:
    """Orthonormal symbol prototypes [n_symbols, feature_dim], fixed by the task seed."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, _PROTO_TAG)))
    gauss = rng.standard_normal((spec.feature_dim, spec.feature_dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # fix sign convention so the basis is deterministic
    return q[: spec.n_symbols].astype(np.float32)


def _split_rng(spec: TaskSpec, split: str) -> np.random.Generator:
    tag = _SPLIT_TAGS.get(split)
    if tag is None:
        tag = zlib.crc32(split.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence((spec.seed, tag)))


def generate_split(spec: TaskSpec, split: str, n: int) -> Dataset:
    rng = _split_rng(spec, split)
    protos = prototypes(spec)
    examples = []
    for _ in range(n):
        n_sym = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
        syms = rng.integers(0, spec.n_symbols, n_sym)
        frames = rng.integers(spec.frames_min, spec.frames_max + 1, n_sym)
        feats = np.repeat(protos[syms], frames, axis=0)
        if spec.noise_sigma > 0:
            feats = feats + rng.normal(0.0, spec.noise_sigma, feats.shape)
        ids = [BOS_ID] + [int(s) + N_SPECIAL for s in syms] + [EOS_ID]
        examples.append(Example(feats.astype(np.float32), ids))
    return Dataset(spec, split, examples)


def generate(spec: TaskSpec, n_train: int, n_val: int, n_test: int) -> tuple[Dataset, Dataset, Dataset]:
    """Train/validation/test splits from disjoint seeded streams."""
    return (generate_split(spec, "train", n_train),
            generate_split(spec, "val", n_val),
            generate_split(spec, "test", n_test))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    features: np.ndarray   # [B, L, F] float32, zero-padded
    feat_valid: np.ndarray  # [B, L] float32 {0, 1}
    dec_input: np.ndarray  # [B, T] int64 (bos, y_1..y_k, pad...)
    targets: np.ndarray    # [B, T] int64 (y_1..y_k, eos, pad...)
    target_mask: np.ndarray  # [B, T] float32 {0, 1}


def collate(examples: Sequence[Example]) -> Batch:
    b = len(examples)
    if b == 0:
        raise DataError("cannot collate an empty batch")
    max_l = max(e.features.shape[0] for e in examples)
    max_t = max(len(e.target_ids) - 1 for e in examples)
    fdim = examples[0].features.shape[1]
    feats = np.zeros((b, max_l, fdim), dtype=np.float32)
    valid = np.zeros((b, max_l), dtype=np.float32)
    dec_in = np.full((b, max_t), PAD_ID, dtype=np.int64)
    targets = np.full((b, max_t), PAD_ID, dtype=np.int64)
    mask = np.zeros((b, max_t), dtype=np.float32)
    for i, e in enumerate(examples):
        l = e.features.shape[0]
        feats[i, :l] = e.features
        valid[i, :l] = 1.0
        ids = np.asarray(e.target_ids, dtype=np.int64)
        t = len(ids) - 1
        dec_in[i, :t] = ids[:-1]
        targets[i, :t] = ids[1:]
        mask[i, :t] = 1.0
    return Batch(feats, valid, dec_in, targets, mask)


def batches(dataset: Dataset, batch_size: int, limit: int | None = None) -> list[Batch]:
    """Deterministic contiguous batches in dataset order (calibration/eval path)."""
    out = []
    for start in range(0, len(dataset.examples), batch_size):
        chunk = dataset.examples[start:start + batch_size]
        if not chunk:
            break
        out.append(collate(chunk))
        if limit is not None and len(out) >= limit:
            break
    return out


# ---------------------------------------------------------------------------
# token error rate
# ---------------------------------------------------------------------------


def edit_distance(reference: Sequence[int], hypothesis: Sequence[int]) -> int:
    """Levenshtein distance (substitutions + insertions + deletions)."""
    n, m = len(reference), len(hypothesis)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ri = reference[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ri == hypothesis[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[m]


def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """Edit distance divided by reference length.

    Can exceed 1.0 when the hypothesis carries many insertions.
    """
    if len(reference) == 0:
        raise ValueError("wer: empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def strip_specials(ids: Iterable[int]) -> list[int]:
    return [int(t) for t in ids if int(t) >= N_SPECIAL]


def token_error_rate(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """Corpus-level TER: total edit distance over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError("token_error_rate: length mismatch")
    total_edits = 0
    total_len = 0
    for r, h in zip(refs, hyps):
        r = strip_specials(r)
        h = strip_specials(h)
        if not r:
            raise ValueError("token_error_rate: empty reference")
        total_edits += edit_distance(r, h)
        total_len += len(r)
    return total_edits / total_len


# ---------------------------------------------------------------------------
# dataset files (cache only; regenerable from the spec)
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path: str) -> None:
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "split": ds.split,
        "count": len(ds.examples),
        "spec": asdict(ds.spec),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for e in ds.examples:
            qt.write_array(f, e.features)
            ids = np.asarray(e.target_ids, dtype="<i8")
            f.write(struct.pack("<Q", ids.size))
            f.write(ids.tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: bad dataset header: {e}") from e
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported dataset format version")
        spec = TaskSpec(**header["spec"])
        examples = []
        for _ in range(header["count"]):
            try:
                feats = qt.read_array(f)
                (n_ids,) = struct.unpack("<Q", f.read(8))
                ids = np.frombuffer(f.read(8 * n_ids), dtype="<i8")
                if ids.size != n_ids:
                    raise ValueError("truncated ids")
            except (ValueError, struct.error) as e:
                raise DataError(f"{path}: truncated dataset: {e}") from e
            examples.append(Example(feats, [int(i) for i in ids]))
    return Dataset(spec, header["split"], examples)
