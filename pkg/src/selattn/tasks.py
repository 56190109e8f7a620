"""Synthetic sequence tasks and byte-level corpus batching.

Every sample is next-token aligned: ``targets[i]`` is the token that should be
predicted after reading ``tokens[: i + 1]`` and ``loss_mask[i]`` says whether
position ``i`` is scored.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

PAD, BOS = 0, 1


@dataclass
class TaskSample:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if not (len(self.tokens) == len(self.targets) == len(self.loss_mask)):
            raise ValueError("tokens, targets and loss_mask must have equal lengths")
        if not self.loss_mask.any():
            raise ValueError("sample has no scored position")

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> str:
        return json.dumps(
            {"tokens": self.tokens.tolist(), "targets": self.targets.tolist(), "loss_mask": self.loss_mask.astype(int).tolist()}
        )

    @classmethod
    def from_json(cls, line: str) -> "TaskSample":
        d = json.loads(line)
        return cls(d["tokens"], d["targets"], np.asarray(d["loss_mask"], dtype=bool))


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    def subset(self, idx) -> "Batch":
        return Batch(self.tokens[idx], self.targets[idx], self.loss_mask[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.tokens, self.targets, self.loss_mask):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def stack(samples: Iterable[TaskSample]) -> Batch:
    samples = list(samples)
    n = max(len(s) for s in samples)
    b = len(samples)
    tokens = np.full((b, n), PAD, dtype=np.int64)
    targets = np.full((b, n), PAD, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, s in enumerate(samples):
        tokens[i, : len(s)] = s.tokens
        targets[i, : len(s)] = s.targets
        mask[i, : len(s)] = s.loss_mask
    return Batch(tokens, targets, mask)


def write_jsonl(samples: Iterable[TaskSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_jsonl(path) -> list[TaskSample]:
    with open(path) as fh:
        return [TaskSample.from_json(line) for line in fh if line.strip()]


def _next_token(seq: np.ndarray, scored: np.ndarray) -> TaskSample:
    """Turn a full sequence plus per-token "is predicted" flags into a sample."""
    tokens = seq[:-1]
    targets = seq[1:]
    return TaskSample(tokens, targets, scored[1:])


# -- variable assignment ------------------------------------------------------
@dataclass(frozen=True)
class VarAssignSpec:
    num_vars: int = 3
    num_values: int = 1000
    num_assignments: int = 128
    ood_num_values: int = 2

    def __post_init__(self):
        if self.num_vars < 1:
            raise ValueError("num_vars must be >= 1")
        if self.num_values < 2 or self.ood_num_values < 2:
            raise ValueError("need at least 2 values")
        if self.ood_num_values > self.num_values:
            raise ValueError("ood_num_values cannot exceed num_values")
        if self.num_assignments < 1:
            raise ValueError("num_assignments must be >= 1")

    # vocabulary: PAD, BOS, "v=" per variable, "v?" per variable, values
    def assign_token(self, var: int) -> int:
        return 2 + var

    def query_token(self, var: int) -> int:
        return 2 + self.num_vars + var

    def value_token(self, value: int) -> int:
        return 2 + 2 * self.num_vars + value

    @property
    def vocab_size(self) -> int:
        return 2 + 2 * self.num_vars + self.num_values

    @property
    def seq_len(self) -> int:
        # BOS, (var, value) pairs, query; the answer is only a target
        return 2 + 2 * self.num_assignments


def gen_variable_assignment(spec: VarAssignSpec, seed, ood: bool = False) -> TaskSample:
    """``BOS x= 7 y= 3 x= 1 ... x?`` -> most recent value assigned to ``x``.

    The queried variable is drawn uniformly from those assigned at least once.

    With ``ood`` every assignment draws from only ``spec.ood_num_values``
    distinct values (picked per sample).
    """
    rng = np.random.default_rng(seed)
    vars_ = rng.integers(0, spec.num_vars, spec.num_assignments)
    if ood:
        pool = rng.choice(spec.num_values, spec.ood_num_values, replace=False)
        values = pool[rng.integers(0, spec.ood_num_values, spec.num_assignments)]
    else:
        values = rng.integers(0, spec.num_values, spec.num_assignments)
    # uniform over the variables that were assigned at least once
    query = int(rng.choice(np.unique(vars_)))
    return encode_variable_assignment(spec, list(zip(vars_.tolist(), values.tolist())), query)


def encode_variable_assignment(spec: VarAssignSpec, assignments, query: int) -> TaskSample:
    """Build the sample for an explicit ``[(var, value), ...]`` list.

    If the queried variable was never assigned, the answer is undefined and a
    ``ValueError`` is raised.
    """
    answer = None
    seq = [BOS]
    for var, value in assignments:
        seq += [spec.assign_token(var), spec.value_token(value)]
        if var == query:
            answer = value
    if answer is None:
        raise ValueError(f"variable {query} is never assigned")
    seq += [spec.query_token(query), spec.value_token(answer)]
    scored = np.zeros(len(seq), dtype=bool)
    scored[-1] = True
    return _next_token(np.array(seq), scored)


# -- copy ---------------------------------------------------------------------
@dataclass(frozen=True)
class CopySpec:
    max_len: int = 24
    num_symbols: int = 16

    def __post_init__(self):
        if self.max_len < 1 or self.num_symbols < 1:
            raise ValueError("max_len and num_symbols must be >= 1")

    SEP = 2
    EOS = 3

    def symbol_token(self, s: int) -> int:
        return 4 + s

    @property
    def vocab_size(self) -> int:
        return 4 + self.num_symbols

    @property
    def context_size(self) -> int:
        return 3 + 2 * self.max_len


def gen_copy(spec: CopySpec | int = 24, seed=0, length: int | None = None) -> TaskSample:
    """``BOS s_1..s_L SEP s_1..s_L EOS`` padded to ``3 + 2 max_len``; the copy is scored."""
    if isinstance(spec, int):
        spec = CopySpec(max_len=spec)
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, spec.max_len + 1)) if length is None else length
    if not 1 <= L <= spec.max_len:
        raise ValueError(f"length must be in [1, {spec.max_len}]")
    body = [spec.symbol_token(int(s)) for s in rng.integers(0, spec.num_symbols, L)]
    seq = [BOS] + body + [spec.SEP] + body + [spec.EOS]
    scored = np.zeros(len(seq), dtype=bool)
    scored[L + 2: 2 * L + 2] = True
    # pad so the token stream (sequence minus its final target) is 3 + 2 max_len long
    pad = spec.context_size + 1 - len(seq)
    seq += [PAD] * pad
    scored = np.concatenate([scored, np.zeros(pad, dtype=bool)])
    return _next_token(np.array(seq), scored)


# -- parity* ------------------------------------------------------------------
ZERO_BIT, ONE_BIT = 2, 3
PARITY_VOCAB = 4


def gen_parity_star(length: int, seed=0, odd_bits=None) -> TaskSample:
    """Bits at odd positions are random; each even position holds the running parity.

    Positions count from 1 after BOS.  Only predictions of even positions are scored.
    """
    if length < 2:
        raise ValueError("length must be >= 2")
    n_odd = (length + 1) // 2
    if odd_bits is None:
        odd_bits = np.random.default_rng(seed).integers(0, 2, n_odd)
    odd_bits = np.asarray(odd_bits, dtype=np.int64)
    if len(odd_bits) != n_odd:
        raise ValueError(f"need {n_odd} odd bits for length {length}")
    bits = np.zeros(length, dtype=np.int64)
    bits[0::2] = odd_bits
    bits[1::2] = np.cumsum(odd_bits)[: length // 2] % 2
    seq = np.concatenate([[BOS], bits + ZERO_BIT])
    positions = np.arange(len(seq))
    scored = (positions % 2 == 0) & (positions > 0)
    return _next_token(seq, scored)


def parity_bits(sample: TaskSample) -> np.ndarray:
    """Recover the bit string (positions 1..length) from a parity sample."""
    seq = np.concatenate([sample.tokens, sample.targets[-1:]])
    return seq[1:] - ZERO_BIT


# -- byte-level corpus ----------------------------------------------------------
BYTE_PAD, BYTE_BOS, BYTE_EOS = 256, 257, 258
BYTE_VOCAB = 259


def encode(text: str | bytes) -> np.ndarray:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    raw = bytes(int(i) for i in ids if 0 <= int(i) < 256)
    return raw.decode("utf-8", errors="surrogateescape")


def corpus_windows(data: np.ndarray, context_size: int) -> Batch:
    """Chop a byte stream into BOS-prefixed windows; the final partial window is padded."""
    if len(data) == 0:
        raise ValueError("empty corpus")
    if context_size < 2:
        raise ValueError("context_size must be >= 2")
    step = context_size  # each window predicts context_size bytes
    n_win = -(-len(data) // step)
    tokens = np.full((n_win, context_size), BYTE_PAD, dtype=np.int64)
    targets = np.full((n_win, context_size), BYTE_PAD, dtype=np.int64)
    mask = np.zeros((n_win, context_size), dtype=bool)
    for w in range(n_win):
        chunk = data[w * step:(w + 1) * step]
        k = len(chunk)
        tokens[w, 0] = BYTE_BOS
        tokens[w, 1:k] = chunk[: k - 1]
        targets[w, :k] = chunk
        mask[w, :k] = True
    return Batch(tokens, targets, mask)


def load_corpus(paths, context_size: int) -> Batch:
    """Read one or more files as raw bytes and window them (no decoding involved)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    data = np.concatenate([np.fromfile(Path(p), dtype=np.uint8).astype(np.int64) for p in paths])
    return corpus_windows(data, context_size)


def split_corpus(windows: Batch, val_fraction: float = 0.1, seed: int = 0) -> tuple[Batch, Batch]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(windows))
    n_val = max(1, int(round(len(windows) * val_fraction)))
    if n_val >= len(windows):
        raise ValueError("corpus too small to split")
    return windows.subset(np.sort(order[n_val:])), windows.subset(np.sort(order[:n_val]))


def iterate_batches(windows: Batch, batch_size: int, seed: int = 0) -> Iterator[Batch]:
    """Endless shuffled epochs over the windows; the order depends only on ``seed``."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(windows))
        for s in range(0, len(order) - batch_size + 1 if len(order) >= batch_size else 1, batch_size):
            yield windows.subset(order[s:s + batch_size])


# -- task registry ----------------------------------------------------------------
class TaskStream:
    """Deterministic batch source: batch ``k`` depends only on ``(seed, k)``."""

    def __init__(self, make_sample, seed: int = 0):
        self.make_sample = make_sample
        self.seed = seed

    def batch(self, index: int, batch_size: int) -> Batch:
        ss = np.random.SeedSequence([self.seed, index])
        seeds = ss.generate_state(batch_size, dtype=np.uint64)
        return stack(self.make_sample(int(s)) for s in seeds)

    def sample_set(self, count: int, index: int = 10**9) -> Batch:
        return self.batch(index, count)


def varass_stream(spec: VarAssignSpec, seed: int = 0, ood: bool = False) -> TaskStream:
    return TaskStream(lambda s: gen_variable_assignment(spec, s, ood=ood), seed)


def copy_stream(spec: CopySpec, seed: int = 0) -> TaskStream:
    return TaskStream(lambda s: gen_copy(spec, s), seed)


def parity_stream(length: int, seed: int = 0) -> TaskStream:
    return TaskStream(lambda s: gen_parity_star(length, s), seed)
