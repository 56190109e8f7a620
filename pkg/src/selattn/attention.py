"""Causal multi-head attention with the selective-masking transform.

Head 0's pre-softmax logits (or a dedicated bilinear form) score how much each
token wants to mask every earlier token.  The scores are constrained, shifted
one step into the future, accumulated with a prefix sum over the query axis
and subtracted from the logits of every head.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    cumsum,
    getitem,
    masked_fill,
    matmul,
    relu,
    reshape,
    roll,
    softmax_lastdim,
    transpose,
)

SELECTION_SOURCES = ("head_zero", "separate_bilinear")


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    d_head: int
    selective: bool = False
    selection_source: str = "head_zero"
    shift_future: bool = True
    constrain_relu: bool = True
    protect_bos: bool = True
    protect_self: bool = True

    def __post_init__(self):
        if self.n_heads < 1 or self.d_head < 1:
            raise ValueError("n_heads and d_head must be positive")
        if self.selection_source not in SELECTION_SOURCES:
            raise ValueError(f"selection_source must be one of {SELECTION_SOURCES}, got {self.selection_source!r}")

    def flags(self) -> dict:
        return asdict(self)


@dataclass
class SelectionState:
    """Raw selection ``S`` and accumulated mask ``F`` for one layer, shape ``[b, n, n]``."""

    S: Tensor | None
    F: Tensor | None

    def S_array(self, n: int | None = None, batch: int | None = None) -> np.ndarray:
        return _zeros_if_none(self.S, n, batch)

    def F_array(self, n: int | None = None, batch: int | None = None) -> np.ndarray:
        return _zeros_if_none(self.F, n, batch)


def _zeros_if_none(t: Tensor | None, n, batch) -> np.ndarray:
    if t is not None:
        return t.data
    if n is None or batch is None:
        raise ValueError("need n and batch to materialise an absent selection matrix")
    return np.zeros((batch, n, n))


_mask_cache: dict[int, np.ndarray] = {}


def _upper(n: int) -> np.ndarray:
    """Boolean mask of strictly-future positions (j > i)."""
    m = _mask_cache.get(n)
    if m is None:
        m = np.triu(np.ones((n, n), dtype=bool), k=1)
        _mask_cache[n] = m
    return m


def causal_logits(Q: Tensor, K: Tensor) -> Tensor:
    """Scaled dot products ``Q K^T / sqrt(d_head)`` with -inf above the diagonal."""
    if Q.shape != K.shape:
        raise ShapeError(f"Q and K must match, got {Q.shape} and {K.shape}")
    n = Q.shape[-2]
    if n == 0:
        raise ShapeError("empty sequence")
    raw = matmul(Q, transpose(K, tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)))
    raw = raw * (1.0 / math.sqrt(Q.shape[-1]))
    return masked_fill(raw, _upper(n), -np.inf)


def constrain(S, cfg: AttentionConfig) -> Tensor:
    """Apply the selection constraints to ``S`` (``[..., n, n]``).

    Entries above the diagonal are always zeroed (a token may only mask its
    past).  Then, per flags: relu, zero column 0 (BOS), zero the diagonal.
    """
    S = S if isinstance(S, Tensor) else Tensor(np.asarray(S, dtype=np.float64))
    n = S.shape[-1]
    if S.shape[-2] != n:
        raise ShapeError(f"selection matrix must be square, got {S.shape}")
    S = masked_fill(S, _upper(n), 0.0)
    if cfg.constrain_relu:
        S = relu(S)
    if cfg.protect_bos:
        col = np.zeros((n, n), dtype=bool)
        col[:, 0] = True
        S = masked_fill(S, col, 0.0)
    if cfg.protect_self:
        S = masked_fill(S, np.eye(n, dtype=bool), 0.0)
    return S


def accumulate(S, shift_future: bool = True) -> Tensor:
    """Prefix-sum ``S`` over the query axis.

    With ``shift_future`` the row of token ``i`` only affects tokens after it:
    ``F[i, j] = sum_{k <= i-1} S[k, j]``.  Without it, ``F[i, j] = sum_{k <= i} S[k, j]``.
    """
    S = S if isinstance(S, Tensor) else Tensor(np.asarray(S, dtype=np.float64))
    if shift_future:
        n = S.shape[-2]
        S = roll(S, 1, axis=-2)
        first_row = np.zeros((n, S.shape[-1]), dtype=bool)
        first_row[0] = True
        S = masked_fill(S, first_row, 0.0)
    return cumsum(S, axis=-2)


def compute_selection(
    logits: Tensor,
    cfg: AttentionConfig,
    x: Tensor | None = None,
    bilinear: tuple[Tensor, Tensor] | None = None,
) -> Tensor:
    """Constrained selection matrix ``[b, n, n]``.

    ``head_zero`` reads head 0 of the (causally masked) logits; the masked
    entries become 0.  ``separate_bilinear`` scores ``x`` with its own
    query/key projection pair.
    """
    n = logits.shape[-1]
    if cfg.selection_source == "head_zero":
        if logits.shape[1] < 1:
            raise ShapeError("head_zero selection needs at least one head")
        S = masked_fill(getitem(logits, (slice(None), 0)), _upper(n), 0.0)
    else:
        if x is None or bilinear is None:
            raise ValueError("separate_bilinear selection needs x and its projection pair")
        wq, wk = bilinear
        qs = matmul(x, wq)
        ks = matmul(x, wk)
        raw = matmul(qs, transpose(ks, (0, 2, 1))) * (1.0 / math.sqrt(wq.shape[-1]))
        S = masked_fill(raw, _upper(n), 0.0)
    return constrain(S, cfg)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def selective_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    cfg: AttentionConfig,
    *,
    w_out: Tensor | None = None,
    x: Tensor | None = None,
    bilinear: tuple[Tensor, Tensor] | None = None,
    keep_mask=None,
    keep_fn=None,
) -> tuple[Tensor, SelectionState]:
    """Multi-head attention over ``[b, h, n, d_head]`` inputs.

    When ``cfg.selective`` is set, ``F`` is subtracted from the logits of all
    heads (head 0 included).  ``keep_mask`` (``[b, n, n]`` bool) removes evicted
    context entries; alternatively ``keep_fn(F_array) -> keep_mask`` derives it
    from the freshly computed ``F``.  Returns the merged (and, if ``w_out`` is
    given, projected) output plus the layer's selection state.
    """
    logits = causal_logits(Q, K)
    state = SelectionState(None, None)
    if cfg.selective:
        S = compute_selection(logits, cfg, x=x, bilinear=bilinear)
        F = accumulate(S, cfg.shift_future)
        state = SelectionState(S, F)
        logits = logits - reshape(F, (F.shape[0], 1) + F.shape[1:])
    if keep_fn is not None:
        b, n = Q.shape[0], Q.shape[2]
        keep_mask = keep_fn(state.F_array(n, b))
    if keep_mask is not None:
        keep_mask = np.asarray(keep_mask, dtype=bool)
        if not keep_mask.all():
            logits = masked_fill(logits, ~keep_mask[:, None], -np.inf)
    weights = softmax_lastdim(logits)
    out = merge_heads(matmul(weights, V))
    if w_out is not None:
        out = matmul(out, w_out)
    return out, state


def standard_attention_reference(Q: np.ndarray, K: np.ndarray, V: np.ndarray, w_out=None) -> np.ndarray:
    """Plain causal softmax attention written directly in numpy (independent oracle)."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    b, h, n, dh = Q.shape
    out = np.zeros((b, n, h * dh))
    for bi in range(b):
        for hi in range(h):
            for i in range(n):
                s = np.array([Q[bi, hi, i] @ K[bi, hi, j] / math.sqrt(dh) for j in range(i + 1)])
                w = np.exp(s - s.max())
                w /= w.sum()
                out[bi, i, hi * dh:(hi + 1) * dh] = w @ V[bi, hi, : i + 1]
    if w_out is not None:
        out = out @ np.asarray(w_out, dtype=np.float64)
    return out


def dump_selection(state: SelectionState, directory, layer: int, cfg: AttentionConfig | None = None) -> list[Path]:
    """Write ``S`` and ``F`` as CSV, one file per batch element of this layer."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if state.F is None:
        raise ValueError("state has no selection matrices; materialise zeros with SelectionState.F_array")
    S, F = state.S.data, state.F.data
    paths = []
    for bi in range(F.shape[0]):
        path = directory / f"selection_layer{layer}_batch{bi}.csv"
        write_matrix_csv(path, {"S": S[bi], "F": F[bi]}, {"layer": layer, "batch": bi, **(cfg.flags() if cfg else {})})
        paths.append(path)
    return paths


def write_matrix_csv(path, matrices: dict[str, np.ndarray], meta: dict) -> None:
    """Row-major CSV: ``# key=value`` header lines then ``matrix,row,c0..c{n-1}``."""
    first = next(iter(matrices.values()))
    with open(path, "w", newline="") as fh:
        fh.write(f"# shape={first.shape[0]}x{first.shape[1]}\n")
        for k, v in meta.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(["matrix", "row"] + [f"c{j}" for j in range(first.shape[1])])
        for name, m in matrices.items():
            for i, row in enumerate(np.asarray(m)):
                w.writerow([name, i] + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[dict[str, np.ndarray], dict]:
    meta, rows = {}, {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        else:
            body.append(line)
    reader = csv.reader(body)
    next(reader)
    for rec in reader:
        rows.setdefault(rec[0], []).append([float(v) for v in rec[2:]])
    return {k: np.array(v) for k, v in rows.items()}, meta
