"""Dense numpy tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a backward closure.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order, accumulates gradients, and then frees the graph.
"""
from __future__ import annotations

import contextlib
import json
import zipfile
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(FloatingPointError):
    """A softmax row has every entry at -inf."""


class StaleGraphError(RuntimeError):
    """``backward`` was called on a graph that has already been consumed."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc" and dtype is None:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Leaf gradients accumulate across calls on *different* graphs; calling
        twice on the same graph raises :class:`StaleGraphError`.
        """
        if self._consumed:
            raise StaleGraphError("graph already consumed by a previous backward(); rebuild it")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
        self._consumed = True


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for tensor with {ndim} dims")
    return axis % ndim


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out.astype(x.dtype), (x,), backward)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient passes only where the value was not clipped."""
    out = x.data
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x.data >= lo
        out = np.maximum(out, lo)
    if hi is not None:
        keep &= x.data <= hi
        out = np.minimum(out, hi)
    return _make(out.astype(x.dtype), (x,), lambda g: (g * keep,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _make(out, (x,), lambda g: (_unbroadcast(np.where(mask, 0, g), x.shape),))


# -- shape ops --------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _is_advanced(index) else _assign_add(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def _assign_add(full: np.ndarray, index, g: np.ndarray) -> None:
    full[index] += g


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    axis = _check_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    return _make(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, -shift, axis=axis),))


# -- reductions -------------------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, int):
        _check_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the subgradient goes to the first maximising index."""
    axis = _check_axis(axis, x.ndim)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), backward)


def cumsum(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(axis, x.ndim)

    def backward(g):
        # reverse cumulative sum
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), backward)


# -- linear algebra ---------------------------------------------------------
def _contig(x: np.ndarray) -> np.ndarray:
    return x if x.flags.c_contiguous else np.ascontiguousarray(x)


def matmul(a, b) -> Tensor:
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # weight-style product; flatten leading dims for a single BLAS call
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = _flush_subnormal(np.array(g, order="C")).reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward)
    # strided views (head splits, transposes) fall off the BLAS fast path
    ad, bd = _contig(a.data), _contig(b.data)
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def backward(g):
        g = _flush_subnormal(np.array(g, order="C"))
        ga = _unbroadcast(np.matmul(g, _contig(np.swapaxes(bd, -1, -2))), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(_contig(np.swapaxes(ad, -1, -2)), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


# -- fused nn ops -----------------------------------------------------------
def _flush_subnormal(x: np.ndarray) -> np.ndarray:
    # subnormal floats make BLAS calls an order of magnitude slower
    x[np.abs(x) < np.finfo(x.dtype).tiny] = 0
    return x


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-stabilised softmax over the last axis; -inf entries map to exactly 0."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    m = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateRowError("softmax row with every entry masked to -inf")
    e = np.exp(x.data - m)
    p = _flush_subnormal(e / e.sum(axis=-1, keepdims=True))

    def backward(g):
        return (_flush_subnormal(p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _make(p, (x,), backward)


def rmsnorm(x: Tensor, gain: Tensor | None, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * gain`` over the last axis."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * gain.data if gain is not None else xhat
    parents = (x,) if gain is None else (x, gain)

    def backward(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        if gain is None:
            return (gx,)
        return gx, _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None

    return _make(out.astype(x.dtype), parents, backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(out, (weight,), backward)


def cross_entropy(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``loss_mask`` is set."""
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= vocab):
        raise ValueError(f"target id out of vocabulary of size {vocab}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss_mask selects no positions")
    safe_t = np.where(mask, targets, 0)
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp_t = np.take_along_axis(shifted - lse, safe_t[..., None], axis=-1)[..., 0]
    loss = -(logp_t * mask).sum() / count
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite cross-entropy")

    def backward(g):
        p = np.exp(shifted - lse)
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (mask[..., None] * (g / count)),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- checkpoints ------------------------------------------------------------
def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON header to an ``.npz`` container."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in tensors.items()},
        "meta": meta or {},
    }
    payload = {k: np.ascontiguousarray(v) for k, v in tensors.items()}
    payload["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # fixed zip timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for k, v in payload.items():
            info = zipfile.ZipInfo(k + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, v, allow_pickle=False)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format_version')!r}")
        tensors = {k: z[k] for k in header["tensors"]}
    for k, spec in header["tensors"].items():
        if list(tensors[k].shape) != spec["shape"]:
            raise ValueError(f"tensor {k!r} shape {tensors[k].shape} disagrees with header {spec['shape']}")
    return tensors, header["meta"]
