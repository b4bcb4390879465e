"""Dense float tensors with reverse-mode autodiff on a gradient tape.

Values are stored row-major as float32 by default (float64 is available
for gradient verification).  Differentiable ops record a backward closure
on the thread-local active tape; with no tape active every op is a plain
forward computation, so frozen models can be evaluated concurrently from
several threads.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError

FLOAT_DTYPES = (np.float32, np.float64)

_tls = threading.local()
_tape_ids = itertools.count(1)


def active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tensor:
    """A dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        keep = isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (FLOAT_DTYPES if keep else (np.float32,)):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def parameter(data, dtype=np.float32) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


class Tape:
    """Ordered record of executed ops; backward replays it in reverse.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    __slots__ = ("_entries", "_id")

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._id = next(_tape_ids)

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise UsageError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        out.requires_grad = True
        out.tape_id = self._id
        self._entries.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every recorded tensor reachable from loss."""
        if loss.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss.tape_id != self._id:
            raise UsageError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, backward in reversed(self._entries):
            if out.grad is not None:
                backward(out.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing NumPy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def assert_finite(t: Tensor, context: str = "tensor") -> Tensor:
    """Checked validation pass; raises NumericError on NaN or Inf."""
    if not np.isfinite(t.data).all():
        raise NumericError(f"{context} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):

        def backward(dout: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(dout, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(dout, b.data.shape))

        tape._record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):

        def backward(dout: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(dout * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(dout * a.data, b.data.shape))

        tape._record(out, backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, dout * c)

        tape._record(out, backward)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, dout.reshape(x.data.shape))

        tape._record(out, backward)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    tape = active_tape()
    if tape is not None and x.requires_grad:
        inverse = tuple(np.argsort(axes))

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, dout.transpose(inverse))

        tape._record(out, backward)
    return out


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (used to narrow a batch to survivors)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[indices])
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, indices, dout.astype(x.data.dtype, copy=False))

        tape._record(out, backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, np.broadcast_to(dout, x.data.shape))

        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Matrix products
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; backward is dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):

        def backward(dout: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, dout @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ dout)

        tape._record(out, backward)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"bmm expects stacked matrices, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"bmm extents differ: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):

        def backward(dout: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, dout @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                _accumulate(b, a.data.swapaxes(-1, -2) @ dout)

        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    xc = np.ascontiguousarray(x.data)
    out = Tensor(kernels.gelu_fwd(xc))
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, kernels.gelu_bwd(xc, np.ascontiguousarray(dout)))

        tape._record(out, backward)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, dout * (1.0 - y * y))

        tape._record(out, backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; rejects non-finite input."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    moved = np.moveaxis(x.data, axis, -1)
    rows = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
    y_rows = kernels.softmax_fwd(rows)
    out = Tensor(np.moveaxis(y_rows.reshape(moved.shape), -1, axis))
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            d_moved = np.moveaxis(dout, axis, -1)
            d_rows = np.ascontiguousarray(d_moved).reshape(rows.shape)
            dx_rows = kernels.softmax_bwd(y_rows, d_rows)
            _accumulate(x, np.moveaxis(dx_rows.reshape(moved.shape), -1, axis))

        tape._record(out, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature extent {n}"
        )
    rows = np.ascontiguousarray(x.data).reshape(-1, n)
    y_rows, mean, rstd = kernels.layernorm_fwd(rows, gain.data, bias.data, eps)
    out = Tensor(y_rows.reshape(x.data.shape))
    tape = active_tape()
    if tape is not None and (x.requires_grad or gain.requires_grad or bias.requires_grad):

        def backward(dout: np.ndarray) -> None:
            d_rows = np.ascontiguousarray(dout).reshape(-1, n)
            dx, dgain, dbias = kernels.layernorm_bwd(rows, gain.data, mean, rstd, d_rows)
            if x.requires_grad:
                _accumulate(x, dx.reshape(x.data.shape))
            if gain.requires_grad:
                _accumulate(gain, dgain)
            if bias.requires_grad:
                _accumulate(bias, dbias)

        tape._record(out, backward)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) in training mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout requires an rng")
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    return _dropout_with_mask(x, mask, rate)


def _dropout_with_mask(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    keep = mask / np.asarray(1.0 - rate, dtype=x.data.dtype)
    out = Tensor(x.data * keep)
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, dout * keep)

        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Embedding, pooling, loss
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of `table` for integer `ids` (any shape)."""
    ids = np.asarray(ids)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        offender = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise DataError(f"token id {offender} outside vocabulary of size {vocab}")
    out = Tensor(table.data[ids])
    tape = active_tape()
    if tape is not None and table.requires_grad:

        def backward(dout: np.ndarray) -> None:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            flat = dout.reshape(-1, table.data.shape[1])
            np.add.at(table.grad, ids.reshape(-1), flat.astype(table.data.dtype, copy=False))

        tape._record(out, backward)
    return out


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x[b, m, d] over the positions where mask[b, m] is 1."""
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise DataError("cannot pool a sequence with no unmasked positions")
    weights = (mask / counts[:, None]).astype(x.data.dtype)
    out = Tensor(np.einsum("bmd,bm->bd", x.data, weights))
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(dout: np.ndarray) -> None:
            _accumulate(x, dout[:, None, :] * weights[:, :, None])

        tape._record(out, backward)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    Two-class logits [b, 2]; binary labels per row.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or logits.data.shape[1] != 2:
        raise ShapeError(f"cross_entropy expects [b, 2] logits, got {logits.data.shape}")
    if labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch {logits.data.shape[0]}"
        )
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    labels = labels.astype(np.intp)
    b = labels.shape[0]
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(b), labels] - logsumexp
    out = Tensor(np.asarray(-logp_true.mean(), dtype=logits.data.dtype))
    tape = active_tape()
    if tape is not None and logits.requires_grad:

        def backward(dout: np.ndarray) -> None:
            p = np.exp(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))
            p[np.arange(b), labels] -= 1.0
            _accumulate(logits, p * (float(dout) / b))

        tape._record(out, backward)
    return out
