"""Dense tensors with tape-based reverse-mode automatic differentiation.

Design constraints, in order of priority:

* bit-reproducibility: every kernel has a fixed reduction order, so a
  computation replayed with identical inputs gives bit-identical outputs
  and gradients.  Matrix products go through ``np.einsum`` rather than
  BLAS because einsum accumulates over the contracted axis sequentially
  (BLAS kernels reorder and fuse, which changes last-ulp results).
* simplicity: define-by-run tape, no graph rewriting, 64-bit floats by
  default.  float32 is supported but excluded from gradient-check
  tolerances.

Recording happens only while a :class:`Tape` is active, so inference
code that never opens a tape pays no autodiff overhead.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class NumericalError(RuntimeError):
    """A NaN or Inf appeared where only finite values are allowed."""


class Tensor:
    """Dense n-dimensional value with optional gradient tracking.

    ``data`` is always a C-contiguous float array.  ``grad`` is either
    ``None`` or an array of identical shape; it is populated only by
    :meth:`Tape.backward` and only for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


class Tape:
    """Ordered record of operations for reverse-mode differentiation.

    Operations are appended in execution order, so the record is a
    topological order by construction; ``backward`` replays it in exact
    reverse.  Tapes nest (the innermost active tape records).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tapes unwound out of order"

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        Gradients accumulate (+=) into pre-existing ``grad`` arrays, so
        calling backward for several losses between optimizer steps sums
        their gradients; frozen tensors never receive grad storage.
        """
        if loss.data.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        loss.grad = np.ones((), dtype=loss.dtype)
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g


_ACTIVE: list[Tape] = []


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _register(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    if _ACTIVE and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        _ACTIVE[-1]._nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a_d, b_d = _data(a), _data(b)
    out = Tensor(a_d + b_d)

    def bwd(g):
        ga = _unbroadcast(g, a_d.shape) if isinstance(a, Tensor) else None
        gb = _unbroadcast(g, b_d.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _register(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a_d, b_d = _data(a), _data(b)
    out = Tensor(a_d - b_d)

    def bwd(g):
        ga = _unbroadcast(g, a_d.shape) if isinstance(a, Tensor) else None
        gb = -_unbroadcast(g, b_d.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _register(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a_d, b_d = _data(a), _data(b)
    out = Tensor(a_d * b_d)

    def bwd(g):
        ga = _unbroadcast(g * b_d, a_d.shape) if isinstance(a, Tensor) else None
        gb = _unbroadcast(g * a_d, b_d.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _register(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def bwd(g):
        return (g * c,)

    return _register(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _register(out, (a,), bwd)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = Tensor(np.swapaxes(a.data, i, j))

    def bwd(g):
        return (np.ascontiguousarray(np.swapaxes(g, i, j)),)

    return _register(out, (a,), bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    return swapaxes(a, 0, 1)


def concat(parts: list, axis: int) -> Tensor:
    datas = [_data(p) for p in parts]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return [
            np.ascontiguousarray(piece) if isinstance(p, Tensor) else None
            for p, piece in zip(parts, pieces)
        ]

    return _register(out, tuple(parts), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def bwd(g):
        return (_unbroadcast(g, a.data.shape),)

    return _register(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _register(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout.  rate == 0 is an exact no-op (no tape node)."""
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b) -> Tensor:
    """Matrix product with sequential accumulation over the inner axis.

    Accepts ``[..., m, k] @ [..., k, n]`` where the leading dimensions
    either match exactly or one operand is a plain matrix (the usual
    weight case).  Bit-identical to a naive triple loop.
    """
    a_d, b_d = _data(a), _data(b)
    if a_d.ndim < 2 or b_d.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a_d.shape} and {b_d.shape}"
        )
    if a_d.shape[-1] != b_d.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a_d.shape} x {b_d.shape}"
        )
    if a_d.ndim > 2 and b_d.ndim > 2 and a_d.shape[:-2] != b_d.shape[:-2]:
        raise ShapeError(
            f"matmul leading dimensions disagree: {a_d.shape} x {b_d.shape}"
        )
    out = Tensor(np.einsum("...ik,...kj->...ij", a_d, b_d))

    def bwd(g):
        ga = gb = None
        if isinstance(a, Tensor):
            ga = np.einsum("...ij,...kj->...ik", g, b_d)
            ga = _unbroadcast(ga, a_d.shape)
        if isinstance(b, Tensor):
            if b_d.ndim == 2 and g.ndim > 2:
                gb = np.einsum(
                    "ik,ij->kj", a_d.reshape(-1, a_d.shape[-1]),
                    g.reshape(-1, g.shape[-1]),
                )
            else:
                gb = np.einsum("...ik,...ij->...kj", a_d, g)
                gb = _unbroadcast(gb, b_d.shape)
        return ga, gb

    return _register(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# neural-net primitives


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _register(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if _data(gamma).shape != (d,) or _data(beta).shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got "
            f"{_data(gamma).shape} and {_data(beta).shape}"
        )
    if eps < 0:
        raise ContractError(f"layer_norm eps must be >= 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    g_d, b_d = _data(gamma), _data(beta)
    out = Tensor(xh * g_d + b_d)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        d_gamma = (g * xh).sum(axis=lead) if isinstance(gamma, Tensor) else None
        d_beta = g.sum(axis=lead) if isinstance(beta, Tensor) else None
        dxh = g * g_d
        dx = inv * (
            dxh
            - dxh.mean(axis=-1, keepdims=True)
            - xh * (dxh * xh).mean(axis=-1, keepdims=True)
        )
        return dx, d_gamma, d_beta

    return _register(out, (x, gamma, beta), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact erf formulation x * Phi(x), not the tanh approximation."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi_cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi_cdf + x.data * pdf),)

    return _register(out, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (dt,)

    return _register(out, (table,), bwd)


def _log_softmax_rows(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    shifted = rows - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def cross_entropy_last_token(
    logits: Tensor, targets: np.ndarray, lengths: np.ndarray
) -> Tensor:
    """Mean negative log-likelihood of the final valid position only.

    ``logits`` is [batch, seq, vocab]; for example i the scored position
    is ``lengths[i] - 1`` with class ``targets[i]``.  Every other
    position contributes nothing: its logit gradient is exactly zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    b, seq, vocab = logits.shape
    if targets.shape != (b,) or lengths.shape != (b,):
        raise ShapeError(
            f"targets/lengths must be ({b},), got {targets.shape} and {lengths.shape}"
        )
    if lengths.min() < 1 or lengths.max() > seq:
        raise ContractError(f"lengths must lie in [1, {seq}]")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    rows = logits.data[np.arange(b), lengths - 1]
    logp = _log_softmax_rows(rows)
    out = Tensor(-logp[np.arange(b), targets].sum() / b)

    def bwd(g):
        dl = np.zeros_like(logits.data)
        p = np.exp(logp)
        p[np.arange(b), targets] -= 1.0
        dl[np.arange(b), lengths - 1] = p * (float(g) / b)
        return (dl,)

    return _register(out, (logits,), bwd)


def cross_entropy_sum(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray
) -> tuple[Tensor, int]:
    """Summed token-level cross entropy over masked-in positions.

    Returns (loss_sum, n_positions).  Sum reduction keeps gradient
    accumulation over micro-batches exactly equivalent to one large
    batch; callers normalize by the total position count at update time.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    b, seq, vocab = logits.shape
    if targets.shape != (b, seq) or mask.shape != (b, seq):
        raise ShapeError(
            f"targets/mask must be ({b}, {seq}), got {targets.shape} and {mask.shape}"
        )
    valid = targets[mask]
    if valid.size == 0:
        raise ContractError("cross_entropy_sum needs at least one valid position")
    if valid.min() < 0 or valid.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    rows = logits.data[mask]
    logp = _log_softmax_rows(rows)
    n = rows.shape[0]
    out = Tensor(-logp[np.arange(n), valid].sum())

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), valid] -= 1.0
        dl = np.zeros_like(logits.data)
        dl[mask] = p * float(g)
        return (dl,)

    return _register(out, (logits,), bwd), n


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f, params: list[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time.

    ``f`` takes no arguments, reads the current parameter values, and
    returns a scalar float.  Independent of the tape machinery by
    construction; used to cross-check :meth:`Tape.backward`.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor), 0.0 for empty input."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def assert_finite(x, what: str = "tensor") -> None:
    arr = _data(x)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contains NaN or Inf")
