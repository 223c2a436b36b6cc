"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major ``float64`` numpy buffer. Operations on
tensors that require gradients are recorded on the innermost active
:class:`Tape`; replaying the tape in reverse accumulates ``grad`` on every
leaf that requires it::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)
    x.grad  # array([2., 4.])

Reductions and matrix products use numpy/BLAS by default. Inside
:func:`ordered_reductions` they switch to a strict left-to-right summation
order, which reproduces a naive loop bit-for-bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "DegenerateInputError",
    "TapeError",
    "backward",
    "finite_diff_grad",
    "ordered_reductions",
    "matmul",
    "softmax",
    "softmax_rows",
    "normalize",
    "cross_entropy",
    "embedding",
    "concat",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
]


class NonFiniteError(ValueError):
    """A NaN or infinity appeared where finite values are required."""


class DegenerateInputError(ValueError):
    """Normalisation of a vector with zero (mean-removed) norm."""


class TapeError(RuntimeError):
    pass


_TAPES: list["Tape"] = []
_ORDERED = False


@contextlib.contextmanager
def ordered_reductions():
    """Use fixed left-to-right summation in ``matmul`` and ``sum``."""
    global _ORDERED
    prev = _ORDERED
    _ORDERED = True
    try:
        yield
    finally:
        _ORDERED = prev


class Tape:
    """Ordered record of primitive operations, consumed by one backward pass."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        self.nodes.append((out, parents, fn))

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("non-finite loss")
        outputs = {id(node[0]) for node in self.nodes}
        if id(loss) not in outputs:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
                if key not in outputs:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes.clear()


def backward(loss: "Tensor", tape: Tape) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    tape.backward(loss)


def _lift(x) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: tuple["Tensor", ...], fn: Callable) -> "Tensor":
    rg = bool(_TAPES) and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, rg)
    if rg:
        _TAPES[-1].record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = _sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = _sum(g, axis=axes, keepdims=True)
    return g.reshape(shape)


def _sum(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    if not _ORDERED:
        return np.sum(x, axis=axis, keepdims=keepdims)
    if axis is None:
        out = np.cumsum(x.reshape(-1))[-1] if x.size else np.float64(0.0)
        return np.reshape(out, (1,) * x.ndim) if keepdims else np.asarray(out)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(sorted(a % x.ndim for a in axes))
    out = x
    for a in reversed(axes):
        out = np.take(np.cumsum(out, axis=a), [-1], axis=a)
    return out if keepdims else np.squeeze(out, axis=axes)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not _ORDERED:
        return a @ b
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    acc = a[..., :, 0:1] * b[..., 0:1, :]
    for i in range(1, k):
        acc = acc + a[..., :, i : i + 1] * b[..., i : i + 1, :]
    return acc


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __len__(self) -> int:
        return len(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic ----------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        sa, sb = self.shape, other.shape
        return _result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _lift(other)
        sa, sb = self.shape, other.shape
        return _result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        return _result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        out = a / b

        def fn(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

        return _result(out, (self, other), fn)

    def __rtruediv__(self, other) -> "Tensor":
        return _lift(other) / self

    def __neg__(self) -> "Tensor":
        return _result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        p = float(exponent)
        return _result(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other) -> "Tensor":
        return matmul(_lift(other), self)

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _result(np.asarray(_sum(self.data, axis=axis, keepdims=keepdims)), (self,), fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation --------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _result(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (g.transpose(inv),),
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise TypeError("index with integer arrays, not Tensors")
        shape = self.shape

        def fn(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return _result(np.array(self.data[idx]), (self,), fn)

    # -- unary functions -----------------------------------------------
    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def relu(self) -> "Tensor":
        return relu(self)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; 1-D operands are promoted."""
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs at least 1-D operands")
    if a.ndim == 1:
        return matmul(a.reshape(1, -1), b).reshape(b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return matmul(a, b.reshape(-1, 1)).reshape(a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if A.ndim > 2 and B.ndim == 2:
        # One large GEMM instead of a batch of small ones; the weight gradient
        # is then a single product rather than a per-batch stack to be summed.
        lead = A.shape[:-1]
        A2 = A.reshape(-1, A.shape[-1])

        def fn2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return _mm(g2, B.T).reshape(A.shape), _mm(A2.T, g2)

        return _result(_mm(A2, B).reshape(lead + (B.shape[-1],)), (a, b), fn2)

    def fn(g):
        return (
            _unbroadcast(_mm(g, np.swapaxes(B, -1, -2)), A.shape),
            _unbroadcast(_mm(np.swapaxes(A, -1, -2), g), B.shape),
        )

    return _result(_mm(A, B), (a, b), fn)


def _unary(x, f, df) -> Tensor:
    x = _lift(x)
    a = x.data
    out = f(a)
    return _result(out, (x,), lambda g: (g * df(a, out),))


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda a, o: o)


def log(x) -> Tensor:
    x = _lift(x)
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _unary(x, np.log, lambda a, o: 1.0 / a)


def sqrt(x) -> Tensor:
    x = _lift(x)
    if (x.data < 0).any():
        raise NonFiniteError("sqrt of negative value")
    return _unary(x, np.sqrt, lambda a, o: 0.5 / o)


def sin(x) -> Tensor:
    return _unary(x, np.sin, lambda a, o: np.cos(a))


def cos(x) -> Tensor:
    return _unary(x, np.cos, lambda a, o: -np.sin(a))


def relu(x) -> Tensor:
    return _unary(x, lambda a: np.maximum(a, 0.0), lambda a, o: (a > 0).astype(np.float64))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(_lift(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows ``weight[ids]``; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.intp)
    shape = weight.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result(weight.data[ids], (weight,), fn)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis`` with per-row max subtraction.

    ``mask`` (broadcastable boolean) marks allowed entries; excluded entries
    get exactly zero weight. A row with no allowed entry is an error.
    """
    x = _lift(x)
    a = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, a.shape).any(axis=axis).all():
            raise ValueError("softmax row with every entry masked")
        a = np.where(mask, a, -np.inf)
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / _sum(e, axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - _sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), fn)


def softmax_rows(w) -> Tensor:
    """Softmax over the last axis."""
    return softmax(w, axis=-1)


def normalize(z, gain=None, kind: str = "rms") -> Tensor:
    """RMSNorm or LayerNorm over the last axis, without an epsilon.

    ``rms``:   sqrt(N) * gain * z / |z|
    ``layer``: the same applied to z minus its mean.
    """
    if kind not in ("rms", "layer"):
        raise ValueError(f"unknown norm kind {kind!r}")
    z = _lift(z)
    n = z.shape[-1]
    zc = z.data - np.mean(z.data, axis=-1, keepdims=True) if kind == "layer" else z.data
    r = np.sqrt(_sum(zc * zc, axis=-1, keepdims=True))
    if (r == 0).any():
        raise DegenerateInputError(f"{kind} normalisation of a zero-norm vector")
    zh = zc / r
    root = np.sqrt(n)
    if gain is None:
        gain_t = None
        out = root * zh
        parents: tuple[Tensor, ...] = (z,)
    else:
        gain_t = _lift(gain)
        out = root * zh * gain_t.data
        parents = (z, gain_t)

    def fn(g):
        gy = g * root if gain_t is None else g * (root * gain_t.data)
        dz = (gy - zh * _sum(gy * zh, axis=-1, keepdims=True)) / r
        if kind == "layer":
            dz = dz - np.mean(dz, axis=-1, keepdims=True)
        if gain_t is None:
            return (dz,)
        return dz, _unbroadcast(g * root * zh, gain_t.shape)

    return _result(out, parents, fn)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean categorical cross-entropy over positions where ``mask`` is true.

    ``logits`` has shape (..., V); ``targets`` holds integer class ids with the
    leading shape of ``logits``.
    """
    logits = _lift(logits)
    x = logits.data
    targets = np.asarray(targets, dtype=np.intp)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy with an empty mask")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(_sum(np.exp(shifted), axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = np.where(mask, lse - picked, 0.0)
    loss = _sum(nll) / count

    def fn(g):
        p = np.exp(shifted - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (mask[..., None] * (g / count)),)

    return _result(np.asarray(loss), (logits,), fn)


def finite_diff_grad(f: Callable[[Tensor], float], x, step: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(_lift(x).data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def evaluate(v: np.ndarray) -> float:
        val = f(Tensor._wrap(v.reshape(base.shape)))
        val = float(val.item() if isinstance(val, Tensor) else val)
        if not np.isfinite(val):
            raise NonFiniteError("finite-difference evaluation returned non-finite value")
        return val

    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (evaluate(xp) - evaluate(xm)) / (2.0 * step)
    return Tensor._wrap(grad.reshape(base.shape))


def parameters_grad_check(
    f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the (mutable) ``params`` on each call.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        saved = p.data

        def g(t: Tensor, p=p) -> float:
            p.data = t.data
            try:
                return f().item()
            finally:
                p.data = saved

        numeric = finite_diff_grad(g, saved, step).data
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
        worst = max(worst, float(np.max(np.abs(numeric - analytic)) / scale))
    return worst
