"""Dense tensors with reverse-mode automatic differentiation.

Everything numeric in this package flows through the `Tensor` class below.
The graph is recorded implicitly: every operation attaches its parents and a
backward closure to its output, and `backward()` replays the closures once,
in reverse topological order.  Default precision is float32; wrap code in
`float64_mode()` when running gradient checks.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's contract."""


class NonDifferentiableError(RuntimeError):
    """grad_check found a point where analytic and numeric gradients disagree
    badly even after a spot re-check with a smaller step."""


_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def default_dtype() -> np.dtype:
    """Dtype used for newly created tensors (float32 unless in float64 mode)."""
    return _dtype()


@contextmanager
def float64_mode():
    """Run the enclosed block with float64 tensors (for gradient checks)."""
    prev = _dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense numeric array plus optional gradient bookkeeping.

    `values` is always a numpy array in the ambient precision.  Leaf tensors
    created with `requires_grad=True` accumulate into `.grad` during
    `backward()`; a leaf that the loss never touches keeps `grad=None`,
    which callers read as zero.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, values: np.ndarray, parents, backward) -> "Tensor":
        """Wrap an op result without re-casting; records the graph edge only
        when some parent needs gradients and recording is enabled."""
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else _dtype()
    t = Tensor.__new__(Tensor)
    t.values = np.asarray(x, dtype=dtype)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.values + b.values

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.values - b.values

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.values * b.values

    def backward(g):
        a._accumulate(_unbroadcast(g * b.values, a.shape))
        b._accumulate(_unbroadcast(g * a.values, b.shape))

    return Tensor._result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.values / b.values

    def backward(g):
        a._accumulate(_unbroadcast(g / b.values, a.shape))
        b._accumulate(_unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return Tensor._result(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with leading batch dimensions broadcast numpy-style."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs 2-D (or batched) operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def backward(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))

    return Tensor._result(out, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.values)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return Tensor._result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # split by sign to stay overflow-free for large |x|
    v = x.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = out.astype(v.dtype, copy=False)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor._result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.values, 0.0)

    def backward(g):
        x._accumulate(g * (x.values > 0))

    return Tensor._result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.values)

    def backward(g):
        x._accumulate(g * out)

    return Tensor._result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.log(x.values)

    def backward(g):
        x._accumulate(g / x.values)

    return Tensor._result(out, (x,), backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return Tensor._result(np.asarray(out), (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.values.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor._result(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    out = np.transpose(x.values, axes)
    inverse = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return Tensor._result(out, (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = _as_tensor(x)
    out = np.swapaxes(x.values, a, b)

    def backward(g):
        x._accumulate(np.swapaxes(g, a, b))

    return Tensor._result(out, (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return Tensor._result(out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.values for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return Tensor._result(out, tuple(tensors), backward)


def take(x: Tensor, key) -> Tensor:
    """Indexing/slicing; gradients scatter-add back into place."""
    x = _as_tensor(x)
    out = x.values[key]

    def backward(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.values)
        np.add.at(buf, key, g)
        x._accumulate(buf)

    return Tensor._result(np.asarray(out), (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup `table[ids]`; repeated ids accumulate gradient."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    out = table.values[ids]

    def backward(g):
        if not table.requires_grad:
            return
        buf = np.zeros_like(table.values)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(buf)

    return Tensor._result(out, (table,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return _as_tensor(x)
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(x.values.dtype) / (1.0 - rate)
    out = x.values * keep

    def backward(g):
        x._accumulate(g * keep)

    return Tensor._result(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalizations and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along `axis`; each slice sums to one."""
    x = _as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise InvalidArgumentError(f"softmax axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise InvalidArgumentError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate(out * (g - dot))

    return Tensor._result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise InvalidArgumentError(f"log_softmax over empty axis of shape {x.shape}")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to zero mean/unit variance, then affine."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, x)
    bias = _as_tensor(bias, x)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} must match last dim of {x.shape}")
    dtype = x.values.dtype
    # normalize in float64 so the zero-mean property survives large offsets
    wide = x.values.astype(np.float64, copy=False)
    mu = wide.mean(axis=-1, keepdims=True)
    centered = wide - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (gain.values * xhat + bias.values).astype(dtype, copy=False)

    def backward(g):
        gg = g * gain.values
        # closed-form layer-norm gradient
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        x._accumulate(dx.astype(dtype, copy=False))
        axes = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=axes).astype(dtype, copy=False))
        bias._accumulate(g.sum(axis=axes))

    return Tensor._result(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets, label_smoothing: float = 0.0,
                  mask=None) -> Tensor:
    """Mean negative log-likelihood of `targets` under softmax(logits).

    `logits` is (n, V); `targets` holds n class indices.  With label
    smoothing eps the target distribution is eps/V + (1-eps) on the gold
    class.  `mask` (n,) selects which positions count; the mean divides by
    the number of unmasked positions.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, V) logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match {n} rows")
    if not (0.0 <= label_smoothing < 1.0):
        raise InvalidArgumentError(f"label_smoothing {label_smoothing} outside [0, 1)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = targets[(targets < 0) | (targets >= v)][0]
        raise IndexError(f"target index {bad} outside vocabulary of size {v}")
    lp = log_softmax(logits, axis=-1)
    picked = take(lp, (np.arange(n), targets))
    if label_smoothing > 0.0:
        per_pos = mul(picked, -(1.0 - label_smoothing)) + \
            mul(tensor_sum(lp, axis=-1), -(label_smoothing / v))
    else:
        per_pos = mul(picked, -1.0)
    if mask is None:
        return tensor_mean(per_pos)
    mask = np.asarray(mask, dtype=logits.values.dtype)
    total = float(mask.sum())
    if total == 0:
        raise InvalidArgumentError("cross_entropy mask selects no positions")
    return mul(tensor_sum(mul(per_pos, Tensor(mask))), 1.0 / total)


# ---------------------------------------------------------------------------
# reverse pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Iterative topological order, each recorded operation visited exactly
    once.  Leaves the loss never touched keep `grad=None` (read as zero).
    """
    if loss.values.size != 1:
        raise InvalidArgumentError(
            f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, inputs, step: float = 1e-5, recheck_tol: float = 1e-2) -> float:
    """Compare autodiff against central differences; returns max relative error.

    Relative error is |ga - gn| / max(1, |ga|, |gn|) per coordinate.  A
    coordinate over `recheck_tol` is re-measured with a tenth of the step;
    if it stays bad the point is flagged via NonDifferentiableError rather
    than silently reported.  Inputs must be float64 leaves.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.values.dtype != np.float64:
            raise InvalidArgumentError("grad_check requires float64 inputs; "
                                       "wrap the call in float64_mode()")
        t.zero_grad()
    loss = f(*inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.values)
                for t in inputs]

    def numeric_at(t, idx, h):
        orig = t.values[idx]
        with no_grad():
            t.values[idx] = orig + h
            hi = float(f(*inputs).values.reshape(-1)[0])
            t.values[idx] = orig - h
            lo = float(f(*inputs).values.reshape(-1)[0])
        t.values[idx] = orig
        return (hi - lo) / (2.0 * h)

    worst = 0.0
    for t, ga_arr in zip(inputs, analytic):
        for idx in np.ndindex(t.shape):
            ga = float(ga_arr[idx])
            gn = numeric_at(t, idx, step)
            err = abs(ga - gn) / max(1.0, abs(ga), abs(gn))
            if err > recheck_tol:
                gn2 = numeric_at(t, idx, step / 10.0)
                err2 = abs(ga - gn2) / max(1.0, abs(ga), abs(gn2))
                if err2 > recheck_tol:
                    raise NonDifferentiableError(
                        f"gradient mismatch at input coordinate {idx}: "
                        f"analytic={ga:.6g} numeric={gn:.6g} (recheck {gn2:.6g})")
                err = err2
            worst = max(worst, err)
    return worst


def parameter(shape, rng: np.random.Generator, scale: float | None = None) -> Tensor:
    """Leaf tensor with Glorot-uniform init (or explicit uniform scale)."""
    shape = tuple(shape)
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
        fan_out = shape[-1]
        scale = float(np.sqrt(6.0 / (fan_in + fan_out)))
    values = rng.uniform(-scale, scale, size=shape)
    return Tensor(values, requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
