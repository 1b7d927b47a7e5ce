"""Dense float64 tensors with a reverse-mode differentiation tape.

Only what the affine+ReLU task networks and their losses need is here:
2-D matmul, an affine layer op, elementwise math, reductions, and a
row-wise log-softmax.  Broadcasting is limited to exact-shape operands or
one scalar (shape ``()``) operand.

Recording is implicit: any op whose inputs require grad is appended to the
active :class:`Tape` (an implicit per-thread tape when none is entered).
A tape is consumed by :func:`backward`; calling it again on the same loss
raises :class:`ContractError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from mtsl.errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "adam_step",
    "backward",
    "no_grad",
    "matmul",
    "affine",
    "elementwise",
    "relu",
    "sigmoid",
    "square",
    "sqrt",
    "exp",
    "log",
    "add",
    "sub",
    "mul",
    "div",
    "mean",
    "tsum",
    "transpose",
    "reshape",
    "log_softmax",
    "clip",
]


class Tensor:
    """An n-dimensional array of 64-bit reals.

    Tensors are treated as immutable values; optimizer steps return new
    leaves rather than editing ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        # (tape, kind, index) with kind "leaf" or "op"
        self.tape_id: tuple | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


@dataclass
class _Op:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Usable as a context manager to scope recording explicitly; otherwise an
    implicit tape collects ops and is replaced once it has been consumed.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.leaves: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        _local().stack.append(self)
        return self

    def __exit__(self, *exc):
        _local().stack.pop()
        return False

    def _register_leaf(self, t: Tensor) -> None:
        if t.tape_id is not None and t.tape_id[0] is self:
            return
        t.tape_id = (self, "leaf", len(self.leaves))
        self.leaves.append(t)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, fn) -> None:
        if self.consumed:
            raise ContractError("cannot record on a tape that was already consumed")
        for t in inputs:
            if t.requires_grad and (t.tape_id is None or t.tape_id[1] == "leaf"):
                self._register_leaf(t)
        output.tape_id = (self, "op", len(self.ops))
        self.ops.append(_Op(inputs, output, fn))


class _Local(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.implicit: Tape = Tape()
        self.enabled = True


_LOCAL = _Local()


def _local() -> _Local:
    return _LOCAL


def _current_tape() -> Tape:
    st = _local()
    if st.stack:
        return st.stack[-1]
    if st.implicit.consumed:
        st.implicit = Tape()
    return st.implicit


@contextlib.contextmanager
def no_grad():
    """Disable recording; results never require grad."""
    st = _local()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    need = _local().enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=need)
    if need:
        _current_tape().record(inputs, out, fn)
    return out


def _broadcast_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# --- binary elementwise -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)),
    )


# --- unary elementwise ------------------------------------------------------


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return _make(np.where(x.data > 0, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign to avoid overflow in exp
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    x = _as_tensor(x)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# --- reductions and shape ops -----------------------------------------------


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.size
        return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))
    n = shape[axis]
    out = x.data.mean(axis=axis)
    return _make(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


def tsum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    out = x.data.sum(axis=axis)
    return _make(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape: Iterable[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(tuple(shape)).copy(), (x,), lambda g: (g.reshape(old),))


# --- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` for x (N, C_in), weight (C_out, C_in), bias (C_out,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if (
        x.data.ndim != 2
        or weight.data.ndim != 2
        or x.shape[1] != weight.shape[1]
        or bias.shape != (weight.shape[0],)
    ):
        raise ShapeError(f"affine: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    return _make(
        xd @ wd.T + bias.data,
        (x, weight, bias),
        lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)),
    )


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax of an (N, K) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax expects (N, K), got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "mean": mean,
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch one of relu, sigmoid, add, sub, mul, square, mean by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# --- reverse pass -------------------------------------------------------------


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Propagate d(loss) back through its tape.

    Returns a map from leaf tensor to gradient.  With ``wrt`` the map holds
    exactly those tensors, zero-filled where no path to ``loss`` exists;
    otherwise it holds every requires-grad leaf recorded on the tape.  The
    gradient is also stored on each leaf's ``grad`` attribute.
    """
    if loss.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []

    if loss.tape_id is not None and loss.tape_id[1] == "op":
        tape: Tape = loss.tape_id[0]
        if tape.consumed:
            raise ContractError("tape already consumed; re-run the forward pass")
        stop = loss.tape_id[2]
        for op in reversed(tape.ops[: stop + 1]):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            parts = op.backward(g)
            for inp, gi in zip(op.inputs, parts):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
        tape.consumed = True
        leaves = tape.leaves
    elif loss.requires_grad:
        leaves = [loss]

    targets = list(wrt) if wrt is not None else list(leaves)
    result: dict[Tensor, Tensor] = {}
    for t in targets:
        g = grads.get(id(t))
        gt = Tensor(np.zeros(t.shape) if g is None else g)
        t.grad = gt
        result[t] = gt
    return result


# --- Adam ------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """Per-parameter Adam moments and hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5

    @classmethod
    def fresh(cls, shape, **hyper) -> AdamState:
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0, **hyper)


def adam_step(
    param: Tensor, grad, state: AdamState, lr: float | None = None
) -> tuple[Tensor, AdamState]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    ``lr`` overrides ``state.lr`` for this step (used by step schedules).
    """
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to adam_step")
    step_lr = state.lr if lr is None else lr
    g = g + state.weight_decay * param.data
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = param.data - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return Tensor(new, requires_grad=param.requires_grad), replace(state, m=m, v=v, t=t)
