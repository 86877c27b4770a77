"""Dense float64 tensors and a reverse-mode gradient tape.

Every continuous quantity that flows through the policy and the dynamics
rollout is a :class:`Tensor`. A tensor either lives on a :class:`Tape`
(it has a ``tape_id`` and receives a gradient on ``backward``) or it is a
plain constant (no ``tape_id``, zero gradient, freely shareable).

Ops are recorded through :func:`record`, which looks up the op kind in the
registry below, evaluates the forward rule with numpy, and appends a node
holding whatever the backward rule needs.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are not valid for the requested op."""


class UnsupportedOpError(ValueError):
    """The op kind is not in the registry."""


class NonFiniteError(ArithmeticError):
    """An op, a dynamics step, or a loss produced NaN or Inf."""


_local = threading.local()


@contextmanager
def nonfinite_tolerant():
    """Let untaped evaluation produce NaN/Inf instead of raising.

    Only the oracle's line search uses this, to reject infeasible trial
    points element by element inside a batch.
    """
    previous = getattr(_local, "tolerant", False)
    _local.tolerant = True
    try:
        yield
    finally:
        _local.tolerant = previous


def is_tolerant() -> bool:
    return getattr(_local, "tolerant", False)


def _check_finite(values: np.ndarray, where: str) -> None:
    if is_tolerant():
        return
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite value produced by '{where}'")


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """A float64 array with an optional handle into a gradient tape."""

    __slots__ = ("data", "tape", "tape_id")
    __array_priority__ = 1000

    def __init__(self, data: Any, tape: Optional["Tape"] = None, tape_id: Optional[int] = None):
        values = np.array(data, dtype=np.float64)
        _check_finite(values, "tensor")
        self.data = values
        self.tape = tape
        self.tape_id = tape_id

    @classmethod
    def _wrap(cls, values: np.ndarray, tape: Optional["Tape"], tape_id: Optional[int]) -> "Tensor":
        obj = cls.__new__(cls)
        obj.data = values
        obj.tape = tape
        obj.tape_id = tape_id
        return obj

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return record("transpose", self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        taped = f", tape_id={self.tape_id}" if self.tape_id is not None else ""
        return f"Tensor(shape={self.shape}{taped})"

    # Arithmetic sugar. Python scalars become scale ops or constants.

    def __add__(self, other):
        return record("add", self, _lift(other, self))

    def __radd__(self, other):
        return record("add", _lift(other, self), self)

    def __sub__(self, other):
        return record("subtract", self, _lift(other, self))

    def __rsub__(self, other):
        return record("subtract", _lift(other, self), self)

    def __mul__(self, other):
        if _is_scalar(other):
            return record("scale", self, factor=float(other))
        return record("multiply", self, _lift(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if _is_scalar(other):
            return record("scale", self, factor=1.0 / float(other))
        return record("divide", self, _lift(other, self))

    def __rtruediv__(self, other):
        return record("divide", _lift(other, self), self)

    def __neg__(self):
        return record("negate", self)

    def __matmul__(self, other):
        return record("matmul", self, _lift(other, self))

    def __getitem__(self, key):
        return record("slice", self, key=key)


def _is_scalar(value: Any) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer))


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if _is_scalar(value):
        return Tensor._wrap(np.full(like.shape, float(value)), None, None)
    return Tensor(value)


def constant(value: Any) -> Tensor:
    """Untaped tensor; receives zero gradient."""
    return Tensor(value)


# ---------------------------------------------------------------------------
# Op registry: forward(*arrays, **attrs) -> (out, ctx)
#              backward(g, out, ctx, *arrays, **attrs) -> grads per input
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _OpRule:
    arity: int
    forward: Callable[..., tuple[np.ndarray, dict]]
    backward: Callable[..., tuple[Optional[np.ndarray], ...]]


_OPS: dict[str, _OpRule] = {}


def _register(name: str, arity: int):
    def wrap(pair):
        forward, backward = pair()
        _OPS[name] = _OpRule(arity, forward, backward)
        return pair
    return wrap


def supported_ops() -> list[str]:
    return sorted(_OPS)


def _same_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"'{kind}' needs equal shapes, got {a.shape} and {b.shape}")


@_register("add", 2)
def _add():
    def fwd(a, b):
        _same_shape("add", a, b)
        return a + b, {}
    return fwd, lambda g, out, ctx, a, b: (g, g)


@_register("subtract", 2)
def _subtract():
    def fwd(a, b):
        _same_shape("subtract", a, b)
        return a - b, {}
    return fwd, lambda g, out, ctx, a, b: (g, -g)


@_register("multiply", 2)
def _multiply():
    def fwd(a, b):
        _same_shape("multiply", a, b)
        return a * b, {}
    return fwd, lambda g, out, ctx, a, b: (g * b, g * a)


@_register("divide", 2)
def _divide():
    def fwd(a, b):
        _same_shape("divide", a, b)
        return a / b, {}
    return fwd, lambda g, out, ctx, a, b: (g / b, -g * out / b)


@_register("negate", 1)
def _negate():
    return (lambda a: (-a, {})), (lambda g, out, ctx, a: (-g,))


@_register("scale", 1)
def _scale():
    def fwd(a, factor):
        return a * factor, {}
    return fwd, lambda g, out, ctx, a, factor: (g * factor,)


@_register("add_row", 2)
def _add_row():
    def fwd(x, row):
        if row.ndim != 1 or x.ndim < 1 or x.shape[-1] != row.shape[0]:
            raise ShapeError(f"'add_row' needs a row of length {x.shape[-1:]}, got {row.shape}")
        return x + row, {}

    def bwd(g, out, ctx, x, row):
        return g, g.reshape(-1, row.shape[0]).sum(axis=0)
    return fwd, bwd


@_register("matmul", 2)
def _matmul():
    def fwd(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"'matmul' needs operands with ndim >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"'matmul' inner dimensions differ: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"'matmul' leading dimensions differ: {a.shape} @ {b.shape}")
        return np.matmul(a, b), {}

    def bwd(g, out, ctx, a, b):
        grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            grad_b = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
        return grad_a, grad_b
    return fwd, bwd


@_register("transpose", 1)
def _transpose():
    def fwd(a):
        if a.ndim < 2:
            raise ShapeError(f"'transpose' needs ndim >= 2, got {a.shape}")
        return np.swapaxes(a, -1, -2), {}
    return fwd, lambda g, out, ctx, a: (np.swapaxes(g, -1, -2),)


@_register("permute", 1)
def _permute():
    def fwd(a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"'permute' axes {axes} invalid for shape {a.shape}")
        return np.transpose(a, axes), {}

    def bwd(g, out, ctx, a, axes):
        return (np.transpose(g, np.argsort(axes)),)
    return fwd, bwd


@_register("reshape", 1)
def _reshape():
    def fwd(a, shape):
        try:
            return a.reshape(shape), {}
        except ValueError as exc:
            raise ShapeError(f"'reshape' cannot map {a.shape} to {shape}") from exc
    return fwd, lambda g, out, ctx, a, shape: (g.reshape(a.shape),)


@_register("slice", 1)
def _slice():
    def fwd(a, key):
        try:
            return np.array(a[key]), {}
        except IndexError as exc:
            raise ShapeError(f"'slice' index {key!r} invalid for shape {a.shape}") from exc

    def bwd(g, out, ctx, a, key):
        grad = np.zeros_like(a)
        parts = key if isinstance(key, tuple) else (key,)
        if any(isinstance(k, (list, np.ndarray)) and np.asarray(k).dtype.kind in "iu" for k in parts):
            # Integer-array indices may repeat an entry.
            np.add.at(grad, key, g)
        else:
            grad[key] = g
        return (grad,)
    return fwd, bwd


@_register("sum", 1)
def _sum():
    def fwd(a, axis=None):
        return np.sum(a, axis=axis), {}

    def bwd(g, out, ctx, a, axis=None):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return fwd, bwd


@_register("mean", 1)
def _mean():
    def fwd(a, axis=None):
        return np.mean(a, axis=axis), {}

    def bwd(g, out, ctx, a, axis=None):
        count = a.size if axis is None else a.shape[axis]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)
    return fwd, bwd


@_register("square", 1)
def _square():
    return (lambda a: (a * a, {})), (lambda g, out, ctx, a: (2.0 * a * g,))


@_register("sqrt", 1)
def _sqrt():
    def fwd(a):
        with np.errstate(invalid="ignore"):
            return np.sqrt(a), {}
    return fwd, lambda g, out, ctx, a: (g * 0.5 / out,)


@_register("tanh", 1)
def _tanh():
    return (lambda a: (np.tanh(a), {})), (lambda g, out, ctx, a: (g * (1.0 - out * out),))


@_register("relu", 1)
def _relu():
    return (lambda a: (np.maximum(a, 0.0), {})), (lambda g, out, ctx, a: (g * (a > 0.0),))


@_register("sin", 1)
def _sin():
    return (lambda a: (np.sin(a), {})), (lambda g, out, ctx, a: (g * np.cos(a),))


@_register("cos", 1)
def _cos():
    return (lambda a: (np.cos(a), {})), (lambda g, out, ctx, a: (-g * np.sin(a),))


@_register("atan2", 2)
def _atan2():
    def fwd(y, x):
        _same_shape("atan2", y, x)
        return np.arctan2(y, x), {"r2": x * x + y * y}

    def bwd(g, out, ctx, y, x):
        r2 = ctx["r2"]
        return g * x / r2, -g * y / r2
    return fwd, bwd


@_register("concat", -1)
def _concat():
    def fwd(*arrays, axis=0):
        try:
            return np.concatenate(arrays, axis=axis), {}
        except ValueError as exc:
            raise ShapeError(f"'concat' along axis {axis} failed: {exc}") from exc

    def bwd(g, out, ctx, *arrays, axis=0):
        cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return fwd, bwd


@_register("softmax", 1)
def _softmax():
    def fwd(a):
        shifted = np.exp(a - a.max(axis=-1, keepdims=True))
        return shifted / shifted.sum(axis=-1, keepdims=True), {}

    def bwd(g, out, ctx, a):
        # Jacobian-vector form: y * (g - <g, y>)
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)
    return fwd, bwd


@_register("layer_norm", 3)
def _layer_norm():
    def fwd(x, gain, bias, eps=1e-5):
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise ShapeError(
                f"'layer_norm' gain/bias must have shape {x.shape[-1:]}, got {gain.shape}/{bias.shape}"
            )
        centered = x - x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
        x_hat = centered * inv_std
        return x_hat * gain + bias, {"x_hat": x_hat, "inv_std": inv_std}

    def bwd(g, out, ctx, x, gain, bias, eps=1e-5):
        x_hat, inv_std = ctx["x_hat"], ctx["inv_std"]
        width = x.shape[-1]
        g_hat = g * gain
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * np.mean(g_hat * x_hat, axis=-1, keepdims=True)
        )
        grad_gain = (g * x_hat).reshape(-1, width).sum(axis=0)
        grad_bias = g.reshape(-1, width).sum(axis=0)
        return grad_x, grad_gain, grad_bias
    return fwd, bwd


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    inputs: tuple[Optional[int], ...]
    values: tuple[np.ndarray, ...]
    out: np.ndarray
    attrs: dict = field(default_factory=dict)
    ctx: dict = field(default_factory=dict)


class Tape:
    """Append-only record of ops for one rollout; discarded after the update."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value: Any) -> Tensor:
        """Put a leaf on the tape (a parameter or a decision variable)."""
        data = value.data if isinstance(value, Tensor) else np.array(value, dtype=np.float64)
        _check_finite(data, "leaf")
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), (), data))
        return Tensor._wrap(data, self, node_id)

    def watch_all(self, params: Mapping[str, Any]) -> dict[str, Tensor]:
        return {name: self.watch(value) for name, value in params.items()}

    def _append(self, op_kind, inputs, values, out, attrs, ctx) -> Tensor:
        node_id = len(self.nodes)
        parents = tuple(t.tape_id if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(op_kind, parents, values, out, attrs, ctx))
        return Tensor._wrap(out, self, node_id)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate ``gradients`` for every node reachable from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.gradients = {}
        if loss.tape_id is None:
            return self.gradients
        if loss.tape is not self:
            raise ValueError("Loss was recorded on a different tape")

        grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
        for node_id in range(loss.tape_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.op == "leaf":
                continue
            rule = _OPS[node.op]
            input_grads = rule.backward(g, node.out, node.ctx, *node.values, **node.attrs)
            for parent, grad in zip(node.inputs, input_grads):
                if parent is None or grad is None:
                    continue
                _check_finite(grad, f"{node.op} (backward)")
                grads[parent] = grads[parent] + grad if parent in grads else grad
        self.gradients = grads
        return grads

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward loss w.r.t. ``tensor``; zero if unreachable."""
        if tensor.tape is not self or tensor.tape_id is None:
            return np.zeros(tensor.shape)
        grad = self.gradients.get(tensor.tape_id)
        if grad is None:
            return np.zeros(tensor.shape)
        return np.array(grad, dtype=np.float64).reshape(tensor.shape)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def record(op_kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """
    Evaluate ``op_kind`` on ``inputs`` and append it to their tape.

    Inputs without a tape are treated as constants. When no input has a
    tape the op is evaluated eagerly and an untaped tensor is returned.

    Raises:
        UnsupportedOpError: Unknown op kind.
        ShapeError:         Operand shapes invalid for the op.
        NonFiniteError:     The result contains NaN or Inf.
    """
    rule = _OPS.get(op_kind)
    if rule is None:
        raise UnsupportedOpError(f"Unsupported op kind: {op_kind!r}")
    if rule.arity >= 0 and len(inputs) != rule.arity:
        raise ShapeError(f"'{op_kind}' takes {rule.arity} inputs, got {len(inputs)}")
    inputs = tuple(t if isinstance(t, Tensor) else Tensor(t) for t in inputs)

    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"'{op_kind}' mixes tensors from different tapes")
            tape = t.tape

    values = tuple(t.data for t in inputs)
    out, ctx = rule.forward(*values, **attrs)
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, op_kind)
    if tape is None:
        return Tensor._wrap(out, None, None)
    return tape._append(op_kind, inputs, values, out, attrs, ctx)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


# Thin named wrappers so call sites read like the math.

def add(a, b):
    return record("add", a, b)


def subtract(a, b):
    return record("subtract", a, b)


def multiply(a, b):
    return record("multiply", a, b)


def divide(a, b):
    return record("divide", a, b)


def scale(a, factor: float):
    return record("scale", a, factor=float(factor))


def matmul(a, b):
    return record("matmul", a, b)


def transpose(a):
    return record("transpose", a)


def permute(a, axes):
    return record("permute", a, axes=tuple(axes))


def reshape(a, shape):
    return record("reshape", a, shape=tuple(shape))


def concat(tensors, axis: int = 0):
    return record("concat", *tensors, axis=axis)


def tsum(a, axis=None):
    return record("sum", a, axis=axis)


def mean(a, axis=None):
    return record("mean", a, axis=axis)


def square(a):
    return record("square", a)


def sqrt(a):
    return record("sqrt", a)


def tanh(a):
    return record("tanh", a)


def relu(a):
    return record("relu", a)


def sin(a):
    return record("sin", a)


def cos(a):
    return record("cos", a)


def atan2(y, x):
    return record("atan2", y, x)


def softmax(a):
    return record("softmax", a)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return record("layer_norm", x, gain, bias, eps=eps)


def add_row(x, row):
    return record("add_row", x, row)
