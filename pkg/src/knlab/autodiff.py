"""Dense float64 arrays with tape-based reverse-mode differentiation.

``Tensor`` wraps an ``np.ndarray`` and remembers how it was produced.  A
``Graph`` bundles a build function with declared inputs so that a whole
computation can be evaluated, tapped and differentiated by name::

    def build(x, trace):
        y = trace.tap("y", x["a"] * x["a"])
        return {"out": y.sum()}

    g = Graph(build, {"a": (3,)})
    evaluate(g, {"a": np.arange(3.0)})["out"]      # 5.0
    gradient(g, {"a": np.arange(3.0)}, "out", ["a", "y"])
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import NumericError, ShapeError

_active_trace: contextvars.ContextVar["Trace | None"] = contextvars.ContextVar(
    "knlab_active_trace", default=None
)

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad", "name")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, *, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = None
        trace = _active_trace.get()
        if trace is not None:
            trace._register(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=backward, op="add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, parents=(a, b), backward_fn=backward, op="sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=backward, op="mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor(a.data / b.data, parents=(a, b), backward_fn=backward, op="div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, parents=(a, b), backward_fn=backward, op="matmul")


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(x.data.sum(axis=axis, keepdims=keepdims), parents=(x,), backward_fn=backward, op="sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor(out, parents=(x,), backward_fn=backward, op="mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor(x.data.reshape(shape), parents=(x,), backward_fn=backward, op="reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor(np.transpose(x.data, axes), parents=(x,), backward_fn=backward, op="transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(x.data[index], parents=(x,), backward_fn=backward, op="index")


def embedding(weight, ids) -> Tensor:
    """Gather rows of ``weight`` (V, d) for an integer id array."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (out,)

    return Tensor(weight.data[ids], parents=(weight,), backward_fn=backward, op="embedding")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor(out, parents=(x,), backward_fn=backward, op="exp")


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    with np.errstate(divide="ignore"):
        out = np.log(x.data)
    return Tensor(out, parents=(x,), backward_fn=backward, op="log")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, parents=(x,), backward_fn=backward, op="tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return Tensor(np.where(positive, x.data, 0.0), parents=(x,), backward_fn=backward, op="relu")


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor(x.data * cdf, parents=(x,), backward_fn=backward, op="gelu")


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, parents=(x,), backward_fn=backward, op="softmax")


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, parents=(x,), backward_fn=backward, op="log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta), backward_fn=backward, op="layer_norm")


# ----------------------------------------------------------------------------
# reverse pass


def backward(output: Tensor, wrt: Sequence[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
    """Accumulate d(output)/d(t) for every tensor in ``wrt``.

    ``seed`` defaults to ones (so a non-scalar output is implicitly summed).
    Tensors the output does not depend on get zero arrays.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    keep = {id(t) for t in wrt}
    grads: dict[int, np.ndarray] = {
        id(output): np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=np.float64)
    }
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ----------------------------------------------------------------------------
# named graphs


class Trace:
    """Per-call bookkeeping: taps, optional overrides and finiteness checks."""

    def __init__(self, overrides: Mapping[str, Callable[[Tensor], Tensor]] | None = None,
                 check_finite: bool = True):
        self.taps: dict[str, Tensor] = {}
        self.overrides = dict(overrides or {})
        self.check_finite = check_finite
        self.grad_taps = False
        self._count = 0

    def _register(self, node: Tensor) -> None:
        self._count += 1
        if self.check_finite and not np.all(np.isfinite(node.data)):
            raise NumericError(f"non-finite value produced at node {node.op}#{self._count}")

    def tap(self, name: str, value: Tensor) -> Tensor:
        """Record ``value`` under ``name``; an override for ``name`` replaces it."""
        if name in self.taps:
            raise ValueError(f"tap {name!r} recorded twice")
        if name in self.overrides:
            value = self.overrides[name](value)
        if self.grad_taps:
            value.requires_grad = True
        value.name = name
        self.taps[name] = value
        return value


class Graph:
    """A named computation: ``build(inputs, trace) -> {output_name: Tensor}``.

    ``inputs`` declares the shape of each named input; ``None`` entries in a
    shape accept any size along that axis.
    """

    def __init__(self, build: Callable[[dict, Trace], Mapping[str, Tensor]],
                 inputs: Mapping[str, tuple]):
        self.build = build
        self.inputs = {k: tuple(v) for k, v in inputs.items()}

    def _check_inputs(self, values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        missing = set(self.inputs) - set(values)
        extra = set(values) - set(self.inputs)
        if missing or extra:
            raise ShapeError(f"input names mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        checked = {}
        for name, shape in self.inputs.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
                raise ShapeError(f"input {name!r} has shape {arr.shape}, declared {shape}")
            checked[name] = arr
        return checked

    def run(self, values: Mapping[str, np.ndarray], overrides=None, check_finite=True,
            requires_grad: Iterable[str] = ()):
        arrays = self._check_inputs(values)
        trace = Trace(overrides, check_finite)
        trace.grad_taps = bool(requires_grad)
        token = _active_trace.set(trace)
        try:
            grad_names = set(requires_grad)
            leaves = {k: Tensor(v, requires_grad=k in grad_names) for k, v in arrays.items()}
            outputs = dict(self.build(leaves, trace))
        finally:
            _active_trace.reset(token)
        clash = set(outputs) & set(trace.taps)
        if clash:
            raise ValueError(f"names used both as outputs and taps: {sorted(clash)}")
        return leaves, outputs, trace


def evaluate(graph: Graph, inputs: Mapping[str, np.ndarray], overrides=None,
             check_finite: bool = True) -> dict[str, np.ndarray]:
    """Run ``graph`` and return every output and tap value by name."""
    _, outputs, trace = graph.run(inputs, overrides, check_finite)
    result = {k: v.data for k, v in outputs.items()}
    result.update({k: v.data for k, v in trace.taps.items()})
    return result


def gradient(graph: Graph, inputs: Mapping[str, np.ndarray], output: str,
             wrt: Iterable[str], overrides=None) -> dict[str, np.ndarray]:
    """d(output)/d(x) for each input or tap name in ``wrt``; output must be scalar."""
    wrt = list(wrt)
    leaves, outputs, trace = graph.run(inputs, overrides, requires_grad=graph.inputs.keys())
    if output not in outputs:
        raise KeyError(f"unknown output {output!r}")
    out = outputs[output]
    if out.shape != ():
        raise ShapeError(f"gradient needs a scalar output, {output!r} has shape {out.shape}")
    targets = []
    for name in wrt:
        if name in leaves:
            targets.append(leaves[name])
        elif name in trace.taps:
            targets.append(trace.taps[name])
        else:
            raise KeyError(f"unknown input or tap {name!r}")
    grads = backward(out, targets)
    return dict(zip(wrt, grads))
