"""Small N-dimensional tensor engine with tape-based reverse-mode autodiff.

Tensors wrap row-major numpy arrays.  Operations executed while a :class:`Tape`
is active (and touching at least one ``requires_grad`` input) are recorded in
order; :func:`backward` replays the tape in reverse exactly once.

Broadcasting in elementwise ops is limited to equal-rank operands whose
mismatched dims are singletons (e.g. an ``H x W x 1`` map against an
``H x W x 3`` image), or to scalars.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_tensor_ids = itertools.count()
_tape_ids = itertools.count()


@dataclass
class _EngineState:
    dtype: type = np.float32
    strict_division: bool = True
    debug: bool = False
    tapes: list = field(default_factory=list)
    counters: list = field(default_factory=list)


_state = _EngineState()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors.

    ``"float32"`` is the training/inference default; ``"float64"`` is used by
    the finite-difference oracles.
    """
    dtypes = {"float32": np.float32, "float64": np.float64}
    if name not in dtypes:
        raise UsageError(f"unknown precision {name!r}; expected float32 or float64")
    previous = _state.dtype
    _state.dtype = dtypes[name]
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise :class:`NumericError` as soon as any op emits NaN/Inf."""
    previous = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = previous


@contextlib.contextmanager
def strict_division(enabled: bool = True):
    previous = _state.strict_division
    _state.strict_division = enabled
    try:
        yield
    finally:
        _state.strict_division = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "name", "tape_id")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.id = next(_tensor_ids)
        self.name = name
        self.tape_id = None

    @classmethod
    def _wrap(cls, array, requires_grad=False):
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = requires_grad
        t.id = next(_tensor_ids)
        t.name = None
        t.tape_id = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        extra = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}{extra})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_state.dtype))


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Tape


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, in={[t.id for t in self.inputs]}, out={self.output.id})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes are allowed and the innermost one
    receives the records.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[Node] = []

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes]

    def producer(self):
        """Map output-tensor id -> node that produced it."""
        return {n.output.id: n for n in self.nodes}

    def depends_on(self, source: Tensor):
        """Ids of every recorded tensor whose value depends on ``source``."""
        reached = {source.id}
        for node in self.nodes:
            if any(t.id in reached for t in node.inputs):
                reached.add(node.output.id)
        return reached


def active_tape():
    return _state.tapes[-1] if _state.tapes else None


def custom_op(op, data, inputs, backward):
    """Wrap ``data`` as the output of ``op`` and record it on the active tape.

    ``backward(grad)`` must return one gradient (or ``None``) per input, each
    either of the input's shape or broadcast-compatible with it.
    """
    if _state.debug and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        out.tape_id = tape.id
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class GradientMap(Mapping):
    """Gradients keyed by tensor id; unreachable tensors map to zeros."""

    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, key):
        tid = key.id if isinstance(key, Tensor) else key
        return self._grads[tid]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def __contains__(self, key):
        tid = key.id if isinstance(key, Tensor) else key
        return tid in self._grads

    def get_for(self, tensor: Tensor):
        g = self._grads.get(tensor.id)
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def backward(loss: Tensor, tape: Tape | None = None) -> GradientMap:
    """Reverse-mode pass from a scalar ``loss`` over ``tape``."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    grads = {loss.id: np.ones_like(loss.data)}
    if tape is None:
        return GradientMap(grads)
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = _unbroadcast(gi, t.shape)
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi
    return GradientMap(grads)


# --------------------------------------------------------------------------
# Elementwise


def _check_broadcast(op, a, b):
    if b.ndim == 0 or a.ndim == 0 or a.shape == b.shape:
        return
    if a.ndim != b.ndim or any(x != y and 1 not in (x, y) for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return custom_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return custom_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return custom_op("mul", ad * bd, (a, b), back)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    if _state.strict_division and np.any(bd == 0):
        raise NumericError("div: divisor contains zeros")
    out = ad / bd

    def back(g):
        gb = None
        if b.requires_grad:
            gb = -g * out / bd
        return g / bd, gb

    return custom_op("div", out, (a, b), back)


def scale(a, s: float):
    a = as_tensor(a)
    return custom_op("scale", a.data * s, (a,), lambda g: (g * s,))


def neg(a):
    return custom_op("neg", -a.data, (a,), lambda g: (-g,))


def elementwise(kind, a, b):
    """Dispatch ``add``/``sub``/``mul``/``div``/``scale`` by name."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}
    if kind not in ops:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def abs_(a):
    sign = np.sign(a.data)
    return custom_op("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a):
    out = np.exp(a.data)
    return custom_op("exp", out, (a,), lambda g: (g * out,))


def tanh(a):
    out = np.tanh(a.data)
    return custom_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def floor_magnitude(a, minimum: float):
    """Push values with ``|a| < minimum`` out to ``±minimum`` (sign kept)."""
    mask = np.abs(a.data) >= minimum
    out = np.where(mask, a.data, np.copysign(np.asarray(minimum, a.dtype), a.data))
    return custom_op("floor_magnitude", out, (a,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a, b, tag=None):
    """Batched matrix product with numpy-style leading broadcast dims.

    ``tag`` labels the call for :func:`count_matmul_flops`.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    if _state.counters:
        macs = math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for counter in _state.counters:
            if counter.tag is None or counter.tag == tag:
                counter.count += macs
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return custom_op("matmul", ad @ bd, (a, b), back)


class MatmulCounter:
    def __init__(self, tag):
        self.tag = tag
        self.count = 0


@contextlib.contextmanager
def count_matmul_flops(tag=None):
    """Count multiply-adds of matmuls carrying ``tag`` (all matmuls if None)."""
    counter = MatmulCounter(tag)
    _state.counters.append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


def softmax(a, axis=-1):
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", out, (a,), back)


# --------------------------------------------------------------------------
# Shape manipulation and reductions


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return custom_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return custom_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            d != e for i, (d, e) in enumerate(zip(t.shape, ref.shape)) if i != ax
        ):
            raise ShapeError(f"concat: {t.shape} does not match {ref.shape} off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return custom_op("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ShapeError(f"stack: mismatched shapes {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return custom_op("stack", out, tensors, back)


def split(a, sections, axis=-1):
    """Split into ``sections`` equal parts (int) or parts of the given sizes."""
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if isinstance(sections, int):
        if sections <= 0 or n % sections:
            raise ShapeError(f"split: axis of size {n} not divisible into {sections} parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ShapeError(f"split: sizes {sizes} do not sum to {n}")
    outputs = []
    start = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, start + size)
        index = tuple(index)

        def back(g, index=index):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[index] = g
            return (full,)

        outputs.append(custom_op("split", a.data[index], (a,), back))
        start += size
    return outputs


def l2_normalize(a, axis=-1, epsilon=1e-12):
    """Unit L2 norm along ``axis``; norms below ``epsilon`` are floored.

    One fused op rather than a recorded division: the floor makes it safe for
    any input, including all-zero slices.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    active = norm > epsilon
    denom = np.where(active, norm, epsilon)
    out = a.data / denom

    def back(g):
        radial = np.where(active, (g * out).sum(axis=axis, keepdims=True), 0.0)
        return ((g - out * radial) / denom,)

    return custom_op("l2_normalize", out, (a,), back)


def mean_over_axis(a, axis, keepdims=True):
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, a.shape),)

    return custom_op("mean_over_axis", a.data.mean(axis=ax, keepdims=keepdims), (a,), back)


def sum_all(a):
    a = as_tensor(a)
    return custom_op("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a):
    a = as_tensor(a)
    n = a.size
    return custom_op(
        "mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape),)
    )


# --------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_check(f, inputs, eps=1e-5, samples=None, seed=0):
    """Largest relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar Tensor and be deterministic; a
    non-deterministic ``f`` gives a meaningless result.  All inputs must be
    float64.  With ``samples`` set, only that many randomly chosen entries
    (across all inputs) are probed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise UsageError("finite_diff_check needs float64 inputs (use precision('float64'))")
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
    try:
        with Tape() as tape:
            loss = f(*inputs)
        grads = backward(loss, tape)
        analytic = [grads.get_for(t) for t in inputs]
    finally:
        for t, r in zip(inputs, saved):
            t.requires_grad = r

    probes = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if samples is not None and samples < len(probes):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(probes), size=samples, replace=False)
        probes = [probes[p] for p in sorted(picks)]

    worst = 0.0
    for i, j in probes:
        flat = inputs[i].data.reshape(-1)
        original = flat[j]
        flat[j] = original + eps
        up = float(f(*inputs).data)
        flat[j] = original - eps
        down = float(f(*inputs).data)
        flat[j] = original
        numeric = (up - down) / (2 * eps)
        exact = float(analytic[i].reshape(-1)[j])
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
