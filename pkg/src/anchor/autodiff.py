"""Dense tensors with tape-based reverse-mode differentiation.

Every op checks shapes explicitly (no broadcasting except scalar-times-tensor)
and refuses to produce non-finite values. When any input requires a gradient
the op appends a node to the thread's active tape; :func:`backward` walks that
tape once, in reverse, and then retires it.
"""
import contextlib
import threading

import numpy as np

from anchor import _kernels
from anchor.config import dtype


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.recording = True
        self.relu_margin = None


_state = _State()


def active_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def relu_margin_probe():
    """Track the smallest ``|input|`` seen by any relu inside the block.

    Yields a dict whose ``"min"`` entry is filled in on exit.
    """
    result = {"min": np.inf}
    old = _state.relu_margin
    _state.relu_margin = result
    try:
        yield result
    finally:
        _state.relu_margin = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    old = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = old


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "_node", "_tape", "name")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.asarray(values)
        if arr.dtype != dtype():
            arr = arr.astype(dtype())
        self.values = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self):
        return self.values

    def detach(self):
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op, out_values, inputs, vjp):
    """Wrap an op result, check it, and record it on the tape if needed."""
    if not np.all(np.isfinite(out_values)):
        raise NonFiniteError(f"{op}: produced non-finite output")
    out = Tensor(out_values)
    if _state.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _state.tape
        node = Node(op, tuple(inputs), out, vjp)
        tape.nodes.append(node)
        out._node = node
        out._tape = tape
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _needs(inputs):
    return [t.requires_grad for t in inputs]


# ---------------------------------------------------------------- elementwise

def add(a, b):
    _same_shape("add", a, b)
    return _finish("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _finish("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def scale(x, c):
    """Scalar times tensor, the only broadcast the core allows."""
    c = float(c)
    return _finish("scalar-mul", x.values * x.values.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def mul(a, b):
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _finish("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(x):
    xv = x.values
    mask = xv > 0
    probe = _state.relu_margin
    if probe is not None and xv.size:
        probe["min"] = min(probe["min"], float(np.abs(xv).min()))
    return _finish("relu", np.where(mask, xv, 0).astype(xv.dtype), (x,), lambda g: (g * mask,))


def exp(x):
    out = np.exp(x.values)

    def vjp(g):
        return (g * out,)

    return _finish("exp", out, (x,), vjp)


def log(x):
    xv = x.values
    if np.any(xv <= 0):
        raise NonFiniteError("log: argument must be strictly positive")
    return _finish("log", np.log(xv), (x,), lambda g: (g / xv,))


# ---------------------------------------------------------------- reductions

def sum(x):  # noqa: A001 - mirrors the op name
    shape = x.shape
    return _finish("sum", np.asarray(x.values.sum()), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(x):
    shape, n = x.shape, x.values.size
    out = np.asarray(x.values.sum() / x.values.dtype.type(n))

    def vjp(g):
        return (np.full(shape, g / g.dtype.type(n), dtype=g.dtype),)

    return _finish("mean", out, (x,), vjp)


def logsumexp(x):
    """Row-wise log-sum-exp of a 2-D tensor."""
    if x.values.ndim != 2:
        raise ShapeError(f"log-sum-exp: expected 2-D input, got shape {x.shape}")
    xv = x.values
    m = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _finish("log-sum-exp", out, (x,), lambda g: (g[:, None] * soft,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _finish("matmul", av @ bv, (a, b), vjp)


def bias_add(x, b):
    """Add a per-feature bias: ``[N, D] + [D]`` or ``[N, C, H, W] + [C]``."""
    xv, bv = x.values, b.values
    if bv.ndim != 1 or xv.ndim not in (2, 4) or xv.shape[1] != bv.shape[0]:
        raise ShapeError(f"bias-add: incompatible shapes {x.shape} and {b.shape}")
    if xv.ndim == 2:
        out = xv + bv[None, :]
        reduce_axes = (0,)
    else:
        out = xv + bv[None, :, None, None]
        reduce_axes = (0, 2, 3)
    return _finish("bias-add", out, (x, b), lambda g: (g, g.sum(axis=reduce_axes)))


def pairwise_dot(z):
    """Gram matrix ``z @ z.T`` of the rows of ``z``."""
    if z.values.ndim != 2:
        raise ShapeError(f"pairwise-dot: expected 2-D input, got shape {z.shape}")
    zv = z.values
    return _finish("pairwise-dot", zv @ zv.T, (z,), lambda g: ((g + g.T) @ zv,))


def l2_normalize_rows(x, floor=1e-12):
    """Scale each row to unit Euclidean norm.

    Rows whose norm is below ``floor`` are divided by ``floor`` instead; the
    count of such rows is added to ``DIAGNOSTICS['norm_floor_hits']``.
    """
    if x.values.ndim != 2:
        raise ShapeError(f"l2-normalize-rows: expected 2-D input, got shape {x.shape}")
    xv = x.values
    norms = np.sqrt((xv * xv).sum(axis=1, keepdims=True))
    floored = norms < floor
    if floored.any():
        DIAGNOSTICS["norm_floor_hits"] += int(floored.sum())
    denom = np.where(floored, xv.dtype.type(floor), norms)
    y = xv / denom

    def vjp(g):
        radial = (y * g).sum(axis=1, keepdims=True)
        gx = np.where(floored, g, g - y * radial) / denom
        return (gx,)

    return _finish("l2-normalize-rows", y, (x,), vjp)


# ---------------------------------------------------------------- shape ops

def flatten(x):
    shape = x.shape
    if len(shape) < 2:
        raise ShapeError(f"flatten: expected at least 2-D input, got shape {shape}")
    out = x.values.reshape(shape[0], -1)
    return _finish("flatten", out, (x,), lambda g: (g.reshape(shape),))


def concat(tensors):
    """Stack tensors along the first axis."""
    tensors = tuple(tensors)
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat: trailing shapes differ {tensors[0].shape} vs {t.shape}")
    sizes = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return _finish("concat", np.concatenate([t.values for t in tensors]), tensors,
                   lambda g: tuple(np.split(g, sizes)))


# ---------------------------------------------------------------- conv / pool

def conv2d(x, w):
    """3x3 convolution, stride 1, zero padding 1 (the only geometry supported)."""
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 4 or wv.shape[2:] != (3, 3) or wv.shape[1] != xv.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, C, H, W = xv.shape
    co = wv.shape[0]
    cols = _kernels.im2col(xv).reshape(B * H * W, C * 9)
    wmat = wv.reshape(co, C * 9)
    out = (cols @ wmat.T).reshape(B, H, W, co).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, co)
        gx = gw = None
        if x.requires_grad:
            gx = _kernels.col2im((g2 @ wmat).reshape(B, H, W, C, 3, 3))
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(wv.shape)
        return gx, gw

    return _finish("conv2d", np.ascontiguousarray(out), (x, w), vjp)


def global_avg_pool(x):
    if x.values.ndim != 4:
        raise ShapeError(f"global-avg-pool: expected [B, C, H, W], got shape {x.shape}")
    shape = x.shape
    hw = shape[2] * shape[3]
    out = x.values.sum(axis=(2, 3)) / x.values.dtype.type(hw)

    def vjp(g):
        return (np.broadcast_to((g / g.dtype.type(hw))[:, :, None, None], shape).copy(),)

    return _finish("global-avg-pool", out, (x,), vjp)


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits, labels, floor=1e-12):
    """Per-sample cross-entropy ``-log softmax(logits)[label]``.

    The probability is floored at ``floor`` before the log; floored samples
    get zero gradient.
    """
    lv = logits.values
    labels = np.asarray(labels)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ShapeError(f"softmax-cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise ValueError("softmax-cross-entropy: label out of range")
    m = lv.max(axis=1, keepdims=True)
    e = np.exp(lv - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (lv - m - np.log(s))[np.arange(lv.shape[0]), labels]
    log_floor = lv.dtype.type(np.log(floor))
    clipped = logp < log_floor
    out = -np.maximum(logp, log_floor)
    soft = e / s

    def vjp(g):
        grad = soft.copy()
        grad[np.arange(lv.shape[0]), labels] -= 1
        grad *= (g * ~clipped)[:, None]
        return (grad,)

    return _finish("softmax-cross-entropy", out, (logits,), vjp)


def custom(op, out_values, inputs, vjp):
    """Record a fused op with a hand-written backward rule."""
    return _finish(op, np.asarray(out_values), tuple(inputs), vjp)


DIAGNOSTICS = {"norm_floor_hits": 0}


# ---------------------------------------------------------------- dispatch

_OPS = {
    "add": add,
    "sub": sub,
    "scalar-mul": scale,
    "mul": mul,
    "matmul": matmul,
    "bias-add": bias_add,
    "conv2d": conv2d,
    "relu": relu,
    "global-avg-pool": global_avg_pool,
    "flatten": flatten,
    "concat": lambda *ts: concat(ts),
    "l2-normalize-rows": l2_normalize_rows,
    "pairwise-dot": pairwise_dot,
    "log-sum-exp": logsumexp,
    "softmax-cross-entropy": softmax_cross_entropy,
    "elementwise-log": log,
    "elementwise-exp": exp,
    "sum": sum,
    "mean": mean,
}

OP_KINDS = tuple(_OPS)


def forward_op(kind, inputs, attrs=None):
    """Apply op ``kind`` to ``inputs``; ``attrs`` are passed as keywords."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------- backward

def backward(root):
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Leaf gradients accumulate (add to an existing ``.grad``). The tape that
    produced ``root`` is retired afterwards and a fresh one becomes active.
    """
    if root.values.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        if root.requires_grad and root.is_leaf:
            root.grad = _acc(root.grad, np.ones_like(root.values))
            return
        raise TapeError("root was not produced on a tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape")

    grads = {id(root): np.ones_like(root.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = _acc(inp.grad, gi)
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.nodes = []
    if _state.tape is tape:
        _state.tape = Tape()


def _acc(old, new):
    new = np.asarray(new, dtype=dtype())
    if old is None:
        return new.copy()
    return old + new


def reset_tape():
    """Drop any unconsumed recording (e.g. after an aborted forward pass)."""
    _state.tape = Tape()
