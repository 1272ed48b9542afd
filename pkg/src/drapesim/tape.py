"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tape`` is an append-only record of primitive operations; ``backward``
sweeps it once in reverse creation order, which is a valid topological
order by construction. Plain ndarrays act as constants: every op accepts a
mix of ``TrackedTensor`` and ndarray inputs, and when no input is tracked
the op short-circuits to raw numpy with no recording overhead. That single
code path serves both training (tracked) and plain evaluation (raw).

All reductions used in backward passes (bincount-based scatter adds) run
in input order on a single thread, so gradients are bitwise reproducible
regardless of BLAS thread count.

Convention: relu'(0) = 0.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

__all__ = [
    "Tape",
    "TrackedTensor",
    "value_of",
    "is_tracked",
    "custom_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "einsum2",
    "trace22",
    "transpose_last2",
    "concat",
    "gather",
    "scatter_add",
    "narrow",
    "reshape",
    "relu",
    "tanh",
    "softplus",
    "reduce_sum",
    "reduce_mean",
    "vector_norm",
    "cross",
    "layer_norm",
    "stop_gradient",
]


class TrackedTensor:
    """Dense array plus its position on a tape (``tape is None`` = constant)."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape=None, node_id=None):
        self.values = np.asarray(values)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        tag = f"node {self.node_id}" if self.tape is not None else "const"
        return f"TrackedTensor(shape={self.values.shape}, {tag})"

    # light operator sugar so force/solver code stays readable
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

    def __neg__(self):
        return neg(self)


def value_of(x):
    """Raw ndarray of ``x`` whether tracked or constant."""
    if isinstance(x, TrackedTensor):
        return x.values
    return np.asarray(x)


def is_tracked(x):
    return isinstance(x, TrackedTensor) and x.tape is not None


class _Node:
    __slots__ = ("input_ids", "backward")

    def __init__(self, input_ids, backward):
        self.input_ids = input_ids
        self.backward = backward


class Tape:
    """Append-only operation record supporting one reverse sweep per loss."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_shapes: dict[int, tuple] = {}

    def __len__(self):
        return len(self._nodes)

    def leaf(self, values) -> TrackedTensor:
        """Register ``values`` as a differentiable input (parameter/state)."""
        values = np.asarray(values)
        node_id = len(self._nodes)
        self._nodes.append(_Node((), None))
        self._leaf_shapes[node_id] = values.shape
        return TrackedTensor(values, self, node_id)

    def _record(self, values, inputs, backward) -> TrackedTensor:
        ids = tuple(
            x.node_id if (isinstance(x, TrackedTensor) and x.tape is self) else None
            for x in inputs
        )
        node_id = len(self._nodes)
        self._nodes.append(_Node(ids, backward))
        return TrackedTensor(values, self, node_id)

    def backward(self, loss: TrackedTensor) -> "Gradients":
        """Accumulate d(loss)/d(leaf) for every leaf on this tape.

        ``loss`` must be a scalar tracked tensor living on this tape. Each
        node is visited exactly once, in reverse creation order.
        """
        if not isinstance(loss, TrackedTensor) or loss.tape is not self:
            raise ValidationError("backward: loss is not tracked on this tape")
        if loss.values.size != 1:
            raise ValidationError(
                f"backward: loss must be scalar, got shape {loss.values.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.values, dtype=np.float64)
        }
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self._nodes[node_id]
            if node.backward is None:
                grads[node_id] = g  # leaf: keep
                continue
            input_grads = node.backward(g)
            for inp_id, ig in zip(node.input_ids, input_grads):
                if inp_id is None or ig is None:
                    continue
                acc = grads.get(inp_id)
                grads[inp_id] = ig if acc is None else acc + ig
        return Gradients(self, grads)


class Gradients:
    """Leaf gradient map; untouched leaves read as zeros."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def of(self, leaf) -> np.ndarray:
        if isinstance(leaf, TrackedTensor):
            if leaf.tape is not self._tape:
                raise ValidationError("gradient lookup: tensor from another tape")
            node_id = leaf.node_id
        else:
            node_id = int(leaf)
        g = self._grads.get(node_id)
        if g is not None:
            return g
        shape = self._tape._leaf_shapes.get(node_id)
        if shape is None:
            raise ValidationError(f"gradient lookup: node {node_id} is not a leaf")
        return np.zeros(shape, dtype=np.float64)


def _tape_among(args):
    tape = None
    for a in args:
        if is_tracked(a):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ValidationError("operands live on different tapes")
    return tape


def custom_op(inputs, values, backward) -> TrackedTensor | np.ndarray:
    """Record a fused primitive: ``backward(g)`` returns per-input grads."""
    t = _tape_among(inputs)
    if t is None:
        return values
    return t._record(values, inputs, backward)


def _unbroadcast(grad, shape):
    """Sum-reduce ``grad`` back to an operand's pre-broadcast ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    t = _tape_among((a, b))
    if t is None:
        return out
    ash, bsh = av.shape, bv.shape
    return t._record(
        out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    t = _tape_among((a, b))
    if t is None:
        return out
    ash, bsh = av.shape, bv.shape
    return t._record(
        out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))
    )


def neg(a):
    av = value_of(a)
    t = _tape_among((a,))
    if t is None:
        return -av
    return t._record(-av, (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    t = _tape_among((a, b))
    if t is None:
        return out
    ash, bsh = av.shape, bv.shape
    return t._record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    t = _tape_among((a, b))
    if t is None:
        return out
    ash, bsh = av.shape, bv.shape
    return t._record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, ash),
            _unbroadcast(-g * av / (bv * bv), bsh),
        ),
    )


def matmul(a, b):
    """Matrix product with leading batch broadcast; both operands >= 2-D."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValidationError(
            f"matmul: operands must be >=2-D, got {av.shape} @ {bv.shape}"
        )
    if av.shape[-1] != bv.shape[-2]:
        raise ValidationError(f"matmul: shape mismatch {av.shape} @ {bv.shape}")
    out = av @ bv
    t = _tape_among((a, b))
    if t is None:
        return out
    ash, bsh = av.shape, bv.shape

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, ash), _unbroadcast(gb, bsh)

    return t._record(out, (a, b), backward)


def einsum2(spec, a, b):
    """Two-operand einsum whose adjoint is itself an einsum.

    Every index of each operand must appear in the output or the other
    operand (no internal diagonals/self-contractions), which holds for all
    contraction patterns used in this package.
    """
    av, bv = value_of(a), value_of(b)
    ins, out_spec = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    if not (set(sa) <= set(out_spec) | set(sb) and set(sb) <= set(out_spec) | set(sa)):
        raise ValidationError(f"einsum2: unsupported spec {spec!r}")
    out = np.einsum(spec, av, bv)
    t = _tape_among((a, b))
    if t is None:
        return out

    def backward(g):
        ga = np.einsum(f"{out_spec},{sb}->{sa}", g, bv)
        gb = np.einsum(f"{out_spec},{sa}->{sb}", g, av)
        return ga, gb

    return t._record(out, (a, b), backward)


def trace22(a):
    """Trace over the last two (square) axes."""
    av = value_of(a)
    k = av.shape[-1]
    if av.shape[-2] != k:
        raise ValidationError(f"trace22: last two axes must be square, got {av.shape}")
    out = np.einsum("...ii->...", av)
    t = _tape_among((a,))
    if t is None:
        return out
    eye = np.eye(k)
    return t._record(out, (a,), lambda g: (g[..., None, None] * eye,))


def transpose_last2(a):
    av = value_of(a)
    out = np.swapaxes(av, -1, -2)
    t = _tape_among((a,))
    if t is None:
        return out
    return t._record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    t = _tape_among(parts)
    if t is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(vals))
        )

    return t._record(out, tuple(parts), backward)


def _segment_add(vals, idx, n):
    """Deterministic index-add: out[idx[k]] += vals[k], summed in input order."""
    vals = np.asarray(vals)
    flat = vals.reshape(vals.shape[0], -1)
    out = np.empty((n, flat.shape[1]), dtype=np.float64)
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + vals.shape[1:])


def gather(a, idx):
    """Row gather along axis 0; adjoint of scatter_add."""
    av = value_of(a)
    idx = np.asarray(idx)
    out = np.take(av, idx, axis=0)
    t = _tape_among((a,))
    if t is None:
        return out
    n = av.shape[0]
    flat_idx = idx.reshape(-1)

    def backward(g):
        gf = g.reshape((flat_idx.size,) + av.shape[1:])
        return (_segment_add(gf, flat_idx, n),)

    return t._record(out, (a,), backward)


def scatter_add(vals, idx, size):
    """out[i] = sum of vals rows with idx == i, accumulated in input order."""
    vv = value_of(vals)
    idx = np.asarray(idx)
    if idx.ndim != 1 or vv.shape[0] != idx.shape[0]:
        raise ValidationError(
            f"scatter_add: index shape {idx.shape} does not match rows {vv.shape}"
        )
    out = _segment_add(vv, idx, size)
    t = _tape_among((vals,))
    if t is None:
        return out
    return t._record(out, (vals,), lambda g: (np.take(g, idx, axis=0),))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    av = value_of(a)
    sl = [slice(None)] * av.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = av[sl]
    t = _tape_among((a,))
    if t is None:
        return out
    shape = av.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        full[sl] = g
        return (full,)

    return t._record(out, (a,), backward)


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    t = _tape_among((a,))
    if t is None:
        return out
    orig = av.shape
    return t._record(out, (a,), lambda g: (g.reshape(orig),))


def relu(a):
    av = value_of(a)
    out = np.maximum(av, 0.0)
    t = _tape_among((a,))
    if t is None:
        return out
    mask = av > 0  # subgradient at 0 is 0
    return t._record(out, (a,), lambda g: (g * mask,))


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    t = _tape_among((a,))
    if t is None:
        return out
    return t._record(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    t = _tape_among((a,))
    if t is None:
        return out
    sig = 1.0 / (1.0 + np.exp(-av))
    return t._record(out, (a,), lambda g: (g * sig,))


def reduce_sum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    t = _tape_among((a,))
    if t is None:
        return out
    shape = av.shape

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return t._record(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        count = av.size
    else:
        count = av.shape[axis]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def vector_norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; gradient is 0 where the norm is 0."""
    av = value_of(a)
    out = np.sqrt(np.sum(av * av, axis=axis, keepdims=keepdims))
    t = _tape_among((a,))
    if t is None:
        return out

    def backward(g):
        g = np.asarray(g)
        n = out
        if not keepdims:
            g = np.expand_dims(g, axis)
            n = np.expand_dims(out, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (g * av / safe * (n > 0.0),)

    return t._record(out, (a,), backward)


def cross(a, b):
    """Row-wise 3-vector cross product."""
    av, bv = value_of(a), value_of(b)
    out = np.cross(av, bv)
    t = _tape_among((a, b))
    if t is None:
        return out
    ash, bsh = av.shape, bv.shape

    def backward(g):
        return (
            _unbroadcast(np.cross(bv, g), ash),
            _unbroadcast(np.cross(g, av), bsh),
        )

    return t._record(out, (a, b), backward)


def layer_norm(a, gain, bias, eps=1e-6):
    """Normalize over the last axis, then scale and shift."""
    av, gv, bv = value_of(a), value_of(gain), value_of(bias)
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gv + bv
    t = _tape_among((a, gain, bias))
    if t is None:
        return out
    gsh, bsh = gv.shape, bv.shape

    def backward(g):
        dgain = _unbroadcast(g * y, gsh)
        dbias = _unbroadcast(g, bsh)
        dy = g * gv
        dx = inv * (
            dy
            - dy.mean(axis=-1, keepdims=True)
            - y * (dy * y).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return t._record(out, (a, gain, bias), backward)


def stop_gradient(a):
    """Forward identity that detaches from the tape (returns a constant)."""
    return value_of(a).copy()
