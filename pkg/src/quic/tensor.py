"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation on tracked tensors records a
node on an implicit tape, and :func:`backward` replays the tape in reverse
to accumulate gradients for every tracked leaf. The tape is discarded
after each backward pass and rebuilt by the next forward pass.

Storage defaults to float32; reductions and matrix-product inner loops
accumulate in float64 before casting back. Constructing tensors with
``dtype=np.float64`` turns the same ops into the 64-bit shadow evaluator
used by the finite-difference test harness.
"""

from __future__ import annotations

import numpy as np

from . import tracking
from .errors import DataError, DimensionError, UsageError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tape:
    """Operations recorded by one forward pass, in topological order.

    Node ``i`` stores the node ids of its inputs (``None`` for untracked
    inputs) and a backward closure mapping the output gradient to input
    gradients. Leaves have no closure. Recording order is topological by
    construction, so the backward sweep is a single reverse scan.
    """

    def __init__(self):
        self._inputs = []
        self._backward = []
        self._leaves = {}

    def __len__(self):
        return len(self._inputs)

    def _add(self, input_ids, backward_fn):
        self._inputs.append(tuple(input_ids))
        self._backward.append(backward_fn)
        return len(self._inputs) - 1


_current_tape = None
_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (evaluation passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _tape():
    global _current_tape
    if _current_tape is None:
        _current_tape = Tape()
    return _current_tape


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._tape = None

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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        return backward(self)


# -- tape plumbing ------------------------------------------------------

def _node_id(t):
    """Node id of ``t`` on the current tape, registering leaves lazily."""
    if not (t.requires_grad and _grad_enabled):
        return None
    tp = _tape()
    if t._tape is not tp:
        t._node = tp._add((), None)
        t._tape = tp
        tp._leaves[t._node] = t
    return t._node


def record_op(out_data, parents, backward_fn):
    """Wrap ``out_data`` in a Tensor, recording a tape node when tracked.

    ``backward_fn(grad) -> sequence of gradients`` aligned with
    ``parents``; entries for untracked parents may be ``None``.
    """
    if not _grad_enabled:
        return Tensor(out_data)
    ids = tuple(_node_id(p) for p in parents)
    if all(i is None for i in ids):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tp = _tape()
    out._node = tp._add(ids, backward_fn)
    out._tape = tp
    return out


def backward(loss):
    """Reverse sweep from a scalar loss.

    Returns a map ``{leaf node id -> gradient Tensor}`` covering every
    tracked leaf of the tape (zeros for leaves the loss does not reach),
    and stores the same arrays on each leaf's ``.grad``. Consumes the
    tape: the next op starts a fresh one.
    """
    global _current_tape
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor loss")
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._node is None:
        raise UsageError("backward requires a grad-tracked loss")
    tp = loss._tape
    if tp is None or tp is not _current_tape:
        raise UsageError("the tape for this loss has already been consumed")

    grads = [None] * len(tp)
    grads[loss._node] = np.ones_like(loss.data)
    for nid in range(len(tp) - 1, -1, -1):
        g = grads[nid]
        fn = tp._backward[nid]
        if g is None or fn is None:
            continue
        for pid, pg in zip(tp._inputs[nid], fn(g)):
            if pid is None or pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg

    out = {}
    for nid, leaf in tp._leaves.items():
        g = grads[nid]
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        out[nid] = Tensor(g)
    _current_tape = None
    return out


# -- elementwise ops ----------------------------------------------------

def _pair(a, b, name):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise UsageError(f"{name} needs at least one Tensor operand")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.data.dtype != b.data.dtype:
        raise UsageError(f"{name}: mixed dtypes {a.data.dtype} and {b.data.dtype}")
    sa, sb = a.shape, b.shape
    ok = (sa == sb
          or sa == () or sb == ()
          or (len(sa) >= 1 and sb == sa[-1:])
          or (len(sb) >= 1 and sa == sb[-1:]))
    if not ok:
        raise DimensionError(
            f"{name}: shapes {sa} and {sb} are neither equal nor a "
            f"scalar/trailing-vector broadcast")
    return a, b


def _reduce_grad(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype)
    n = shape[0]
    return g.reshape(-1, n).sum(axis=0, dtype=np.float64).astype(g.dtype)


def add(a, b):
    a, b = _pair(a, b, "add")
    out = a.data + b.data
    tracking.note(out.size)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_grad(g, sa), _reduce_grad(g, sb)

    return record_op(out, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b, "sub")
    out = a.data - b.data
    tracking.note(out.size)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_grad(g, sa), _reduce_grad(-g, sb)

    return record_op(out, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    tracking.note(out.size)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_grad(g * bd, sa), _reduce_grad(g * ad, sb)

    return record_op(out, (a, b), bw)


def scale(x, alpha):
    """Multiply by a python scalar."""
    alpha = float(alpha)
    out = x.data * x.data.dtype.type(alpha)
    tracking.note(out.size)

    def bw(g):
        return (g * g.dtype.type(alpha),)

    return record_op(out, (x,), bw)


def relu(x):
    xd = x.data
    out = np.maximum(xd, 0)
    tracking.note(out.size)

    def bw(g):
        return (g * (xd > 0),)

    return record_op(out, (x,), bw)


def sigmoid(x):
    xd = x.data
    # exp(-|x|) never overflows; the two branches cover both signs stably
    t = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t)).astype(xd.dtype)
    tracking.note(out.size)

    def bw(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (x,), bw)


# -- linear algebra -----------------------------------------------------

def matmul(a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise UsageError("matmul expects Tensor operands")
    if a.data.dtype != b.data.dtype:
        raise UsageError(f"matmul: mixed dtypes {a.data.dtype} and {b.data.dtype}")
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    dtype = ad.dtype
    with tracking.transient(ad.size):
        out = np.matmul(ad.astype(np.float64, copy=False),
                        bd.astype(np.float64, copy=False)).astype(dtype)
    tracking.note(out.size)

    def bw(g):
        with tracking.transient(g.size):
            g64 = g.astype(np.float64, copy=False)
            da = np.matmul(g64, bd.astype(np.float64, copy=False).T).astype(dtype)
            db = np.matmul(ad.astype(np.float64, copy=False).T, g64).astype(dtype)
        return da, db

    return record_op(out, (a, b), bw)


def transpose(x):
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    out = np.ascontiguousarray(x.data.T)
    tracking.note(out.size)

    def bw(g):
        return (np.ascontiguousarray(g.T),)

    return record_op(out, (x,), bw)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}: {e}") from None
    out = np.ascontiguousarray(out)
    in_shape = x.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return record_op(out, (x,), bw)


# -- reductions ---------------------------------------------------------

def _check_axis(x, axis):
    if axis is None:
        return None
    axis = int(axis)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank-{x.ndim} tensor")
    return axis % x.ndim if x.ndim else 0


def reduce_sum(x, axis=None):
    axis = _check_axis(x, axis)
    xd = x.data
    out = np.asarray(xd.sum(axis=axis, dtype=np.float64), dtype=xd.dtype)
    in_shape = xd.shape

    def bw(g):
        if axis is None:
            return (np.ascontiguousarray(np.broadcast_to(g, in_shape)),)
        return (np.ascontiguousarray(
            np.broadcast_to(np.expand_dims(g, axis), in_shape)),)

    return record_op(out, (x,), bw)


def reduce_mean(x, axis=None):
    axis = _check_axis(x, axis)
    xd = x.data
    n = xd.size if axis is None else xd.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    out = np.asarray(xd.mean(axis=axis, dtype=np.float64), dtype=xd.dtype)
    in_shape = xd.shape

    def bw(g):
        gd = g / g.dtype.type(n)
        if axis is None:
            return (np.ascontiguousarray(np.broadcast_to(gd, in_shape)),)
        return (np.ascontiguousarray(
            np.broadcast_to(np.expand_dims(gd, axis), in_shape)),)

    return record_op(out, (x,), bw)


# -- composite primitives ----------------------------------------------

def l2_normalize_rows(z, eps=1e-12):
    """Scale each row of a matrix to unit Euclidean norm."""
    zd = z.data
    if zd.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got {zd.shape}")
    dtype = zd.dtype
    with tracking.transient(zd.size):
        z64 = zd.astype(np.float64, copy=False)
        norms = np.sqrt((z64 * z64).sum(axis=1, keepdims=True))
        norms = np.maximum(norms, eps)
        out = (z64 / norms).astype(dtype)
    tracking.note(out.size)

    def bw(g):
        with tracking.transient(2 * zd.size):
            g64 = g.astype(np.float64, copy=False)
            y = z64 / norms
            rowdot = (g64 * y).sum(axis=1, keepdims=True)
            dz = ((g64 - y * rowdot) / norms).astype(dtype)
        return (dz,)

    return record_op(out, (z,), bw)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class over a batch.

    ``labels`` are integer class indices in ``[0, K)``. The log-softmax
    is computed in float64 with max-subtraction, so extreme logits do not
    overflow.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects B x K logits, got {ld.shape}")
    b, k = ld.shape
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != b:
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch size {b}")
    if labels.dtype.kind not in "iu":
        if not np.all(labels == np.round(labels)):
            raise DataError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(f"label {int(labels[i])} at index {i} is outside [0, {k})")
    labels = labels.astype(np.int64)

    x64 = ld.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = np.asarray(-logp[np.arange(b), labels].mean(), dtype=ld.dtype)
    probs = np.exp(logp)

    def bw(g):
        gl = probs.copy()
        gl[np.arange(b), labels] -= 1.0
        gl *= float(g) / b
        return (gl.astype(ld.dtype),)

    return record_op(loss, (logits,), bw)
