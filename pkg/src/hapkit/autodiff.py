"""Tape-based reverse-mode automatic differentiation with double backprop.

Every primitive's backward rule is written in terms of primitives, so a gradient
computed with ``create_graph=True`` is itself a differentiable graph.  The
Hessian-vector product is the gradient of ``<grad(loss), v>``; no Hessian is
ever formed.

ReLU has second derivative zero everywhere, including at the kink, where the
first derivative is taken as 0 (subgradient convention).

All arithmetic is float64.  Any op that produces a NaN or Inf raises
:class:`~hapkit.errors.NonFiniteError` at the point of creation.
"""

import contextlib
import itertools
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Node",
    "Tape",
    "forward",
    "gradient",
    "hvp",
    "quadratic_form",
    "backward",
    "no_grad",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "sum_to",
    "sum_all",
    "broadcast_to",
    "sum_axis",
    "relu",
    "softmax",
    "cross_entropy",
    "mse",
    "conv2d",
    "conv2d_nhwc",
    "avg_pool",
    "take",
    "concat",
]

_uid = itertools.count()
_state = threading.local()


class Node:
    """A value in the computation graph."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "uid", "op")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, op="const"):
        self.data = data
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.uid = next(_uid)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled):
    prev = _grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    """Context manager that suspends graph recording."""
    return _grad_mode(False)


@contextlib.contextmanager
def _taping(nodes):
    prev = getattr(_state, "tape", None)
    _state.tape = nodes
    try:
        yield
    finally:
        _state.tape = prev


def _needs(node):
    """Whether the running reverse sweep wants a cotangent for ``node``."""
    relevant = getattr(_state, "relevant", None)
    return node.requires_grad and (relevant is None or node.uid in relevant)


def _make(data, parents, backward_fn, op):
    data = np.asarray(data, dtype=np.float64)
    # a finite sum implies finite entries; fall back only to rule out overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if not np.isfinite(total) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    if not (_grad_enabled() and any(p.requires_grad for p in parents)):
        return Node(data, op=op)
    node = Node(data, parents, backward_fn, True, op)
    tape = getattr(_state, "tape", None)
    if tape is not None:
        tape.append(node)
    return node


def constant(value):
    return Node(np.asarray(value, dtype=np.float64))


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


# -- elementwise and broadcasting ------------------------------------------


def add(a, b):
    a, b = _as_node(a), _as_node(b)

    def back(g):
        return (
            sum_to(g, a.shape) if _needs(a) else None,
            sum_to(g, b.shape) if _needs(b) else None,
        )

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _as_node(a), _as_node(b)

    def back(g):
        return (
            sum_to(g, a.shape) if _needs(a) else None,
            sum_to(scale(g, -1.0), b.shape) if _needs(b) else None,
        )

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _as_node(a), _as_node(b)

    def back(g):
        return (
            sum_to(mul(g, b), a.shape) if _needs(a) else None,
            sum_to(mul(g, a), b.shape) if _needs(b) else None,
        )

    return _make(a.data * b.data, (a, b), back, "mul")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    return _make(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def sum_to(a, shape):
    """Sum ``a`` down to ``shape``, undoing numpy broadcasting."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    data = a.data
    lead = data.ndim - len(shape)
    if lead:
        data = data.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    src = a.shape
    return _make(data.reshape(shape), (a,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    data = np.broadcast_to(a.data, shape).copy()
    return _make(data, (a,), lambda g: (sum_to(g, src),), "broadcast_to")


def sum_all(a):
    return sum_to(a, ())


def sum_axis(a, axis):
    """Sum over one axis, keeping it as a length-1 dimension."""
    src = a.shape
    data = a.data.sum(axis=axis, keepdims=True)
    return _make(data, (a,), lambda g: (broadcast_to(g, src),), "sum_axis")


def relu(a):
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, constant(mask)),), "relu")


# -- structural ------------------------------------------------------------


def reshape(a, shape):
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _make(data, (a,), lambda g: (transpose(g, inverse),), "transpose")


def _swap_last(a):
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def take(a, indices, axis):
    """Gather ``indices`` along ``axis``; the adjoint is a scatter-add."""
    indices = np.asarray(indices, dtype=np.intp)
    size = a.shape[axis]
    return _make(
        np.take(a.data, indices, axis=axis),
        (a,),
        lambda g: (_scatter(g, indices, axis, size),),
        "take",
    )


def _scatter(a, indices, axis, size):
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, indices, np.moveaxis(a.data, axis, 0))
    return _make(out, (a,), lambda g: (take(g, indices, axis),), "scatter")


def concat(nodes, axis):
    nodes = [_as_node(n) for n in nodes]
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def back(g):
        return tuple(
            take(g, np.arange(lo, hi), axis) if _needs(n) else None
            for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:])
        )

    data = np.concatenate([n.data for n in nodes], axis=axis)
    return _make(data, tuple(nodes), back, "concat")


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy semantics (both operands >= 2-D)."""
    a, b = _as_node(a), _as_node(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        return (
            sum_to(matmul(g, _swap_last(b)), a.shape) if _needs(a) else None,
            sum_to(matmul(_swap_last(a), g), b.shape) if _needs(b) else None,
        )

    return _make(np.matmul(a.data, b.data), (a, b), back, "matmul")


def _im2col(x, k, pad):
    # x is channels-last: (N, H, W, C) -> rows (N*Ho*Wo, C*k*k)
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # n, ho, wo, c, k, k
    ho, wo = win.shape[1], win.shape[2]
    return win.reshape(n * ho * wo, c * k * k)


def _col2im(cols, xshape, k, pad):
    n, h, w, c = xshape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    taps = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            out[:, i:i + ho, j:j + wo] += taps[..., i, j]
    if pad:
        out = np.ascontiguousarray(out[:, pad:-pad, pad:-pad])
    return out


def im2col(x, k, pad):
    xshape = x.shape
    return _make(
        _im2col(x.data, k, pad), (x,), lambda g: (col2im(g, xshape, k, pad),), "im2col"
    )


def col2im(cols, xshape, k, pad):
    return _make(
        _col2im(cols.data, xshape, k, pad), (cols,), lambda g: (im2col(g, k, pad),), "col2im"
    )


def conv2d_nhwc(x, w, b=None, padding="same"):
    """Channels-last convolution: ``x`` is (N, H, W, C), result (N, Ho, Wo, O)."""
    x, w = _as_node(x), _as_node(w)
    n, h, wd, c = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d shapes incompatible: x {x.shape} (channels last), w {w.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    pad = k // 2 if padding == "same" else 0
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    if k == 1:
        cols = reshape(x, (n * h * wd, c))
    else:
        cols = im2col(x, k, pad)
    out = reshape(matmul(cols, transpose(reshape(w, (o, c * k * k)), (1, 0))), (n, ho, wo, o))
    if b is not None:
        out = add(out, reshape(_as_node(b), (1, 1, 1, o)))
    return out


def conv2d(x, w, b=None, padding="same"):
    """2-D convolution, stride 1, square odd kernel.

    Args:
        x: input of shape (N, C, H, W).
        w: filters of shape (O, C, k, k).
        b: optional bias of shape (O,).
        padding: ``"same"`` or ``"valid"``.
    """
    x = _as_node(x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be (N, C, H, W), got {x.shape}")
    out = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, b, padding)
    return transpose(out, (0, 3, 1, 2))


def avg_pool(x, k, channels_last=False):
    """Non-overlapping k x k average pool over the spatial axes."""
    x = _as_node(x)
    ax = (1, 2) if channels_last else (2, 3)
    h, w = x.shape[ax[0]], x.shape[ax[1]]
    if h % k or w % k:
        raise ShapeError(f"avg_pool window {k} does not tile {h}x{w}")
    shape = list(x.shape)
    shape[ax[1]:ax[1] + 1] = [w // k, k]
    shape[ax[0]:ax[0] + 1] = [h // k, k]
    data = x.data.reshape(shape).mean(axis=(ax[0] + 1, ax[1] + 2))
    return _make(data, (x,), lambda g: (_avg_unpool(g, k, ax),), "avg_pool")


def _avg_unpool(y, k, ax):
    data = np.repeat(np.repeat(y.data, k, axis=ax[0]), k, axis=ax[1]) / (k * k)
    return _make(data, (y,), lambda g: (avg_pool(g, k, ax == (1, 2)),), "avg_unpool")


# -- probabilistic heads and losses ----------------------------------------


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (mul(out, sub(g, sum_axis(mul(g, out), axis))),)

    out = _make(s, (a,), back, "softmax")
    return out


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy of (N, K) logits against (N, K) target rows."""
    logits = _as_node(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = -(t * logp).sum() / n
    tn = constant(t)

    def back(g):
        gb = broadcast_to(reshape(g, (1, 1)), logits.shape)
        return (scale(mul(gb, sub(softmax(logits, axis=1), tn)), 1.0 / n),)

    return _make(value, (logits,), back, "cross_entropy")


def mse(pred, targets):
    """Mean over examples of half the squared error, ``(1/N) sum 0.5*||p - t||^2``."""
    pred = _as_node(pred)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"targets {t.shape} do not match predictions {pred.shape}")
    n = pred.shape[0]
    value = 0.5 * ((pred.data - t) ** 2).sum() / n
    tn = constant(t)

    def back(g):
        gb = broadcast_to(reshape(g, (1,) * pred.data.ndim), pred.shape)
        return (scale(mul(gb, sub(pred, tn)), 1.0 / n),)

    return _make(value, (pred,), back, "mse")


# -- the reverse sweep -----------------------------------------------------


def _topo(root):
    seen = {root.uid: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.requires_grad and p.uid not in seen:
                seen[p.uid] = p
                stack.append(p)
    # creation order is a topological order
    return sorted(seen.values(), key=lambda n: n.uid, reverse=True)


def _relevant(order, keep):
    """Uids of nodes in ``order`` that lie on a path to some node in ``keep``."""
    out = set()
    for node in reversed(order):
        if node.uid in keep or any(p.uid in out for p in node.parents):
            out.add(node.uid)
    return out


# overflow is reported as NonFiniteError; numpy's own warnings would be noise
@np.errstate(over="ignore", invalid="ignore")
def backward(root, wrt, create_graph=False):
    """Gradient of scalar ``root`` with respect to each node in ``wrt``.

    With ``create_graph=True`` the returned gradients are graph nodes that can
    be differentiated again; otherwise plain arrays are returned.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {root.shape}")
    keep = {w.uid for w in wrt}
    grads = {root.uid: constant(np.ones_like(root.data))}
    order = _topo(root)
    relevant = _relevant(order, keep)
    prev_relevant = getattr(_state, "relevant", None)
    _state.relevant = relevant
    try:
        with _grad_mode(create_graph):
            _sweep(order, relevant, keep, grads)
    finally:
        _state.relevant = prev_relevant
    out = []
    for w in wrt:
        g = grads.get(w.uid)
        if g is None:
            g = constant(np.zeros(w.shape))
        out.append(g if create_graph else g.data)
    return out


def _sweep(order, relevant, keep, grads):
    for node in order:
        if node.uid not in relevant:
            continue
        g = grads.get(node.uid) if node.uid in keep else grads.pop(node.uid, None)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or parent.uid not in relevant:
                continue
            prev = grads.get(parent.uid)
            grads[parent.uid] = pg if prev is None else add(prev, pg)


class Tape:
    """Recorded forward computation of a scalar loss.

    Attributes:
        nodes: recorded nodes in creation (topological) order.
        params: parameter leaf nodes, in the order they were passed.
        output: the loss node.
    """

    def __init__(self, nodes, params, output):
        self.nodes = tuple(nodes)
        self.params = tuple(params)
        self.output = output
        self._lock = threading.Lock()
        self._grad_graph = None

    @property
    def param_ids(self):
        return tuple(p.uid for p in self.params)

    @property
    def output_id(self):
        return self.output.uid

    def grad_graph(self):
        """Differentiable gradient graph, built once and shared by every HVP."""
        with self._lock:
            if self._grad_graph is None:
                self._grad_graph = backward(self.output, self.params, create_graph=True)
            return self._grad_graph


@np.errstate(over="ignore", invalid="ignore")
def forward(model_fn, params, batch):
    """Evaluate ``model_fn(param_nodes, inputs, labels)`` and record the tape.

    Returns:
        (loss, tape) with ``loss`` a Python float.
    """
    inputs, labels = batch
    if len(inputs) == 0:
        raise ShapeError("batch is empty")
    declared = getattr(model_fn, "param_shapes", None)
    if declared is not None:
        got = [np.shape(p) for p in params]
        if [tuple(s) for s in declared] != got:
            raise ShapeError(f"parameter shapes {got} do not match declared {list(declared)}")
    nodes = []
    with _taping(nodes), _grad_mode(True):
        leaves = [
            Node(np.array(p, dtype=np.float64), requires_grad=True, op="param") for p in params
        ]
        nodes.extend(leaves)
        loss = model_fn(leaves, inputs, labels)
    if loss.size != 1:
        raise ShapeError(f"model_fn must return a scalar loss, got shape {loss.shape}")
    return float(loss.data), Tape(nodes, leaves, loss)


def gradient(tape):
    """d(loss)/d(params), one array per parameter."""
    return backward(tape.output, tape.params)


def _check_direction(tape, v):
    if len(v) != len(tape.params):
        raise ShapeError(f"expected {len(tape.params)} direction tensors, got {len(v)}")
    for p, vi in zip(tape.params, v):
        if np.shape(vi) != p.shape:
            raise ShapeError(f"direction shape {np.shape(vi)} != parameter shape {p.shape}")


def hvp(tape, v):
    """Hessian-vector product ``H v`` by double backprop."""
    _check_direction(tape, v)
    grads = tape.grad_graph()
    with _grad_mode(True):
        s = None
        for g, vi in zip(grads, v):
            vi = np.asarray(vi, dtype=np.float64)
            if not g.requires_grad or not vi.any():
                continue
            term = sum_all(mul(g, constant(vi)))
            s = term if s is None else add(s, term)
    if s is None:
        return [np.zeros(p.shape) for p in tape.params]
    return backward(s, tape.params)


def _restricted_hvp(tape, v):
    """``H v`` on the parameters where ``v`` is nonzero, zeros elsewhere."""
    _check_direction(tape, v)
    v = [np.asarray(vi, dtype=np.float64) for vi in v]
    active = [i for i, vi in enumerate(v) if vi.any()]
    grads = tape.grad_graph()
    with _grad_mode(True):
        terms = [sum_all(mul(grads[i], constant(v[i]))) for i in active if grads[i].requires_grad]
    out = [np.zeros(p.shape) for p in tape.params]
    if not terms:
        return out
    s = terms[0]
    with _grad_mode(True):
        for t in terms[1:]:
            s = add(s, t)
    for i, h in zip(active, backward(s, [tape.params[i] for i in active])):
        out[i] = h
    return out


def quadratic_form(tape, v):
    """``v^T H v``."""
    hv = _restricted_hvp(tape, v)
    return float(sum(np.vdot(np.asarray(vi, dtype=np.float64), h) for vi, h in zip(v, hv)))
