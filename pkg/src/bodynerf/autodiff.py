"""Dense-tensor reverse-mode autodiff on numpy arrays.

A dynamic tape: every op records its parents and a backward closure when
gradients are enabled and any input requires them. One backward traversal
per forward graph; gradients accumulate additively over fan-out. Everything
runs single-threaded through numpy, so identical seeds and inputs give
bitwise-identical values and gradients.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Switch tensor storage between float64 (default) and float32.

    Gradient tests are only meaningful in 64-bit; 32-bit is a speed switch.
    """
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    DEFAULT_DTYPE = dtype


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense nd-array plus optional gradient tape node.

    `values` is always a numpy array of the default float dtype. Leaf
    tensors created with requires_grad=True receive their gradient in
    `.grad` after `backward()`.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(()))

    def detach(self):
        """A view of the same values cut off from the graph."""
        return Tensor(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar (maps onto the registered ops below) ------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x):
    """A non-differentiable tensor (alias that reads better at call sites)."""
    return Tensor(x)


def make_node(values, parents, backward_fn, op):
    """Assemble a graph node from an op's forward result.

    `backward_fn(grad_out) -> tuple of per-parent gradients (or None for a
    parent that needs none)`. Recording is skipped when gradients are
    disabled or no parent requires them. This is also the extension hook for
    custom ops.
    """
    out = Tensor(values)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` by summing the broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise binary ops ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.values + b.values, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.values - b.values, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return make_node(av * bv, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.values == 0.0):
        raise DomainError("div: divisor contains zero")
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)

    return make_node(av / bv, (a, b), backward, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable (2-D only)")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return make_node(av @ bv, (a, b), backward, "matmul")


# -- elementwise unary ops ----------------------------------------------------


def relu(a):
    a = as_tensor(a)
    mask = a.values > 0.0

    def backward(g):
        return (g * mask,)

    return make_node(np.where(mask, a.values, 0.0), (a,), backward, "relu")


def softplus(a):
    a = as_tensor(a)
    av = a.values

    def backward(g):
        return (g / (1.0 + np.exp(-av)),)

    return make_node(np.logaddexp(0.0, av), (a,), backward, "softplus")


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.values))

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_node(y, (a,), backward, "sigmoid")


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.values)

    def backward(g):
        return (g * (1.0 - y * y),)

    return make_node(y, (a,), backward, "tanh")


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.values)

    def backward(g):
        return (g * y,)

    return make_node(y, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    av = a.values

    def backward(g):
        return (g / av,)

    return make_node(np.log(av), (a,), backward, "log")


def absolute(a):
    a = as_tensor(a)
    s = np.sign(a.values)

    def backward(g):
        return (g * s,)

    return make_node(np.abs(a.values), (a,), backward, "abs")


def sin(a):
    a = as_tensor(a)
    av = a.values

    def backward(g):
        return (g * np.cos(av),)

    return make_node(np.sin(av), (a,), backward, "sin")


def cos(a):
    a = as_tensor(a)
    av = a.values

    def backward(g):
        return (-g * np.sin(av),)

    return make_node(np.cos(av), (a,), backward, "cos")


# -- reductions ----------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return make_node(a.values.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else np.prod(
        [shape[ax % len(shape)] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return make_node(a.values.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def cumsum(a, axis):
    a = as_tensor(a)

    def backward(g):
        flipped = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(flipped, axis=axis), axis=axis),)

    return make_node(np.cumsum(a.values, axis=axis), (a,), backward, "cumsum")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (a,), backward, "softmax")


# -- shape ops ------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return make_node(a.values.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return make_node(a.values.transpose(axes), (a,), backward, "transpose")


def tensor_slice(a, key):
    """Basic indexing (ints, slices, tuples thereof); grad scatters back."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] = g
        return (out,)

    return make_node(a.values[key], (a,), backward, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(
        np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), backward, "concat"
    )


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        values = np.broadcast_to(a.values, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None

    def backward(g):
        return (_unbroadcast(g, old),)

    return make_node(values, (a,), backward, "broadcast")


# -- gather / scatter -------------------------------------------------------------


def take(a, indices):
    """Gather from the flattened tensor: out[i] = a.flat[indices[i]].

    `indices` is a constant integer array of any shape; the result has that
    shape. Differentiable w.r.t. `a` only.
    """
    a = as_tensor(a)
    idx = np.asarray(indices)
    size = a.size

    def backward(g):
        flat = np.zeros(size, dtype=g.dtype)
        np.add.at(flat, idx.ravel(), g.ravel())
        return (flat.reshape(a.shape),)

    return make_node(a.values.ravel()[idx], (a,), backward, "take")


def take_rows(a, indices):
    """Gather rows along axis 0 (convenience wrapper over fancy indexing)."""
    a = as_tensor(a)
    idx = np.asarray(indices)

    def backward(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make_node(a.values[idx], (a,), backward, "take_rows")


def scatter_add(a, indices, out_rows):
    """Scatter-add rows of `a` into a fresh (out_rows, *a.shape[1:]) tensor.

    out[indices[i]] += a[i]; the adjoint is a row gather.
    """
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_add: indices {idx.shape} do not match leading axis of {a.shape}")
    out = np.zeros((out_rows,) + a.shape[1:], dtype=a.values.dtype)
    np.add.at(out, idx, a.values)

    def backward(g):
        return (g[idx],)

    return make_node(out, (a,), backward, "scatter_add")


# -- convolutions ------------------------------------------------------------------


def _pair(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ShapeError(f"conv: expected {n} stride/padding entries, got {len(v)}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation. x: (H, W, Cin), w: (kh, kw, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    sh, sw = _pair(stride, 2)
    ph, pw = _pair(padding, 2)
    kh, kw, cin, cout = w.shape
    xp = np.pad(x.values, ((ph, ph), (pw, pw), (0, 0)))
    hp, wp = xp.shape[:2]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {xp.shape} smaller than kernel {w.shape}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))[::sh, ::sw]
    # (ho, wo, cin, kh, kw) -> columns ordered (kh, kw, cin) to match w.reshape
    xmat = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    wmat = w.values.reshape(kh * kw * cin, cout)
    y = (xmat @ wmat).reshape(ho, wo, cout)
    in_shape = x.shape

    def backward(g):
        gmat = g.reshape(ho * wo, cout)
        gw = (xmat.T @ gmat).reshape(w.shape)
        gwin = (gmat @ wmat.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros((hp, wp, cin), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                gxp[a : a + sh * ho : sh, b : b + sw * wo : sw] += gwin[:, :, a, b]
        gx = gxp[ph : ph + in_shape[0], pw : pw + in_shape[1]]
        return gx, gw

    return make_node(y, (x, w), backward, "conv2d")


def conv3d(x, w, stride=1, padding=0):
    """3-D cross-correlation. x: (D, H, W, Cin), w: (kd, kh, kw, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5 or x.shape[3] != w.shape[3]:
        raise ShapeError(f"conv3d: incompatible shapes {x.shape} and {w.shape}")
    sd, sh, sw = _pair(stride, 3)
    pd, ph, pw = _pair(padding, 3)
    kd, kh, kw, cin, cout = w.shape
    xp = np.pad(x.values, ((pd, pd), (ph, ph), (pw, pw), (0, 0)))
    dp, hp, wp = xp.shape[:3]
    if dp < kd or hp < kh or wp < kw:
        raise ShapeError(f"conv3d: padded input {xp.shape} smaller than kernel {w.shape}")
    do = (dp - kd) // sd + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(0, 1, 2))
    win = win[::sd, ::sh, ::sw]
    xmat = win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(do * ho * wo, kd * kh * kw * cin)
    wmat = w.values.reshape(kd * kh * kw * cin, cout)
    y = (xmat @ wmat).reshape(do, ho, wo, cout)
    in_shape = x.shape

    def backward(g):
        gmat = g.reshape(do * ho * wo, cout)
        gw = (xmat.T @ gmat).reshape(w.shape)
        gwin = (gmat @ wmat.T).reshape(do, ho, wo, kd, kh, kw, cin)
        gxp = np.zeros((dp, hp, wp, cin), dtype=g.dtype)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    gxp[
                        a : a + sd * do : sd, b : b + sh * ho : sh, c : c + sw * wo : sw
                    ] += gwin[:, :, :, a, b, c]
        gx = gxp[pd : pd + in_shape[0], ph : ph + in_shape[1], pw : pw + in_shape[2]]
        return gx, gw

    return make_node(y, (x, w), backward, "conv3d")


# -- backward pass -------------------------------------------------------------------


def backward(loss, leaves=None):
    """Reverse-mode sweep from a scalar loss.

    Returns a dict mapping every reached requires_grad leaf (plus any tensor
    in `leaves`) to its gradient array. Leaves also get `.grad` set. The
    graph is consumed: a second sweep over the same nodes raises.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.values).all():
        raise NumericError("backward: loss is not finite")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    if loss._op != "leaf" and loss._backward_fn is None and loss.requires_grad:
        raise ContractError("backward: graph already consumed by a previous backward()")

    grads = {id(loss): np.ones_like(loss.values)}
    tensors = {id(loss): loss}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node_tensor = tensors.pop(id(node))
        if node_tensor._backward_fn is not None:
            parent_grads = node_tensor._backward_fn(g)
            for p, pg in zip(node_tensor._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] += pg
                else:
                    grads[id(p)] = pg
                    tensors[id(p)] = p
            node_tensor._backward_fn = None
            node_tensor._parents = ()
        elif node_tensor._op == "leaf":
            grads[id(node_tensor)] = g
            tensors[id(node_tensor)] = node_tensor

    result = {}
    for tid, g in grads.items():
        t = tensors[tid]
        if t._op == "leaf" and t.requires_grad:
            t.grad = g
            result[t] = g
    if leaves is not None:
        for t in leaves:
            if t not in result:
                g = np.zeros_like(t.values)
                t.grad = g
                result[t] = g
    return result
