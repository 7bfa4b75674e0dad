"""Dense tensors with reverse-mode automatic differentiation.

Every ``Tensor`` wraps a numpy array.  Operations on tensors that require
gradients record a node on an implicit tape: the node keeps its parents and a
closure mapping the output cotangent to one cotangent per parent.  Nodes get a
monotonically increasing ``tape_id`` at creation, so parents always precede
children and sorting reachable nodes by descending id is a reverse topological
order.  ``backward`` visits each reachable node exactly once in that order.

Reductions use numpy's pairwise summation along the reduced axis; the order is
a function of the shapes only, so repeated forward passes are bit-identical.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import DegenerateMaskError, EncodingError, RankError, ShapeError

_ids = itertools.count()
_state = threading.local()

FLOAT_TYPES = (np.float32, np.float64)


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype.type not in FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        if self.data.dtype.type not in FLOAT_TYPES:
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = next(_ids) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return _unary(self, self.data.astype(dtype), lambda g: g.astype(self.dtype))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
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
        return _unary(self, -self.data, lambda g: -g)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return _unary(self, x**exponent, lambda g: g * exponent * x ** (exponent - 1))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- shape and reductions -------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _node(data, parents, backward_fn):
    """Create an op output, recording it on the tape when any parent needs it."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_id = next(_ids)
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unary(x, data, grad_fn):
    return _node(data, (x,), lambda g: (grad_fn(g),))


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _reduce(operand, g, local=None):
    """Cotangent for one operand of a broadcasting binary op; skipped for constants."""
    if not operand.requires_grad:
        return None
    return unbroadcast(g if local is None else local(g), operand.shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_reduce(a, g), _reduce(b, g)))


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_reduce(a, g), _reduce(b, g, lambda g: -g)))


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    x, y = a.data, b.data
    return _node(x * y, (a, b),
                 lambda g: (_reduce(a, g, lambda g: g * y), _reduce(b, g, lambda g: g * x)))


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    x, y = a.data, b.data
    out = x / y
    return _node(out, (a, b),
                 lambda g: (_reduce(a, g, lambda g: g / y), _reduce(b, g, lambda g: -g * out / y)))


def exp(x):
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def log(x):
    data = x.data
    return _unary(x, np.log(data), lambda g: g / data)


def tanh(x):
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: g * (1 - out * out))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU, tanh approximation."""
    v = x.data
    c = v.dtype.type(_GELU_C)
    inner = c * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1 + t)

    def grad(g):
        dinner = c * (1 + 3 * 0.044715 * v * v)
        return g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * dinner)

    return _unary(x, out, grad)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    x, y = a.data, b.data

    if y.ndim == 2 and x.ndim > 2:
        # activations times a weight matrix: one flat GEMM each way
        k, n = y.shape
        flat = x.reshape(-1, k)

        def grad_flat(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ y.T).reshape(x.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node((flat @ y).reshape(x.shape[:-1] + (n,)), (a, b), grad_flat)

    def grad(g):
        ga = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(x, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return _node(x @ y, (a, b), grad)


def reshape(x, shape):
    src = x.shape
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(src))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _unary(x, np.transpose(x.data, axes), lambda g: np.transpose(g, inverse))


def swapaxes(x, a1, a2):
    return _unary(x, np.swapaxes(x.data, a1, a2), lambda g: np.swapaxes(g, a1, a2))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def getitem(x, index):
    src_shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def grad(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return out

    return _unary(x, x.data[index], grad)


def concatenate(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, grad)


def broadcast_to(x, shape):
    src = x.shape
    return _unary(x, np.broadcast_to(x.data, shape).copy(), lambda g: unbroadcast(g, src))


def tsum(x, axis=None, keepdims=False):
    src = x.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, src).copy()

    return _unary(x, np.sum(x.data, axis=axis, keepdims=keepdims), grad)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# normalisation, softmax, losses
# ---------------------------------------------------------------------------


def softmax_masked(logits, mask=None, axis=-1):
    """Softmax along ``axis`` with masked slots forced to exactly zero.

    ``mask`` is a boolean array broadcastable to ``logits``; True marks a
    position that may receive weight.  Masking is additive -inf before the
    exponential, then the masked slots are overwritten with 0.
    """
    logits = _lift(logits)
    z = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise DegenerateMaskError("softmax row has no unmasked position")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _unary(logits, out, grad)


def softmax(logits, axis=-1):
    return softmax_masked(logits, None, axis)


def log_softmax(logits, axis=-1):
    z = logits.data
    shifted = z - z.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _unary(logits, out, grad)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance, then apply gain and bias."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(v.ndim - 1))

    def grad(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out.astype(v.dtype, copy=False), (x, gain, bias), grad)


def check_one_hot(targets):
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    ok = np.isin(t, (0, 1)).all() and (t.sum(axis=-1) == 1).all()
    if not ok:
        raise EncodingError("target rows must be one-hot")


def cross_entropy_from_logits(logits, targets):
    """Mean over rows of -log softmax(logits) at the one-hot target."""
    check_one_hot(targets)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = max(1, int(np.prod(z.shape[:-1])))
    loss = -(t * logp).sum() / rows

    def grad(g):
        return (g / rows) * (np.exp(logp) - t)

    return _unary(logits, np.asarray(loss, dtype=z.dtype), grad)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def topological_order(root):
    """Reachable recorded nodes, parents before children."""
    seen = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack_.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n.tape_id)


def backward(loss):
    """Back-propagate from a scalar; returns {leaf tensor: gradient} and sets ``.grad`` on leaves."""
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RankError("loss is not on a tape (no input requires grad)")
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g
            leaves[node] = g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def numeric_gradient(fn, arrays, index, step=1e-4):
    """Central finite-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    flat, gflat = target.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(*base))
        flat[i] = orig - step
        lo = float(fn(*base))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return out


def relative_error(a, b, floor=1e-3):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor).

    The floor keeps gradients that vanish analytically (for instance a bias
    added before a shift-invariant softmax) from turning rounding noise into
    an O(1) ratio.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, arrays, step=1e-4):
    """Compare tape gradients of a scalar function against central differences.

    ``fn`` receives Tensors and returns a scalar Tensor.  All inputs are
    promoted to 64-bit.  Returns the worst norm-wise relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*inputs)
    backward(out)

    def scalar(*arrs):
        with no_grad():
            return fn(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(inputs):
        num = numeric_gradient(scalar, arrays, i, step)
        worst = max(worst, relative_error(t.grad, num))
    return worst
