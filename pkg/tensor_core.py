"""Dense numpy arrays with reverse-mode automatic differentiation.

Every primitive applied to an input that requires a gradient appends one record
(output, inputs, backward rule) to the calling thread's tape. ``backward`` replays
the tape in reverse record order and clears it.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

from errors import (ConfigError, ContractError, DimensionError, EmptyLossError,
                    OracleInvalidError, TokenIndexError)

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

GELU_C = np.sqrt(2.0 / np.pi)


def set_precision(name):
    """Select the floating type used for new tensors ("float32" or "float64")"""
    global _default_dtype
    if name not in PRECISIONS:
        raise ConfigError(f"unknown precision '{name}', expected one of {sorted(PRECISIONS)}")
    _default_dtype = PRECISIONS[name]


def get_dtype():
    return _default_dtype


class ComputationTape:
    """Ordered record of primitive applications on one thread"""

    def __init__(self):
        self.records = []

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))

    def clear(self):
        self.records = []

    def __len__(self):
        return len(self.records)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = ComputationTape()
        self.grad_enabled = True


_state = _ThreadState()


def current_tape():
    return _state.tape


def is_grad_enabled():
    return _state.grad_enabled


@contextmanager
def no_grad():
    """Run a block without recording anything on the tape"""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A float array that may take part in automatic differentiation"""

    # numpy defers to our reflected operators for ndarray <op> Tensor
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _default_dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def retain_grad(self):
        """Keep this intermediate tensor's gradient after backward"""
        self._retain = True
        return self

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # Arithmetic
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # Shape and reductions
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, inputs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs_grad
    out._is_leaf = not needs_grad
    if needs_grad:
        _state.tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# Elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a, low, high):
    """Clip values to [low, high]; gradient passes only inside the interval"""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def gelu(x):
    """GELU, tanh approximation"""
    x = as_tensor(x)
    cube = 0.044715 * x.data ** 3
    t = np.tanh(GELU_C * (x.data + cube))
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(out, (x,), backward)


# Linear algebra and shape

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def embedding_lookup(table, ids):
    """Rows of ``table`` at integer ``ids``; only looked-up rows receive gradient"""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenIndexError(f"id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward)


def index_select(x, index):
    """Gather rows of ``x`` (axis 0) at ``index``"""
    return embedding_lookup(x, index)


def scatter_by_index(dest, src, index):
    """Copy of ``dest`` with row ``index[i]`` replaced by row ``i`` of ``src``"""
    dest, src = as_tensor(dest), as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if src.shape[0] != index.shape[0] or src.shape[1:] != dest.shape[1:]:
        raise DimensionError("scatter_by_index", dest.shape, src.shape)
    if index.size:
        if index.min() < 0 or index.max() >= dest.shape[0]:
            raise TokenIndexError(f"scatter index out of range [0, {dest.shape[0]})")
        if np.unique(index).size != index.size:
            raise ContractError("scatter_by_index: positions must be distinct")
    out = dest.data.copy()
    out[index] = src.data

    def backward(g):
        g_dest = g.copy()
        g_dest[index] = 0.0
        return g_dest, g[index]

    return _result(out, (dest, src), backward)


# Normalization and probabilities

def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias"""
    x = as_tensor(x)
    inputs = [x]
    if gain is not None:
        gain = as_tensor(gain)
        inputs.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        inputs.append(bias)
    width = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g_xhat = g * gain.data if gain is not None else g
        gx = (inv / width) * (width * g_xhat
                              - g_xhat.sum(axis=-1, keepdims=True)
                              - xhat * (g_xhat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _result(out, tuple(inputs), backward)


# Losses

def cross_entropy_masked(logits, targets, mask):
    """Mean negative log-likelihood over the positions where ``mask`` is true"""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy_masked: every position is masked out")
    targets = np.where(mask, np.asarray(targets, dtype=np.int64), 0)
    if targets.max() >= logits.shape[-1] or targets.min() < 0:
        raise TokenIndexError(f"target id out of range [0, {logits.shape[-1]})")
    rows = np.arange(logits.shape[0])
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -(logp[rows, targets] * mask).sum() / count

    def backward(g):
        probs = np.exp(logp)
        probs[rows, targets] -= 1.0
        probs *= (mask / count)[:, None]
        return (probs * g,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse_loss(pred, target, mask=None):
    """Mean squared error; ``mask`` (broadcastable to pred) restricts the mean"""
    diff = as_tensor(pred) - as_tensor(target)
    sq = diff * diff
    if mask is None:
        return sq.mean()
    mask = np.broadcast_to(np.asarray(mask, dtype=sq.dtype), sq.shape)
    return (sq * mask).sum() * (1.0 / max(float(mask.sum()), 1.0))


def smooth_l1_loss(pred, target, mask=None, beta=1.0):
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    absd = np.abs(diff)
    quad = absd < beta
    elem = np.where(quad, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    weights = np.ones_like(diff) if mask is None else np.broadcast_to(np.asarray(mask, dtype=diff.dtype), diff.shape)
    count = max(float(weights.sum()), 1.0)

    def backward(g):
        d = np.where(quad, diff / beta, np.sign(diff)) * weights * (g / count)
        return d, -d

    return _result(np.asarray((elem * weights).sum() / count, dtype=diff.dtype), (pred, target), backward)


# Driving backward

def _accumulate(tensor, grad):
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = np.array(grad, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def backward(root):
    """Fill ``grad`` of every requires_grad tensor reachable from scalar ``root``"""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = _state.tape
    if not root.requires_grad:
        tape.clear()
        return
    root.grad = np.ones_like(root.data)
    for out, inputs, backward_fn in reversed(tape.records):
        if out.grad is None:
            continue
        for tensor, grad in zip(inputs, backward_fn(out.grad)):
            if grad is None or not tensor.requires_grad:
                continue
            _accumulate(tensor, grad)
        if out is not root and not getattr(out, "_retain", False):
            out.grad = None
    tape.clear()


def grad_check(f, params, h=1e-5, floor=1e-5, max_coords=None, seed=0):
    """Largest relative error between autodiff and central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    ``max_coords`` limits the coordinates probed per parameter (sampled with ``seed``).
    """
    for p in params:
        p.grad = None
    _state.tape.clear()
    loss = f()
    reference = float(loss.data)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        if float(f().data) != reference:
            raise OracleInvalidError("function under test is not deterministic")
        for p, grad in zip(params, analytic):
            coords = list(np.ndindex(p.shape))
            if max_coords is not None and len(coords) > max_coords:
                picks = rng.choice(len(coords), size=max_coords, replace=False)
                coords = [coords[i] for i in sorted(picks)]
            for idx in coords:
                original = p.data[idx]
                p.data[idx] = original + h
                plus = float(f().data)
                p.data[idx] = original - h
                minus = float(f().data)
                p.data[idx] = original
                numeric = (plus - minus) / (2.0 * h)
                err = abs(numeric - grad[idx]) / max(abs(numeric), abs(grad[idx]), floor)
                worst = max(worst, err)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
