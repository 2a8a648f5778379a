"""Dense float64 tensors with reverse-mode differentiation.

Only what the encoder, the distillation losses and the LSTM controller need
is implemented. Every op records a closure mapping the output gradient to the
input gradients; ``Tensor.backward`` walks the graph in reverse topological
order.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .exceptions import ConfigurationError, ContractViolation, NumericError, ShapeError

CE_FLOOR = 1e-12
LN_EPS = 1e-12

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.array(grad, dtype=np.float64) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g.copy() if parent.grad is None else parent.grad + g

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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent):
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b):
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(count)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, idx):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def embedding(weight, ids):
    """Row gather ``weight[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    cdf = ndtr(a.data)

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + a.data * pdf),)

    return _make(a.data * cdf, (a,), backward)


def silu(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


ACTIVATIONS = {"gelu": gelu, "relu": relu, "silu": silu}


def activation(kind, x):
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


def softmax_rows(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv_std * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _make(out, (x, gamma, beta), backward)


def mse(pred, target):
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = g * 2.0 * diff / n
        return (gp, -gp)

    return _make(np.float64((diff * diff).sum() / n), (pred, target), backward)


def _check_stochastic(name, arr, tol=1e-9):
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > tol):
        raise ContractViolation(f"{name} rows must be non-negative and sum to 1 (tol {tol})")


def row_cross_entropy(target_dist, pred_dist, floor=CE_FLOOR):
    """Mean over rows of ``-sum(target * log(pred + floor))``."""
    target_dist, pred_dist = as_tensor(target_dist), as_tensor(pred_dist)
    if target_dist.shape != pred_dist.shape:
        raise ShapeError(f"cross-entropy shape mismatch: {target_dist.shape} vs {pred_dist.shape}")
    _check_stochastic("target_dist", target_dist.data)
    _check_stochastic("pred_dist", pred_dist.data)
    per_row = -(target_dist * log(pred_dist + floor)).sum(axis=-1)
    return per_row.mean()


def cross_entropy_logits(logits, targets, weights=None):
    """Token-level cross entropy from unnormalised logits (last axis = classes)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    w = np.ones(t.shape) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        return Tensor(0.0)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(w * logp[np.arange(t.size), t]).sum() / total

    def backward(g):
        p = np.exp(logp)
        p[np.arange(t.size), t] -= 1.0
        return ((g * p * (w / total)[:, None]).reshape(logits.shape),)

    return _make(np.float64(loss), (logits,), backward)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tolerance: float
    passed: bool
    worst: tuple = field(default=())


def grad_check(f, params, h=1e-5, tolerance=1e-4, abs_floor=1e-6, max_entries=None, seed=0):
    """Compare analytic gradients with central finite differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    The relative error of an entry is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``max_entries`` caps how many coordinates per parameter are probed.
    """
    params = list(params.values()) if isinstance(params, dict) else list(params)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, n_checked, worst = 0.0, 0.0, 0, ()
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat_idx = np.arange(p.data.size)
        if max_entries is not None and flat_idx.size > max_entries:
            flat_idx = rng.choice(flat_idx, size=max_entries, replace=False)
        view = p.data.reshape(-1)
        for i in flat_idx:
            orig = view[i]
            with no_grad():
                view[i] = orig + h
                fp = float(f().data)
                view[i] = orig - h
                fm = float(f().data)
            view[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), abs_floor)
            n_checked += 1
            worst_abs = max(worst_abs, abs_err)
            if rel > worst_rel:
                worst_rel, worst = rel, (k, int(i), a, numeric)
    return GradCheckReport(worst_rel, worst_abs, n_checked, tolerance, worst_rel < tolerance, worst)
