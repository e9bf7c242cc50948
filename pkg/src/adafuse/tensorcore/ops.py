"""Differentiable primitives.

Every op takes Tensors (or array-likes, promoted to constants), validates
shapes, computes its value eagerly with numpy and attaches a backward rule.
"""
from __future__ import annotations

import warnings

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor


# Branch decisions (ReLU on/off, argmax positions, clip ranges) of the ops run
# while recording is active. Finite-difference checks compare these to detect
# stencils that straddle a non-differentiable point.
_branches = None


class record_branches:
    def __enter__(self):
        global _branches
        self._prev = _branches
        _branches = []
        return _branches

    def __exit__(self, *exc):
        global _branches
        _branches = self._prev
        return False


def _note(arr):
    if _branches is not None:
        _branches.append(arr)


def _node(data, parents, grad_fn, op):
    return Tensor(data, parents=parents, grad_fn=grad_fn, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), grad_fn, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    _note(on)
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _note(inside)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def detach(x) -> Tensor:
    """Constant copy of ``x``; gradients stop here."""
    return Tensor(np.array(as_tensor(x).data), requires_grad=False, op="detach")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims incompatible, {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), grad_fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (any leading shape)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out.reshape(*lead, weight.shape[1]), tuple(parents), grad_fn, "linear")


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].ndim
    ax = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(x.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), grad_fn, "concat")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), grad_fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _expand_mask(op, x, mask, axis):
    mask = np.asarray(mask, dtype=bool)
    while mask.ndim < x.ndim:
        mask = mask[..., None]
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"{op}: mask {mask.shape} does not fit input {x.shape}") from None
    if not np.all(mask.any(axis=axis)):
        raise ValueError(f"{op}: a slice has no valid positions along axis {axis}")
    return mask


def masked_max(x, mask=None, axis: int = -2) -> Tensor:
    """Max over ``axis`` restricted to positions where ``mask`` is True.

    ``mask`` has the leading shape of ``x`` up to and including ``axis``;
    trailing axes are broadcast.
    """
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    m = _expand_mask("masked_max", x, mask, axis)
    filled = np.where(m, x.data, -np.inf)
    idx = np.expand_dims(np.argmax(filled, axis=axis), axis)
    _note(idx)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(np.squeeze(out, axis=axis), (x,), grad_fn, "masked_max")


def masked_mean(x, mask=None, axis: int = -2) -> Tensor:
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    m = _expand_mask("masked_mean", x, mask, axis).astype(DTYPE)
    count = m.sum(axis=axis)
    out = (x.data * m).sum(axis=axis) / count

    def grad_fn(g):
        return (np.expand_dims(g / count, axis) * m,)

    return _node(out, (x,), grad_fn, "masked_mean")


# ---------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; masked-out entries get exactly zero weight."""
    x = as_tensor(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(m.any(axis=axis)):
            raise ValueError("softmax: a row is fully masked")
        filled = np.where(m, x.data, -np.inf)
        shifted = np.where(m, x.data - filled.max(axis=axis, keepdims=True), 0.0)
        e = np.where(m, np.exp(shifted), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), grad_fn, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn, "layer_norm")


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               mask=None, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature normalisation over every axis but the last.

    In training mode statistics come from the positions where ``mask`` is
    True and the running buffers are updated in place; in eval mode the
    running buffers are used and the map is affine.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,) or running_mean.shape != (d,):
        raise ShapeError(f"batch_norm: params do not match feature dim {d}")
    lead = tuple(range(x.ndim - 1))

    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv

        def grad_fn(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return _node(xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn, "batch_norm")

    if mask is None:
        m = np.ones(x.shape[:-1] + (1,), dtype=DTYPE)
    else:
        m = np.asarray(mask, dtype=DTYPE).reshape(x.shape[:-1] + (1,))
    n = m.sum()
    if n < 1:
        raise ValueError("batch_norm: no valid positions")
    mu = (x.data * m).sum(axis=lead) / n
    xc = x.data - mu
    var = (xc * xc * m).sum(axis=lead) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    unbiased = var * n / (n - 1) if n > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def grad_fn(g):
        gh = g * gamma.data
        d_mu = -(gh * inv).sum(axis=lead)
        d_var = -0.5 * (gh * xc).sum(axis=lead) * inv ** 3
        gx = gh * inv + m * (d_mu / n + 2.0 * xc * d_var / n)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn, "batch_norm")


def dropout(x, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- similarity / norms

def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``. A zero vector has similarity 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    zero = (na == 0) | (nb == 0)
    _note(zero)
    if np.any(zero):
        warnings.warn("cosine_similarity: zero vector, similarity taken as 0", RuntimeWarning,
                      stacklevel=2)
    na_s = np.where(zero, 1.0, na)
    nb_s = np.where(zero, 1.0, nb)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = np.where(zero, 0.0, dot / (na_s * nb_s))

    def grad_fn(g):
        g = np.where(zero, 0.0, np.expand_dims(g, axis))
        ga = g * (b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s))
        gb = g * (a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s))
        return ga, gb

    return _node(np.squeeze(cos, axis=axis), (a, b), grad_fn, "cosine_similarity")


def sum_squares(x) -> Tensor:
    x = as_tensor(x)
    return _node((x.data * x.data).sum(), (x,), lambda g: (2.0 * g * x.data,), "sum_squares")


def frobenius_norm(x) -> Tensor:
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum())

    def grad_fn(g):
        if n == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / n,)

    return _node(n, (x,), grad_fn, "frobenius_norm")
