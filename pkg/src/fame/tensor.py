"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active, so plain
inference builds no graph.  Every op stores a closure mapping the output
gradient to input gradients; :func:`backward` replays the tape in reverse.

A finite-difference oracle, :func:`finite_diff_check`, lives here as well.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    # -- conveniences -----------------------------------------------------
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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, p):
        return power(self, p)

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

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPES = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside append ``(output, inputs,
    backward_fn)`` entries.  Inputs always precede the op that consumes them.
    """

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.ops)


@contextlib.contextmanager
def no_record():
    """Suspend recording on every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _wrap(data, inputs, backward_fn):
    """Create the output tensor and record the op if anything needs a gradient."""
    out = Tensor(data, dtype=data.dtype)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].ops.append((out, inputs, backward_fn))
    return out


def backward(loss, tape):
    """Back-propagate from a scalar ``loss`` over ``tape``.

    Leaf tensors with ``requires_grad`` get their ``grad`` accumulated and the
    mapping ``{tensor: gradient}`` for those leaves is returned.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves = {}
    for out, inputs, fn in reversed(tape.ops):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        if key in produced:
            continue
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = t.grad
    if loss.requires_grad and id(loss) not in produced:
        loss.grad = np.ones_like(loss.data)
        result[loss] = loss.grad
    return result


# ---------------------------------------------------------------------------
# Kink freezing (used by the finite-difference oracle)
# ---------------------------------------------------------------------------


class _KinkMemo:
    def __init__(self):
        self.records = []
        self.pos = 0
        self.replay = False

    def take(self, compute):
        if self.replay:
            value = self.records[self.pos]
            self.pos += 1
            return value
        value = compute()
        self.records.append(value)
        return value


_KINKS = []


def _kink(compute):
    """Selection pattern for a piecewise op (relu mask, argmax).

    Under :func:`finite_diff_check` the pattern of the base point is replayed
    so that perturbed evaluations stay on the same linear piece.
    """
    if _KINKS:
        return _KINKS[-1].take(compute)
    return compute()


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _wrap(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _wrap(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):
        out = ad / bd
    _check_finite(out, "div")

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * out / bd, bd.shape)
        return ga, gb

    return _wrap(out, (a, b), bw)


def neg(a):
    return _wrap(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    ad = a.data
    with np.errstate(all="ignore"):
        out = ad ** p
    _check_finite(out, "pow")
    return _wrap(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return _wrap(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    with np.errstate(all="ignore"):
        out = np.log(ad)
    _check_finite(out, "log")
    return _wrap(out, (a,), lambda g: (g / ad,))


def sqrt(a):
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)
    _check_finite(out, "sqrt")
    return _wrap(out, (a,), lambda g: (g * 0.5 / out,))


def _check_finite(x, where):
    if not np.isfinite(x).all():
        raise NumericalError(f"non-finite values produced by {where}")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def relu(a):
    ad = a.data
    mask = _kink(lambda: ad > 0)
    return _wrap(ad * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return _wrap(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _wrap(out, (a,), lambda g: (g * out * (1.0 - out),))


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _wrap(out, (a,), bw)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _wrap(out, (a,), bw)


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(a, shape):
    old = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _wrap(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, index):
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _wrap(a.data[index], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _wrap(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _wrap(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw)


def amax(a, axis, keepdims=False):
    """Maximum along one axis; the gradient goes to the first maximum."""
    x = a.data
    arg = _kink(lambda: x.argmax(axis=axis))
    out = np.take_along_axis(x, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(arg, axis), gk, axis=axis)
        return (full,)

    return _wrap(out, (a,), bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _wrap(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation over an ``(N, Cin, H, W)`` batch with zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise DimensionError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output would be {ho}x{wo}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = kernels.im2col(xp, k, stride, ho, wo)  # (N, Cin*k*k, ho*wo)
    wm = w.data.reshape(cout, -1)
    out = np.matmul(wm, cols)  # (N, Cout, ho*wo)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    pshape = xp.shape

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wm.T, g3)
        gx = kernels.col2im(dcols, pshape, k, stride, ho, wo)
        if pad:
            gx = gx[:, :, pad:pad + h, pad:pad + wd]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _wrap(out, inputs, bw if bias is not None else (lambda g: bw(g)[:2]))


def pool2d(x, kind="max", k=2, stride=None):
    """Max or average pooling over ``k x k`` windows."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"pool2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"pool window {k} larger than input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    shape = x.shape
    if kind == "max":
        xd = x.data
        out, idx = _kink(lambda: kernels.maxpool_forward(xd, k, stride, ho, wo))
        if _KINKS:
            out = np.take_along_axis(xd.reshape(n, c, -1), idx.reshape(n, c, -1), axis=2).reshape(n, c, ho, wo)
        return _wrap(out, (x,), lambda g: (kernels.maxpool_backward(g, idx, shape),))
    if kind == "avg":
        xp = x.data
        cols = kernels.im2col(xp.reshape(n * c, 1, h, w), k, stride, ho, wo)
        out = cols.mean(axis=1).reshape(n, c, ho, wo)

        def bw(g):
            gc = np.broadcast_to(g.reshape(n * c, 1, ho * wo) / (k * k), (n * c, k * k, ho * wo))
            return (kernels.col2im(np.ascontiguousarray(gc), (n * c, 1, h, w), k, stride, ho, wo).reshape(shape),)

        return _wrap(out, (x,), bw)
    raise ValueError(f"unknown pool kind {kind!r}")


def global_avg_pool(x):
    """Mean over spatial positions: ``(N, C, H, W) -> (N, C)``."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    shape = x.shape
    return _wrap(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy(),))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _wrap(out, (x, gamma, beta), bw)


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Batch-statistics normalization over axes (0, 2, 3).

    Returns the output tensor plus the batch mean and (biased) variance so the
    caller can update running statistics.
    """
    xd = x.data
    axes = (0, 2, 3)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _wrap(out, (x, gamma, beta), bw), mu.ravel(), var.ravel()


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate == 0``."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return _wrap(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_check(f, params, eps=1e-5, max_coords=64, seed=0, freeze_kinks=True, report=None):
    """Compare tape gradients of a scalar function against central differences.

    ``f`` takes no arguments and returns a scalar :class:`Tensor` computed from
    ``params``.  For tensors with more than ``max_coords`` entries a seeded
    random subset of coordinates is checked.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the maximum over all checked coordinates
    is returned.

    With ``freeze_kinks`` the relu masks and argmax selections of the base
    evaluation are replayed during perturbed evaluations, so the difference
    quotient is taken on the same linear piece the analytic gradient uses.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None

    memo = _KinkMemo()
    if freeze_kinks:
        _KINKS.append(memo)
    try:
        with Tape() as tape:
            loss = f()
        base = float(loss.data)
        if not math.isfinite(base):
            raise NumericalError("finite_diff_check: f is not finite at the base point")
        backward(loss, tape)
        del tape
        memo.replay = True

        def evaluate():
            memo.pos = 0
            with no_record():
                val = float(f().data)
            if not math.isfinite(val):
                raise NumericalError("finite_diff_check: f is not finite at a perturbed point")
            return val

        rng = np.random.default_rng(seed)
        worst = 0.0
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            if flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            else:
                coords = np.arange(flat.size)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = evaluate()
                flat[i] = orig - eps
                fm = evaluate()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(analytic.reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                if report is not None:
                    report.append((p.name, int(i), ana, num, err))
                worst = max(worst, err)
        return worst
    finally:
        if freeze_kinks:
            _KINKS.remove(memo)
