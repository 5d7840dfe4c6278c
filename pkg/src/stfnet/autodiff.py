"""Dense-tensor numerics with reverse-mode differentiation.

The kernel set is exactly what the network needs: matmul (batched over
leading axes), pointwise channel convolution, temporal 1-D convolution
(stride / groups / symmetric zero padding), softmax, relu, sigmoid,
elementwise arithmetic with trailing-axis broadcasting, axis reductions,
batch normalization, affine maps, permute/reshape/slice/pad, and a fused
softmax cross-entropy.  Nothing more general is attempted.

Each operation returns a fresh ``Tensor``.  When any input participates in
gradient tracking, the result records its parents and a vector-Jacobian
callback; ``backward`` replays the implicit tape in reverse topological
order and accumulates into ``.grad`` (repeated calls accumulate additively).
The canonical activation layout is N x C x T x V.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

# When enabled, every kernel checks its output for NaN/Inf and raises
# NumericError at the op that produced it. Off by default (costs a pass
# over the data per op).
_CHECK_FINITE = False


def set_check_finite(enabled):
    """Toggle NaN/Inf detection on every kernel output. Returns old value."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return old


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses tape recording (forward-only mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._old = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._old
        return False


class Tensor:
    """A dense array plus optional gradient storage and tape linkage.

    ``data`` is always a numpy array.  ``grad`` is allocated lazily by
    ``backward`` (same shape, same dtype).  Tensors are treated as
    immutable once an op has returned them; mutating ``data`` in place
    invalidates any recorded tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf",
                 parents=(), vjp=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._vjp = vjp

    # -- bookkeeping ----------------------------------------------------

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

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.dtype.name}, "
                f"op={self.op!r}, requires_grad={self.requires_grad})")

    # -- operator sugar ---------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def parameter(data, dtype=None):
    """A leaf tensor that participates in gradient accumulation."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _finite_check(arr, op):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op {op!r}")


def _make(data, op, parents, vjp):
    """Assemble an op result, recording tape linkage only when needed."""
    _finite_check(data, op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, vjp=vjp)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy trailing-axis broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if squash:
        grad = grad.sum(axis=squash, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), vjp)


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), vjp)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(out, "mul", (a, b), vjp)


# -- matrix products ---------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading axes are batch axes (numpy semantics)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), vjp)


def graph_mix(x, a):
    """Aggregate the joint axis: out[n,c,t,u] = sum_v a[u,v] * x[n,c,t,v]."""
    x, a = _as_tensor(x), _as_tensor(a)
    if x.ndim != 4 or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"graph_mix expects NCTV x and square a, got {x.shape}, {a.shape}")
    if a.shape[1] != x.shape[3]:
        raise ShapeError(f"graph_mix joint extents differ: {x.shape} vs {a.shape}")
    out = np.einsum("uv,nctv->nctu", a.data, x.data, optimize=True)

    def vjp(g):
        gx = ga = None
        if x.requires_grad:
            gx = np.einsum("uv,nctu->nctv", a.data, g, optimize=True)
        if a.requires_grad:
            ga = np.einsum("nctu,nctv->uv", g, x.data, optimize=True)
        return gx, ga

    return _make(out, "graph_mix", (x, a), vjp)


def affine(x, w, b=None):
    """Fully-connected map: (N, F) @ (F, O) + b."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine shapes incompatible: x{x.shape}, w{w.shape}")
    out = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"affine bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data

        def vjp(g):
            return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

        return _make(out, "affine", (x, w, b), vjp)

    def vjp(g):
        return g @ w.data.T, x.data.T @ g

    return _make(out, "affine", (x, w), vjp)


# -- convolutions -------------------------------------------------------------

def conv1x1(x, w, b=None):
    """Pointwise convolution over the channel axis of an N x C x T x V tensor.

    ``w`` has shape (C_out, C_in); ``b``, when given, (C_out,).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"conv1x1 expects N x C x T x V input, got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1 weight {w.shape} does not match C={x.shape[1]}")
    out = np.einsum("oc,nctv->notv", w.data, x.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1x1 bias shape {b.shape} != ({w.shape[0]},)")
        out += b.data[None, :, None, None]
        parents.append(b)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.einsum("oc,notv->nctv", w.data, g, optimize=True)
        if w.requires_grad:
            gw = np.einsum("notv,nctv->oc", g, x.data, optimize=True)
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _make(out, "conv1x1", tuple(parents), vjp)


def temporal_conv(x, w, b=None, stride=1, groups=1):
    """Grouped 1-D convolution along T with symmetric zero padding.

    ``x`` is N x C_in x T x V, ``w`` is (C_out, C_in // groups, k) with odd k.
    Padding is (k-1)/2 on each side, so stride 1 preserves T and stride s
    yields ceil(T / s) frames.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"temporal_conv expects N x C x T x V input, got {x.shape}")
    if w.ndim != 3:
        raise ShapeError(f"temporal_conv weight must be (C_out, C_in/g, k), got {w.shape}")
    n, c_in, t, v = x.shape
    c_out, c_in_g, k = w.shape
    if k % 2 == 0:
        raise ShapeError(f"temporal kernel must be odd, got {k}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if c_in % groups or c_out % groups or c_in_g != c_in // groups:
        raise ShapeError(
            f"groups={groups} incompatible with C_in={c_in}, C_out={c_out}, "
            f"weight {w.shape}")
    pad = (k - 1) // 2
    o_g = c_out // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    # windows: N x C_in x T_positions x V x k, subsampled by stride
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    t_out = win.shape[2]
    wing = win.reshape(n, groups, c_in_g, t_out, v, k)
    wg = w.data.reshape(groups, o_g, c_in_g, k)
    out = np.einsum("ngctvk,gock->ngotv", wing, wg, optimize=True)
    out = out.reshape(n, c_out, t_out, v)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"temporal_conv bias shape {b.shape} != ({c_out},)")
        out += b.data[None, :, None, None]
        parents.append(b)

    def vjp(g):
        gg = g.reshape(n, groups, o_g, t_out, v)
        gx = gw = None
        if w.requires_grad:
            gw = np.einsum("ngotv,ngctvk->gock", gg, wing, optimize=True)
            gw = gw.reshape(c_out, c_in_g, k)
        if x.requires_grad:
            gxp = np.zeros_like(xp).reshape(n, groups, c_in_g, t + 2 * pad, v)
            for j in range(k):
                # column j of each window maps back to x_pad[j + stride*i]
                contrib = np.einsum("ngotv,goc->ngctv", gg, wg[..., j], optimize=True)
                gxp[:, :, :, j:j + stride * t_out:stride, :] += contrib
            gx = gxp.reshape(n, c_in, t + 2 * pad, v)[:, :, pad:pad + t, :]
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _make(out, "temporal_conv", tuple(parents), vjp)


# -- nonlinearities ----------------------------------------------------------

def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _make(out, "relu", (x,), vjp)


def sigmoid(x):
    x = _as_tensor(x)
    # split by sign for stability at large |x|
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (x,), vjp)


def softmax(x, axis):
    """Normalized exponentials along one axis; rows sum to one."""
    x = _as_tensor(x)
    axis = int(axis)
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (x,), vjp)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), vjp)


def reduce_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy() / count,)

    return _make(out, "mean", (x,), vjp)


# -- shape surgery ------------------------------------------------------------

def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, "reshape", (x,), vjp)


def permute(x, axes):
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for rank {x.ndim}")
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, "permute", (x,), vjp)


def slice_axis(x, axis, start, stop):
    """Contiguous slice [start, stop) along one axis."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    idx = tuple(slice(None) if a != axis else slice(start, stop)
                for a in range(x.ndim))
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _make(out, "slice", (x,), vjp)


def subsample_axis(x, axis, stride):
    """Every stride-th element along one axis (keeps index 0)."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    stride = int(stride)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    idx = tuple(slice(None) if a != axis else slice(None, None, stride)
                for a in range(x.ndim))
    out = x.data[idx].copy()

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _make(out, "subsample", (x,), vjp)


def pad_axis(x, axis, before, after):
    """Zero padding along one axis."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (int(before), int(after))
    out = np.pad(x.data, widths)
    idx = tuple(slice(None) if a != axis else slice(before, before + x.shape[axis])
                for a in range(x.ndim))

    def vjp(g):
        return (g[idx],)

    return _make(out, "pad", (x,), vjp)


# -- batch normalization -------------------------------------------------------

def batch_norm_train(x, scale, shift, eps=1e-5, axes=(0, 2, 3)):
    """Batch statistics normalization with gradients through mean and var.

    Returns ``(out, batch_mean, batch_var)``; the caller owns the running
    statistics update.  ``scale``/``shift`` are 1-D over the channel axis
    (the single axis not listed in ``axes``).
    """
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    axes = _norm_axes(axes, x.ndim)
    (ch_axis,) = tuple(a for a in range(x.ndim) if a not in axes)
    c = x.shape[ch_axis]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm scale/shift must be ({c},)")
    bshape = tuple(c if a == ch_axis else 1 for a in range(x.ndim))

    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = scale.data.reshape(bshape) * xhat + shift.data.reshape(bshape)

    def vjp(g):
        gshift = g.sum(axis=axes)
        gscale = (g * xhat).sum(axis=axes)
        gh = g * scale.data.reshape(bshape)
        gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                    - xhat * np.mean(gh * xhat, axis=axes, keepdims=True))
        return gx, gscale, gshift

    result = _make(out, "batch_norm_train", (x, scale, shift), vjp)
    return result, mean.reshape(c), var.reshape(c)


def batch_norm_eval(x, scale, shift, running_mean, running_var, eps=1e-5,
                    axes=(0, 2, 3)):
    """Frozen-statistics normalization: a pure per-channel affine map."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    axes = _norm_axes(axes, x.ndim)
    (ch_axis,) = tuple(a for a in range(x.ndim) if a not in axes)
    c = x.shape[ch_axis]
    bshape = tuple(c if a == ch_axis else 1 for a in range(x.ndim))
    inv = (1.0 / np.sqrt(np.asarray(running_var, dtype=x.dtype) + eps))
    mean = np.asarray(running_mean, dtype=x.dtype)
    a = (scale.data * inv).reshape(bshape)
    out = a * (x.data - mean.reshape(bshape)) + shift.data.reshape(bshape)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)

    def vjp(g):
        return (g * a,
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes))

    return _make(out, "batch_norm_eval", (x, scale, shift), vjp)


# -- fused loss ---------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the target class.

    ``logits`` is (N, K); ``labels`` an int array of shape (N,).  Computed
    through a max-shifted log-sum-exp; the backward rule is the classic
    (softmax - onehot) / N.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def vjp(g):
        probs = np.exp(z - m)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), labels] -= 1.0
        return (probs * (g / n),)

    return _make(out, "cross_entropy", (logits,), vjp)


# -- the tape walk -------------------------------------------------------------

def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad tensor."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = _topo_order(loss)
    seed = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = seed.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf reached directly (loss itself is a leaf)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node._vjp(g)
        for p, gp in zip(node._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            gp = np.ascontiguousarray(gp, dtype=p.dtype)
            if p._vjp is None:
                # leaf: fold into persistent storage (accumulates across calls)
                p.grad = gp.copy() if p.grad is None else p.grad + gp
            else:
                acc = seed.get(id(p))
                if acc is None:
                    seed[id(p)] = gp.copy()
                else:
                    acc += gp
