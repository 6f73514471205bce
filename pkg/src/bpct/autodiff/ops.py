"""Differentiable primitives over Tensor.

Every op validates input shapes (raising ShapeError naming the op and the
offending dimensions), computes the forward pass with numpy, and attaches a
Node whose backward closure maps the output gradient to input gradients.
Ops never mutate their inputs.

Convolutions are vectorized through sliding windows + matmul; upsampling is
expressed with exact separable interpolation matrices so the backward pass
is their transpose. The loop-based reference implementations live in the
test suite.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import Node, Tensor


class ShapeError(ValueError):
    """Input shapes invalid for the requested op."""


def _make(kind, data, inputs, backward_fn):
    req = any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=req, node=Node(kind, inputs, backward_fn))


def _need(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def _need_tensor(t, op, name):
    _need(isinstance(t, Tensor), op, f"{name} must be a Tensor, got {type(t).__name__}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    _need(a.shape == b.shape, "Add", f"shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return g, g

    return _make("Add", a.data + b.data, (a, b), bwd)


def sub(a, b):
    _need(a.shape == b.shape, "Sub", f"shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return g, -g

    return _make("Sub", a.data - b.data, (a, b), bwd)


def mul_scalar(x, s):
    """x scaled by a single-element tensor (or python number)."""
    if not isinstance(s, Tensor):
        s = Tensor(np.asarray(s, dtype=x.data.dtype))
    _need(s.size == 1, "MulScalar", f"scale must have one element, got shape {s.shape}")
    xd, sval = x.data, s.data.reshape(-1)[0]

    def bwd(g):
        ds = np.asarray(np.sum(g * xd), dtype=s.data.dtype).reshape(s.shape)
        return g * sval, ds

    return _make("MulScalar", xd * sval, (x, s), bwd)


def hadamard(a, b):
    _need(a.shape == b.shape, "HadamardMul", f"shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _make("HadamardMul", ad * bd, (a, b), bwd)


def relu(x):
    xd = x.data

    def bwd(g):
        return (g * (xd > 0),)

    return _make("Relu", np.maximum(xd, 0), (x,), bwd)


def leaky_relu(x, slope=0.2):
    xd = x.data
    pos = xd > 0

    def bwd(g):
        return (g * np.where(pos, 1.0, slope).astype(xd.dtype),)

    return _make("LeakyRelu", np.where(pos, xd, slope * xd), (x,), bwd)


def sigmoid(x):
    xd = x.data
    # Stable two-branch form; naive 1/(1+exp(-x)) overflows for large -x in f32.
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make("Sigmoid", out, (x,), bwd)


def softmax(x, axis=-1):
    _need(-x.ndim <= axis < x.ndim, "Softmax", f"axis {axis} out of range for shape {x.shape}")
    ax = axis % x.ndim
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def bwd(g):
        inner = np.sum(g * out, axis=ax, keepdims=True)
        return (out * (g - inner),)

    return _make("Softmax", out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    _need(a.ndim == 2 and b.ndim == 2, "MatMul", f"need 2-D operands, got {a.shape} @ {b.shape}")
    _need(a.shape[1] == b.shape[0], "MatMul", f"inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _make("MatMul", ad @ bd, (a, b), bwd)


def batched_matmul(a, b):
    _need(a.ndim == 3 and b.ndim == 3, "BatchedMatMul",
          f"need 3-D operands, got {a.shape} @ {b.shape}")
    _need(a.shape[0] == b.shape[0], "BatchedMatMul",
          f"batch dims differ: {a.shape} @ {b.shape}")
    _need(a.shape[2] == b.shape[1], "BatchedMatMul", f"inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _make("BatchedMatMul", ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    _need(int(np.prod(shape, dtype=np.int64)) == x.size, "Reshape",
          f"cannot reshape {x.shape} ({x.size} elems) to {shape}")
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make("Reshape", x.data.reshape(shape), (x,), bwd)


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    _need(sorted(axes) == list(range(x.ndim)), "Permute",
          f"axes {axes} not a permutation for shape {x.shape}")
    inv = tuple(int(a) for a in np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make("Permute", np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    _need(len(tensors) >= 1, "Concat", "needs at least one input")
    for t in tensors:
        _need_tensor(t, "Concat", "input")
    nd = tensors[0].ndim
    _need(-nd <= axis < nd, "Concat", f"axis {axis} out of range for ndim {nd}")
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        same = t.ndim == nd and all(t.shape[i] == ref[i] for i in range(nd) if i != ax)
        _need(same, "Concat", f"off-axis dims differ: {ref} vs {t.shape} (axis {ax})")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _make("Concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd)


# ---------------------------------------------------------------------------
# reductions / losses


def mean(x):
    """Full reduction to a scalar-shaped tensor."""
    xd = x.data
    n = xd.size
    _need(n > 0, "Mean", "cannot reduce an empty tensor")

    def bwd(g):
        return (np.full(xd.shape, float(g) / n, dtype=xd.dtype),)

    return _make("Mean", np.mean(xd), (x,), bwd)


def mse_loss(a, b):
    _need(a.shape == b.shape, "MseLoss", f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    _need(n > 0, "MseLoss", "cannot reduce empty tensors")

    def bwd(g):
        da = (2.0 * float(g) / n) * diff
        return da.astype(a.data.dtype, copy=False), (-da).astype(b.data.dtype, copy=False)

    return _make("MseLoss", np.mean(diff * diff), (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization


def instance_norm(x, eps=1e-5):
    """Per-channel normalization over all trailing (spatial) axes.

    x has layout (C, *spatial); each channel is shifted/scaled to zero mean,
    unit variance. No learnable affine terms here. Needs more than one
    spatial element per channel, otherwise variance degenerates to 0.
    """
    _need(x.ndim >= 2, "InstanceNorm", f"need (C, *spatial), got shape {x.shape}")
    sp_axes = tuple(range(1, x.ndim))
    n = int(np.prod([x.shape[i] for i in sp_axes]))
    _need(n > 1, "InstanceNorm", f"needs >1 spatial element per channel, got shape {x.shape}")
    xd = x.data
    mu = np.mean(xd, axis=sp_axes, keepdims=True)
    var = np.var(xd, axis=sp_axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def bwd(g):
        gm = np.mean(g, axis=sp_axes, keepdims=True)
        gx = np.mean(g * xhat, axis=sp_axes, keepdims=True)
        return ((inv * (g - gm - xhat * gx)).astype(xd.dtype, copy=False),)

    return _make("InstanceNorm", xhat.astype(xd.dtype, copy=False), (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, bias=None, stride=1, pad=0):
    """Cross-correlation, x (Cin,H,W), w (Cout,Cin,kh,kw), bias (Cout,) optional."""
    _need(x.ndim == 3, "Conv2d", f"input must be (Cin,H,W), got {x.shape}")
    _need(w.ndim == 4, "Conv2d", f"weight must be (Cout,Cin,kh,kw), got {w.shape}")
    _need(x.shape[0] == w.shape[1], "Conv2d",
          f"channel mismatch: input {x.shape} vs weight {w.shape}")
    _need(stride >= 1 and pad >= 0, "Conv2d", f"bad stride/pad ({stride}, {pad})")
    cout, cin, kh, kw = w.shape
    _, h, wd = x.shape
    ho, wo = _conv_out_dim(h, kh, stride, pad), _conv_out_dim(wd, kw, stride, pad)
    _need(ho >= 1 and wo >= 1, "Conv2d",
          f"kernel {w.shape[2:]} too large for input {x.shape} with pad {pad}")
    if bias is not None:
        _need(bias.shape == (cout,), "Conv2d",
              f"bias must be ({cout},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    out = (w.data.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    wd_arr = w.data

    def bwd(g):
        g2 = g.reshape(cout, -1)
        dw = (g2 @ cols.T).reshape(wd_arr.shape)
        gpad = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                contrib = np.tensordot(wd_arr[:, :, ki, kj], g, axes=(0, 0))
                gpad[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += contrib
        dx = gpad[:, pad:pad + h, pad:pad + wd] if pad else gpad
        if bias is not None:
            return dx, dw, g.sum(axis=(1, 2))
        return dx, dw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("Conv2d", out, inputs, bwd)


def conv3d(x, w, bias=None, stride=1, pad=0):
    """Cross-correlation, x (Cin,D,H,W), w (Cout,Cin,kd,kh,kw), bias (Cout,) optional."""
    _need(x.ndim == 4, "Conv3d", f"input must be (Cin,D,H,W), got {x.shape}")
    _need(w.ndim == 5, "Conv3d", f"weight must be (Cout,Cin,kd,kh,kw), got {w.shape}")
    _need(x.shape[0] == w.shape[1], "Conv3d",
          f"channel mismatch: input {x.shape} vs weight {w.shape}")
    _need(stride >= 1 and pad >= 0, "Conv3d", f"bad stride/pad ({stride}, {pad})")
    cout, cin, kd, kh, kw = w.shape
    _, d, h, wd = x.shape
    do = _conv_out_dim(d, kd, stride, pad)
    ho = _conv_out_dim(h, kh, stride, pad)
    wo = _conv_out_dim(wd, kw, stride, pad)
    _need(do >= 1 and ho >= 1 and wo >= 1, "Conv3d",
          f"kernel {w.shape[2:]} too large for input {x.shape} with pad {pad}")
    if bias is not None:
        _need(bias.shape == (cout,), "Conv3d",
              f"bias must be ({cout},), got {bias.shape}")

    if pad:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * kd * kh * kw, do * ho * wo)
    out = (w.data.reshape(cout, -1) @ cols).reshape(cout, do, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None, None]

    wd_arr = w.data

    def bwd(g):
        g2 = g.reshape(cout, -1)
        dw = (g2 @ cols.T).reshape(wd_arr.shape)
        gpad = np.zeros_like(xp)
        for ki in range(kd):
            for kj in range(kh):
                for kk in range(kw):
                    contrib = np.tensordot(wd_arr[:, :, ki, kj, kk], g, axes=(0, 0))
                    gpad[:,
                         ki:ki + stride * do:stride,
                         kj:kj + stride * ho:stride,
                         kk:kk + stride * wo:stride] += contrib
        dx = gpad[:, pad:pad + d, pad:pad + h, pad:pad + wd] if pad else gpad
        if bias is not None:
            return dx, dw, g.sum(axis=(1, 2, 3))
        return dx, dw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("Conv3d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# upsampling


@lru_cache(maxsize=None)
def _interp_matrix(n_in, factor, dtype_name):
    """(n_in*factor, n_in) linear interpolation matrix, half-pixel centers,
    edges clamped. Rows sum to 1 exactly."""
    dtype = np.dtype(dtype_name)
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        lo = int(np.floor(src))
        t = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - t
        m[i, hi_c] += t
    return m


def upsample2d_bilinear(x, factor):
    _need(x.ndim == 3, "Upsample2dBilinear", f"input must be (C,H,W), got {x.shape}")
    _need(int(factor) == factor and factor >= 1, "Upsample2dBilinear",
          f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    _, h, w = x.shape
    dt = x.data.dtype.name
    mh = _interp_matrix(h, factor, dt)
    mw = _interp_matrix(w, factor, dt)
    out = np.einsum("ab,cbd,ed->cae", mh, x.data, mw, optimize=True)

    def bwd(g):
        return (np.einsum("ab,cae,ed->cbd", mh, g, mw, optimize=True),)

    return _make("Upsample2dBilinear", out, (x,), bwd)


def upsample3d_trilinear(x, factor):
    _need(x.ndim == 4, "Upsample3dTrilinear", f"input must be (C,D,H,W), got {x.shape}")
    _need(int(factor) == factor and factor >= 1, "Upsample3dTrilinear",
          f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    _, d, h, w = x.shape
    dt = x.data.dtype.name
    md = _interp_matrix(d, factor, dt)
    mh = _interp_matrix(h, factor, dt)
    mw = _interp_matrix(w, factor, dt)
    out = np.einsum("pd,qh,rw,cdhw->cpqr", md, mh, mw, x.data, optimize=True)

    def bwd(g):
        return (np.einsum("pd,qh,rw,cpqr->cdhw", md, mh, mw, g, optimize=True),)

    return _make("Upsample3dTrilinear", out, (x,), bwd)


# ---------------------------------------------------------------------------
# uniform dispatcher

OP_TABLE = {
    "Add": lambda ts, **p: add(*ts, **p),
    "Sub": lambda ts, **p: sub(*ts, **p),
    "MulScalar": lambda ts, **p: mul_scalar(*ts, **p),
    "HadamardMul": lambda ts, **p: hadamard(*ts, **p),
    "MatMul": lambda ts, **p: matmul(*ts, **p),
    "BatchedMatMul": lambda ts, **p: batched_matmul(*ts, **p),
    "Conv2d": lambda ts, **p: conv2d(*ts, **p),
    "Conv3d": lambda ts, **p: conv3d(*ts, **p),
    "Upsample2dBilinear": lambda ts, **p: upsample2d_bilinear(*ts, **p),
    "Upsample3dTrilinear": lambda ts, **p: upsample3d_trilinear(*ts, **p),
    "Relu": lambda ts, **p: relu(*ts, **p),
    "LeakyRelu": lambda ts, **p: leaky_relu(*ts, **p),
    "Sigmoid": lambda ts, **p: sigmoid(*ts, **p),
    "Softmax": lambda ts, **p: softmax(*ts, **p),
    "InstanceNorm": lambda ts, **p: instance_norm(*ts, **p),
    "Concat": lambda ts, **p: concat(ts, **p),
    "Reshape": lambda ts, **p: reshape(*ts, **p),
    "Permute": lambda ts, **p: permute(*ts, **p),
    "Mean": lambda ts, **p: mean(*ts, **p),
    "MseLoss": lambda ts, **p: mse_loss(*ts, **p),
}


def apply(kind, inputs, **params):
    """Dispatch an op by kind name; inputs is a sequence of Tensors."""
    fn = OP_TABLE.get(kind)
    if fn is None:
        raise KeyError(f"unknown op kind {kind!r}; known: {sorted(OP_TABLE)}")
    return fn(list(inputs), **params)
