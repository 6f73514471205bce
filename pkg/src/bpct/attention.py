"""Spatial/channel self-attention with a semantic guidance path.

Building blocks over (C, H, W) feature tensors:

* position attention (pam): 1x1-conv query/key at C//reduction channels,
  softmax over the N x N position-affinity matrix, value re-weighting,
  then a gamma-scaled residual: out = gamma * attend(F) + F;
* channel attention (cam): softmax over the C x C channel Gram matrix of
  the flattened features, again gamma-residual;
* multiscale fusion: upsample every scale onto the finest grid, concat,
  then concat the upsampled deepest scale once more as a guidance tail;
* a small conv encoder-decoder ("semantic" path) whose output B modulates
  the attended features position-wise via b_p (b_p^T a_p), and is pulled
  toward the fused features by an auxiliary reconstruction loss.

All gamma gates start at zero, so a freshly initialized block is exactly
the identity on F; training opens the gates gradually.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff.engine import Tensor, default_dtype
from .autodiff.ops import (
    ShapeError,
    add,
    batched_matmul,
    concat,
    conv2d,
    matmul,
    mse_loss,
    mul_scalar,
    permute,
    relu,
    reshape,
    softmax,
    upsample2d_bilinear,
)


def _conv_param(rng, cout, cin, k, name):
    fan_in = cin * k * k
    w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
    dt = default_dtype()
    return (Tensor(w.astype(dt), requires_grad=True, name=f"{name}.w"),
            Tensor(np.zeros(cout, dtype=dt), requires_grad=True, name=f"{name}.b"))


def _gamma(name):
    return Tensor(np.zeros((), dtype=default_dtype()), requires_grad=True, name=name)


@dataclass
class PamParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    gamma: Tensor

    def tensors(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.gamma]


@dataclass
class CamParams:
    gamma: Tensor

    def tensors(self):
        return [self.gamma]


@dataclass
class SemanticParams:
    enc_w: list = field(default_factory=list)
    enc_b: list = field(default_factory=list)
    dec_w: list = field(default_factory=list)
    dec_b: list = field(default_factory=list)

    def tensors(self):
        return [*self.enc_w, *self.enc_b, *self.dec_w, *self.dec_b]


def init_pam(channels, reduction, rng, name="pam"):
    if channels < reduction:
        raise ValueError(f"position attention needs channels >= reduction "
                         f"({channels} < {reduction})")
    cr = channels // reduction
    wq, bq = _conv_param(rng, cr, channels, 1, f"{name}.q")
    wk, bk = _conv_param(rng, cr, channels, 1, f"{name}.k")
    wv, bv = _conv_param(rng, channels, channels, 1, f"{name}.v")
    return PamParams(wq, bq, wk, bk, wv, bv, _gamma(f"{name}.gamma"))


def init_cam(name="cam"):
    return CamParams(_gamma(f"{name}.gamma"))


def _flat(t):
    c, h, w = t.shape
    return reshape(t, (c, h * w))


def pam_transform(f, p):
    """Value tensor re-weighted by position affinities, before the gamma gate."""
    if f.ndim != 3:
        raise ShapeError(f"pam: input must be (C,H,W), got {f.shape}")
    c, h, w = f.shape
    q = _flat(conv2d(f, p.wq, p.bq))                      # (C/r, N)
    k = _flat(conv2d(f, p.wk, p.bk))                      # (C/r, N)
    v = _flat(conv2d(f, p.wv, p.bv))                      # (C, N)
    energy = matmul(permute(q, (1, 0)), k)                # (N, N)
    attn = softmax(energy, axis=1)                        # rows sum to 1
    out = matmul(v, permute(attn, (1, 0)))                # (C, N)
    return reshape(out, (c, h, w))


def pam(f, p):
    return add(mul_scalar(pam_transform(f, p), p.gamma), f)


def cam_transform(f):
    """Channel-Gram re-weighting of the flattened features, pre-gate."""
    if f.ndim != 3:
        raise ShapeError(f"cam: input must be (C,H,W), got {f.shape}")
    c, h, w = f.shape
    ff = _flat(f)                                         # (C, N)
    energy = matmul(ff, permute(ff, (1, 0)))              # (C, C)
    attn = softmax(energy, axis=1)
    return reshape(matmul(attn, ff), (c, h, w))


def cam(f, p):
    return add(mul_scalar(cam_transform(f), p.gamma), f)


def multiscale_fuse(scales):
    """Fuse coarse-to-fine feature maps onto the finest grid.

    scales[0] sets the target spatial size; every other scale is bilinearly
    upsampled to it (its extent must divide the target evenly). The deepest
    scale is appended once more after fusion, so the output has
    sum(C_s) + C_last channels.
    """
    if len(scales) < 2:
        raise ShapeError(f"multiscale_fuse: needs at least two scales, got {len(scales)}")
    for s in scales:
        if s.ndim != 3:
            raise ShapeError(f"multiscale_fuse: scales must be (C,H,W), got {s.shape}")
    h0, w0 = scales[0].shape[1:]
    ups = []
    for s in scales:
        _, h, w = s.shape
        if h0 % h or w0 % w or (h0 // h) != (w0 // w):
            raise ShapeError(f"multiscale_fuse: scale {s.shape} does not divide "
                             f"target ({h0}, {w0}) evenly")
        fct = h0 // h
        ups.append(s if fct == 1 else upsample2d_bilinear(s, fct))
    fused = concat(ups, axis=0) if len(ups) > 1 else ups[0]
    return concat([fused, ups[-1]], axis=0)


def init_semantic(channels, rng, name="sem"):
    """Two stride-2 conv encoder stages, mirrored decoder, all 3x3."""
    c1 = max(channels // 2, 1)
    c2 = max(channels // 4, 1)
    sp = SemanticParams()
    for i, (cin, cout) in enumerate(((channels, c1), (c1, c2))):
        w, b = _conv_param(rng, cout, cin, 3, f"{name}.enc{i}")
        sp.enc_w.append(w)
        sp.enc_b.append(b)
    for i, (cin, cout) in enumerate(((c2, c1), (c1, channels))):
        w, b = _conv_param(rng, cout, cin, 3, f"{name}.dec{i}")
        sp.dec_w.append(w)
        sp.dec_b.append(b)
    return sp


def semantic_forward(f, sp):
    """Encoder-decoder pass returning a tensor shaped like f.

    Decoder upsample factors are derived from the sizes the encoder
    actually produced, so odd or tiny extents round-trip correctly.
    """
    sizes = [f.shape[1:]]
    x = f
    for w, b in zip(sp.enc_w, sp.enc_b):
        x = relu(conv2d(x, w, b, stride=2, pad=1))
        sizes.append(x.shape[1:])
    for i, (w, b) in enumerate(zip(sp.dec_w, sp.dec_b)):
        target = sizes[len(sizes) - 2 - i]
        cur = x.shape[1:]
        if target[0] % cur[0] or target[1] % cur[1]:
            raise ShapeError(f"semantic decoder cannot reach {target} from {cur}")
        fct = target[0] // cur[0]
        if fct != target[1] // cur[1]:
            raise ShapeError(f"semantic decoder needs isotropic growth, "
                             f"{cur} -> {target}")
        if fct > 1:
            x = upsample2d_bilinear(x, fct)
        x = conv2d(x, w, b, stride=1, pad=1)
        if i < len(sp.dec_w) - 1:
            x = relu(x)
    return x


class GuidedAttention:
    """Two attention passes around a semantic guidance path.

    Pass 1 applies pam then cam to F (gamma-residual each), giving A. The
    semantic path produces B from F. Their position-wise contraction
    b_p (b_p^T a_p) forms the guidance tensor; pass 2 adds its pam/cam
    transforms onto A through fresh gamma gates, so with every gamma at
    zero the whole block returns F unchanged.
    """

    def __init__(self, channels, reduction=8, lambda_rec=0.1, rng=None, name="attn"):
        if rng is None:
            rng = np.random.default_rng(0)
        self.channels = channels
        self.reduction = reduction
        self.lambda_rec = float(lambda_rec)
        self.pam1 = init_pam(channels, reduction, rng, f"{name}.pam1")
        self.cam1 = init_cam(f"{name}.cam1")
        self.pam2 = init_pam(channels, reduction, rng, f"{name}.pam2")
        self.cam2 = init_cam(f"{name}.cam2")
        self.sem = init_semantic(channels, rng, f"{name}.sem")

    def tensors(self):
        return (self.pam1.tensors() + self.cam1.tensors()
                + self.pam2.tensors() + self.cam2.tensors() + self.sem.tensors())


def _positionwise_modulate(a, b):
    """Per position p: b_p * (b_p^T a_p), batched over the N positions."""
    c, h, w = a.shape
    n = h * w
    ab = reshape(permute(reshape(a, (c, n)), (1, 0)), (n, c, 1))
    bb = reshape(permute(reshape(b, (c, n)), (1, 0)), (n, c, 1))
    dot = batched_matmul(permute(bb, (0, 2, 1)), ab)      # (N, 1, 1)
    mod = batched_matmul(bb, dot)                         # (N, C, 1)
    return reshape(permute(reshape(mod, (n, c)), (1, 0)), (c, h, w))


def guided_forward(block, f):
    """Returns (F_SA, recon_loss).

    recon_loss is the semantic path's MSE against the (detached) fused
    features, already scaled by lambda_rec; it trains only the semantic
    convs, not the features.
    """
    if f.ndim != 3:
        raise ShapeError(f"guided_forward: input must be (C,H,W), got {f.shape}")
    if f.shape[0] != block.channels:
        raise ShapeError(f"guided_forward: block built for C={block.channels}, "
                         f"input has C={f.shape[0]}")
    a = cam(pam(f, block.pam1), block.cam1)
    b = semantic_forward(f, block.sem)
    recon = mul_scalar(mse_loss(b, f.detach()), block.lambda_rec)

    guided = _positionwise_modulate(a, b)
    p2 = add(mul_scalar(pam_transform(guided, block.pam2), block.pam2.gamma), a)
    f_sa = add(mul_scalar(cam_transform(p2), block.cam2.gamma), p2)
    return f_sa, recon


def gradcheck_cases():
    """Composed finite-difference cases for this module.

    The semantic reconstruction term stops gradients at its target, so it
    gets its own case with the target frozen; perturbing the block input
    under the full loss would make central differences see a dependency
    the analytic gradient correctly ignores.
    """
    from .autodiff.ops import hadamard, mean  # local: keeps module surface tidy

    def open_gammas(blk, rng):
        for t in blk.tensors():
            if t.name and t.name.endswith("gamma"):
                t.data = np.asarray(rng.standard_normal(()) * 0.5)

    def jitter_biases(sp, rng):
        # zero-init biases can leave relu preactivations exactly on the
        # kink (dead upstream channel), where central differences are
        # undefined; nudge them to generic values
        for b in sp.enc_b + sp.dec_b:
            b.data = b.data + 0.05 * rng.standard_normal(b.shape)

    def b_pam(rng):
        p = init_pam(8, 8, rng)
        p.gamma.data = np.asarray(0.6)
        x = Tensor(rng.standard_normal((8, 3, 3)), requires_grad=True, name="x")
        c = Tensor(rng.standard_normal((8, 3, 3)))
        return (lambda: mean(hadamard(pam(x, p), c))), [x] + p.tensors()

    def b_cam(rng):
        p = init_cam()
        p.gamma.data = np.asarray(-0.5)
        x = Tensor(rng.standard_normal((8, 3, 3)), requires_grad=True, name="x")
        c = Tensor(rng.standard_normal((8, 3, 3)))
        return (lambda: mean(hadamard(cam(x, p), c))), [x, p.gamma]

    def b_guided(rng):
        blk = GuidedAttention(channels=8, reduction=8, rng=rng)
        open_gammas(blk, rng)
        jitter_biases(blk.sem, rng)
        f = Tensor(rng.standard_normal((8, 4, 4)), requires_grad=True, name="f")
        c = Tensor(rng.standard_normal((8, 4, 4)))
        return (lambda: mean(hadamard(guided_forward(blk, f)[0], c))), [f] + blk.tensors()

    def b_recon(rng):
        blk = GuidedAttention(channels=8, reduction=8, rng=rng)
        jitter_biases(blk.sem, rng)
        f = Tensor(rng.standard_normal((8, 4, 4)), requires_grad=True, name="f")
        target = Tensor(f.data.copy())
        return (lambda: mse_loss(semantic_forward(f, blk.sem), target)), blk.sem.tensors()

    return [
        ("PositionAttention", b_pam),
        ("ChannelAttention", b_cam),
        ("GuidedBlock", b_guided),
        ("SemanticRecon", b_recon),
    ]
