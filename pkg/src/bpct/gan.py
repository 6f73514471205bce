"""Two-branch reconstruction generators, a 3D patch discriminator, losses,
and model checkpointing.

Both generators share the same outer contract: consume a frontal and a
lateral projection image of an n^3 volume and emit a (1, n, n, n) tensor of
voxel values in (0, 1), plus an aux dict with their variant-specific loss
terms. Per branch, 2D features are folded into a 3D grid by the channel
lift; the lateral branch works in its own (c, width, height, depth) frame
and is permuted onto volume (c, depth, height, width) axes before the
branches merge.

The guided-attention variant runs a 4-stage stride-2 encoder, fuses the two
deepest scales, passes them through the attention block, lifts at n/8, and
decodes with three upsample-conv stages fed by broadcast 2D skips. The
baseline variant is identical with the attention block removed. The
vector-quantized variant encodes to an (embed_dim, n/8, n/8) grid, snaps it
to the codebook, refines per branch in 3D, fuses, and shares the same three
upsample-conv tail.

Training losses: LSGAN with targets (real, fake, gen) = (1, 0, 1), voxel
MSE, projection-consistency MSE through the differentiable projector, and
a perceptual distance computed by a small frozen random conv stack on
evenly spaced axial slices.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from . import attention as att
from .autodiff.engine import Tensor, default_dtype
from .autodiff.ops import (
    ShapeError,
    add,
    concat,
    conv2d,
    conv3d,
    instance_norm,
    leaky_relu,
    matmul,
    mse_loss,
    mul_scalar,
    permute,
    relu,
    reshape,
    sigmoid,
    upsample3d_trilinear,
)
from .projector import ProjectionModel, project_tensor
from .volcore import BadMagicError, DrrImage, FormatError, TruncatedError, View
from .vqbridge import Codebook, fuse_branches, lift_2d_to_3d, quantize, straight_through

CHECKPOINT_MAGIC = b"BPCT-CKPT1"


class ParamStore:
    """Named learnable tensors in deterministic registration order."""

    def __init__(self):
        self._items = []
        self._names = set()

    def add(self, name, data):
        if name in self._names:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)
        self._items.append(t)
        self._names.add(name)
        return t

    def adopt(self, tensors):
        for t in tensors:
            if not t.name:
                raise ValueError("adopted parameters must be named")
            if t.name in self._names:
                raise ValueError(f"duplicate parameter name {t.name!r}")
            self._items.append(t)
            self._names.add(t.name)

    def conv2d_param(self, name, cout, cin, k, rng):
        fan_in = cin * k * k
        w = self.add(f"{name}.w", rng.standard_normal((cout, cin, k, k))
                     * np.sqrt(2.0 / fan_in))
        b = self.add(f"{name}.b", np.zeros(cout))
        return w, b

    def conv3d_param(self, name, cout, cin, k, rng):
        fan_in = cin * k * k * k
        w = self.add(f"{name}.w", rng.standard_normal((cout, cin, k, k, k))
                     * np.sqrt(2.0 / fan_in))
        b = self.add(f"{name}.b", np.zeros(cout))
        return w, b

    def tensors(self):
        return list(self._items)

    def named(self):
        return [(t.name, t) for t in self._items]

    def zero_grad(self):
        for t in self._items:
            t.grad = None


def _norm_act(x, act, use_norm=True):
    """InstanceNorm (skipped on 1-element spatial extents) then activation."""
    spatial = int(np.prod(x.shape[1:]))
    if use_norm and spatial > 1:
        x = instance_norm(x)
    return act(x)


def _lrelu(x):
    return leaky_relu(x, slope=0.2)


def _broadcast_depth(feat2d, depth):
    """(C, H, W) -> (C, depth, H, W) by repetition along a new axis 1."""
    c, h, w = feat2d.shape
    one = reshape(feat2d, (c, 1, h, w))
    if depth == 1:
        return one
    return concat([one] * depth, axis=1)


def _slice_axial(vol_flat, index, n):
    """Differentiable extraction of axial slice `index` from (n, n*n) rows."""
    row = np.zeros((1, n), dtype=vol_flat.data.dtype)
    row[0, index] = 1.0
    return reshape(matmul(Tensor(row), vol_flat), (1, n, n))


class GeneratorGA:
    """Guided-attention generator; attention=False gives the plain baseline."""

    def __init__(self, n, base_channels=8, lift_channels=16, reduction=8,
                 lambda_rec=0.1, attention=True, seed=0):
        if n < 16 or n % 16:
            raise ValueError(f"volume edge must be a multiple of 16, got {n}")
        if lift_channels < 1:
            raise ValueError(f"lift_channels must be >= 1, got {lift_channels}")
        self.kind = "ga" if attention else "baseline"
        self.n = int(n)
        self.base_channels = int(base_channels)
        self.lift_channels = int(lift_channels)
        self.reduction = int(reduction)
        self.lambda_rec = float(lambda_rec)
        self.attention = bool(attention)
        self.seed = int(seed)
        self.store = ParamStore()
        rng = np.random.default_rng(seed)

        ngf = self.base_channels
        self.enc_channels = [ngf, 2 * ngf, 4 * ngf, 4 * ngf]
        fused_c = 3 * 4 * ngf  # two deepest scales + guidance tail
        self.fused_channels = fused_c
        self.blocks = {}
        for br in ("f", "l"):
            enc = []
            cin = 1
            for i, cout in enumerate(self.enc_channels):
                enc.append(self.store.conv2d_param(f"{br}.enc{i}", cout, cin, 3, rng))
                cin = cout
            self.blocks[br] = {"enc": enc}

            if attention:
                blk = att.GuidedAttention(fused_c, reduction=reduction,
                                          lambda_rec=lambda_rec, rng=rng,
                                          name=f"{br}.attn")
                self.store.adopt(blk.tensors())
                self.blocks[br]["attn"] = blk

            d3 = n // 8
            self.blocks[br]["proj"] = self.store.conv2d_param(
                f"{br}.proj", lift_channels * d3, fused_c, 1, rng)

            dec_specs = [
                (lift_channels + 2 * ngf, 4 * ngf),
                (4 * ngf + ngf, 2 * ngf),
                (2 * ngf, ngf),
            ]
            dec = []
            for i, (dcin, dcout) in enumerate(dec_specs):
                dec.append(self.store.conv3d_param(f"{br}.dec{i}", dcout, dcin, 3, rng))
            self.blocks[br]["dec"] = dec
            self.blocks[br]["final"] = self.store.conv3d_param(f"{br}.final", 1, ngf, 1, rng)

    def config(self):
        return {
            "kind": self.kind,
            "n": self.n,
            "base_channels": self.base_channels,
            "lift_channels": self.lift_channels,
            "reduction": self.reduction,
            "lambda_rec": self.lambda_rec,
            "seed": self.seed,
        }

    def _branch_logits(self, x, br):
        blk = self.blocks[br]
        feats = []
        h = x
        for i, (w, b) in enumerate(blk["enc"]):
            h = conv2d(h, w, b, stride=2, pad=1)
            h = _norm_act(h, _lrelu)
            feats.append(h)
        e0, e1, e2, e3 = feats

        fused = att.multiscale_fuse([e2, e3])
        if self.attention:
            f_sa, rec = att.guided_forward(blk["attn"], fused)
        else:
            f_sa, rec = fused, None

        w, b = blk["proj"]
        lifted = lift_2d_to_3d(_lrelu(conv2d(f_sa, w, b)), self.lift_channels)

        h3 = lifted
        skips = [e1, e0, None]
        for i, (w, b) in enumerate(blk["dec"]):
            h3 = upsample3d_trilinear(h3, 2)
            if skips[i] is not None:
                h3 = concat([h3, _broadcast_depth(skips[i], h3.shape[1])], axis=0)
            h3 = _norm_act(conv3d(h3, w, b, stride=1, pad=1), relu)
        w, b = blk["final"]
        return conv3d(h3, w, b), rec

    def forward(self, xf, xl):
        """xf, xl: (1, n, n) tensors. Returns ((1,n,n,n) volume, aux)."""
        logits_f, rec_f = self._branch_logits(xf, "f")
        logits_l, rec_l = self._branch_logits(xl, "l")
        logits_l = permute(logits_l, (0, 3, 2, 1))  # (c,w,h,d) -> (c,d,h,w)
        vol = sigmoid(mul_scalar(add(logits_f, logits_l), 0.5))
        aux = {"attn_recon": None, "vq_loss": None, "perplexity": None, "vq_indices": None}
        if self.attention:
            aux["attn_recon"] = add(rec_f, rec_l)
        return vol, aux


class GeneratorVQ:
    """Vector-quantized two-branch generator."""

    def __init__(self, n, base_channels=8, embed_dim=32, codebook_size=128,
                 beta=0.25, seed=0):
        if n < 16 or n % 8:
            raise ValueError(f"volume edge must be a multiple of 8 and >= 16, got {n}")
        d3 = n // 8
        if embed_dim % d3:
            raise ValueError(f"embed_dim {embed_dim} must divide by n/8 = {d3}")
        self.kind = "vq"
        self.n = int(n)
        self.base_channels = int(base_channels)
        self.embed_dim = int(embed_dim)
        self.codebook_size = int(codebook_size)
        self.beta = float(beta)
        self.seed = int(seed)
        self.store = ParamStore()
        rng = np.random.default_rng(seed)

        ngf = self.base_channels
        self.codebook = Codebook(codebook_size, embed_dim, rng=rng)
        self.store.adopt([self.codebook.entries])

        cmid = 2 * ngf
        self.blocks = {}
        for br in ("f", "l"):
            enc = []
            for i, (cin, cout) in enumerate(((1, ngf), (ngf, 2 * ngf),
                                             (2 * ngf, embed_dim))):
                enc.append(self.store.conv2d_param(f"{br}.enc{i}", cout, cin, 3, rng))
            refine = []
            c3 = embed_dim // d3
            for i, (cin, cout) in enumerate(((c3, cmid), (cmid, cmid))):
                refine.append(self.store.conv3d_param(f"{br}.refine{i}", cout, cin, 3, rng))
            self.blocks[br] = {"enc": enc, "refine": refine}

        up_specs = [(cmid, 2 * ngf), (2 * ngf, ngf), (ngf, ngf)]
        self.up = [self.store.conv3d_param(f"up{i}", cout, cin, 3, rng)
                   for i, (cin, cout) in enumerate(up_specs)]
        self.final = self.store.conv3d_param("final", 1, ngf, 1, rng)

    def config(self):
        return {
            "kind": self.kind,
            "n": self.n,
            "base_channels": self.base_channels,
            "embed_dim": self.embed_dim,
            "codebook_size": self.codebook_size,
            "beta": self.beta,
            "seed": self.seed,
        }

    def _branch_volume(self, x, br, frozen_indices=None):
        blk = self.blocks[br]
        h = x
        for i, (w, b) in enumerate(blk["enc"]):
            h = conv2d(h, w, b, stride=2, pad=1)
            if i < len(blk["enc"]) - 1:
                h = _norm_act(h, _lrelu)
        # h is z_e: (embed_dim, n/8, n/8); quantize over the feature axis
        z_e = permute(h, (1, 2, 0))
        q = quantize(z_e, self.codebook, beta=self.beta, frozen_indices=frozen_indices)
        z_q = permute(straight_through(z_e, q.e_sel), (2, 0, 1))

        h3 = lift_2d_to_3d(z_q, self.embed_dim // (self.n // 8))
        for w, b in blk["refine"]:
            h3 = _norm_act(conv3d(h3, w, b, stride=1, pad=1), relu)
        return h3, q

    def forward(self, xf, xl, frozen_indices=None):
        """frozen_indices: optional (idx_f, idx_l) bypassing the NN search,
        for finite-difference checks where index flips would invalidate the
        comparison."""
        fi_f, fi_l = frozen_indices if frozen_indices is not None else (None, None)
        v_f, q_f = self._branch_volume(xf, "f", fi_f)
        v_l, q_l = self._branch_volume(xl, "l", fi_l)
        v_l = permute(v_l, (0, 3, 2, 1))
        h3 = fuse_branches(v_f, v_l)
        for w, b in self.up:
            h3 = upsample3d_trilinear(h3, 2)
            h3 = _norm_act(conv3d(h3, w, b, stride=1, pad=1), relu)
        w, b = self.final
        vol = sigmoid(conv3d(h3, w, b))

        vq_codebook = add(q_f.codebook_loss, q_l.codebook_loss)
        vq_commit = add(q_f.commitment_loss, q_l.commitment_loss)
        aux = {
            "attn_recon": None,
            "vq_loss": add(vq_codebook, vq_commit),
            "vq_codebook": vq_codebook,
            "vq_commitment": vq_commit,
            "perplexity": 0.5 * (q_f.perplexity + q_l.perplexity),
            "vq_indices": (q_f.indices, q_l.indices),
        }
        return vol, aux


class Discriminator3D:
    """Stride-2 conv stack scoring overlapping volume patches (LSGAN head)."""

    def __init__(self, n, base_channels=8, seed=0):
        if n < 16 or n % 16:
            raise ValueError(f"volume edge must be a multiple of 16, got {n}")
        self.kind = "disc"
        self.n = int(n)
        self.base_channels = int(base_channels)
        self.seed = int(seed)
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        ngf = self.base_channels
        specs = [(1, ngf), (ngf, 2 * ngf), (2 * ngf, 4 * ngf), (4 * ngf, 4 * ngf)]
        self.stages = [self.store.conv3d_param(f"stage{i}", cout, cin, 3, rng)
                       for i, (cin, cout) in enumerate(specs)]
        self.head = self.store.conv3d_param("head", 1, 4 * ngf, 3, rng)

    def config(self):
        return {"kind": self.kind, "n": self.n,
                "base_channels": self.base_channels, "seed": self.seed}

    def forward(self, vol):
        if vol.shape != (1, self.n, self.n, self.n):
            raise ShapeError(f"discriminator expects (1,{self.n},{self.n},{self.n}), "
                             f"got {vol.shape}")
        h = vol
        for i, (w, b) in enumerate(self.stages):
            h = conv3d(h, w, b, stride=2, pad=1)
            h = _norm_act(h, _lrelu, use_norm=(i > 0))
        w, b = self.head
        return conv3d(h, w, b, stride=1, pad=1)


def generator_forward(gen, drr_f, drr_l):
    """Validated entry point: tagged images in, volume tensor + aux out."""
    for img, want in ((drr_f, View.FRONTAL), (drr_l, View.LATERAL)):
        if not isinstance(img, DrrImage):
            raise TypeError(f"expected DrrImage, got {type(img).__name__}")
        if img.view is not want:
            raise ValueError(f"expected a {want.name.lower()} image, got {img.view.name.lower()}")
        if img.data.shape != (gen.n, gen.n):
            raise ShapeError(f"{want.name.lower()} image must be ({gen.n}, {gen.n}), "
                             f"got {img.data.shape}")
    dt = gen.store.tensors()[0].data.dtype
    xf = Tensor(img_to_input(drr_f.data, dt))
    xl = Tensor(img_to_input(drr_l.data, dt))
    return gen.forward(xf, xl)


def img_to_input(arr2d, dtype):
    return np.ascontiguousarray(arr2d, dtype=dtype)[None, :, :]


# ---------------------------------------------------------------------------
# losses


def lsgan_d_loss(real_scores, fake_scores):
    """0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2)."""
    ones = Tensor(np.ones(real_scores.shape, dtype=real_scores.data.dtype))
    zeros = Tensor(np.zeros(fake_scores.shape, dtype=fake_scores.data.dtype))
    return mul_scalar(add(mse_loss(real_scores, ones), mse_loss(fake_scores, zeros)), 0.5)


def lsgan_g_loss(fake_scores):
    """0.5 * mean((fake - 1)^2)."""
    ones = Tensor(np.ones(fake_scores.shape, dtype=fake_scores.data.dtype))
    return mul_scalar(mse_loss(fake_scores, ones), 0.5)


class PerceptualNet:
    """Frozen random two-stage 2D conv stack used as a fixed feature space.

    Nothing pretrained exists here; a seed-fixed random stack still defines
    a stable nonlinear distance that differs from plain voxel MSE.
    """

    def __init__(self, channels=8, seed=7777):
        rng = np.random.default_rng(seed)
        dt = default_dtype()
        self.channels = int(channels)
        self.seed = int(seed)

        def conv_const(cout, cin):
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            return Tensor(w.astype(dt)), Tensor(np.zeros(cout, dtype=dt))

        self.w1, self.b1 = conv_const(channels, 1)
        self.w2, self.b2 = conv_const(channels, channels)

    def features(self, img):
        """img: (1, H, W) tensor -> [stage1, stage2] feature tensors."""
        f1 = _lrelu(conv2d(img, self.w1, self.b1, stride=1, pad=1))
        f2 = _lrelu(conv2d(f1, self.w2, self.b2, stride=2, pad=1))
        return [f1, f2]


def slice_indices(n, count):
    """Evenly spaced interior axial slice indices."""
    if count < 1 or count > n:
        raise ValueError(f"need 1 <= count <= {n}, got {count}")
    return [int((i + 0.5) * n / count) for i in range(count)]


def perceptual_loss(pred_vol, gt_vol, net, n_slices=4):
    """Mean feature-space MSE over evenly spaced axial slices.

    pred_vol: (1, n, n, n) tensor; gt_vol: (n, n, n) array or tensor.
    """
    n = pred_vol.shape[-1]
    if pred_vol.shape != (1, n, n, n):
        raise ShapeError(f"perceptual_loss: pred must be (1,n,n,n), got {pred_vol.shape}")
    gt = gt_vol.data if isinstance(gt_vol, Tensor) else np.asarray(gt_vol)
    if gt.shape != (n, n, n):
        raise ShapeError(f"perceptual_loss: target must be ({n},{n},{n}), got {gt.shape}")
    pred_rows = reshape(pred_vol, (n, n * n))
    terms = []
    idxs = slice_indices(n, n_slices)
    for i in idxs:
        ps = _slice_axial(pred_rows, i, n)
        gs = Tensor(np.ascontiguousarray(gt[i], dtype=pred_vol.data.dtype)[None])
        for pf, gf in zip(net.features(ps), net.features(gs)):
            terms.append(mse_loss(pf, gf))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return mul_scalar(total, 1.0 / len(terms))


def projection_loss(pred_vol, gt_frontal, gt_lateral, model=ProjectionModel()):
    """Mean over both views of the projection-image MSE.

    pred_vol: (1, n, n, n) tensor; gt images: (n, n) arrays (constants).
    """
    n = pred_vol.shape[-1]
    if pred_vol.shape != (1, n, n, n):
        raise ShapeError(f"projection_loss: pred must be (1,n,n,n), got {pred_vol.shape}")
    pv = reshape(pred_vol, (n, n, n))
    dt = pred_vol.data.dtype
    pf = project_tensor(pv, View.FRONTAL, model)
    pl = project_tensor(pv, View.LATERAL, model)
    lf = mse_loss(pf, Tensor(np.asarray(gt_frontal, dtype=dt)))
    ll = mse_loss(pl, Tensor(np.asarray(gt_lateral, dtype=dt)))
    return mul_scalar(add(lf, ll), 0.5)


def gradcheck_cases():
    """Composed finite-difference cases for the full model paths.

    Stop-gradient arms (the attention recon target, both VQ loss targets)
    and the straight-through estimator disagree with naive finite
    differences *by definition*, so each case scopes its leaves to routes
    where FD is the true derivative:

    * the GA generator case differentiates the full training objective
      (minus the attention recon term, which has its own case in the
      attention module) through every generator parameter;
    * the VQ decoder case covers all post-quantization parameters under
      frozen code indices;
    * the VQ encoder case covers the encoder convs through the commitment
      term, again with frozen indices;
    * straight-through and codebook routes are verified exactly (not by
      FD) in the test suite.
    """
    from .autodiff.ops import hadamard, mean as op_mean
    from .volcore import make_phantom, random_spec
    from .projector import project_array

    def sample_pair(n, seed):
        vol = make_phantom(random_spec(n, 3, seed=seed)).data.astype(np.float64)
        f = project_array(vol, View.FRONTAL)
        l = project_array(vol, View.LATERAL)
        return vol, f, l

    def g_objective(gen, vol, f, l, disc, net, frozen=None):
        xf = Tensor(f[None]) if f.ndim == 2 else Tensor(f)
        xl = Tensor(l[None]) if l.ndim == 2 else Tensor(l)
        if frozen is None:
            out, aux = gen.forward(xf, xl)
        else:
            out, aux = gen.forward(xf, xl, frozen_indices=frozen)
        gt = Tensor(vol[None])
        loss = mse_loss(out, gt)
        loss = add(loss, projection_loss(out, f, l))
        loss = add(loss, mul_scalar(perceptual_loss(out, vol, net, n_slices=2), 0.1))
        loss = add(loss, lsgan_g_loss(disc.forward(out)))
        if aux["vq_loss"] is not None:
            loss = add(loss, aux["vq_loss"])
        return loss

    def b_generator_ga(rng):
        n = 16
        vol, f, l = sample_pair(n, seed=21)
        gen = GeneratorGA(n=n, base_channels=4, lift_channels=8, seed=int(rng.integers(1 << 30)))
        for t in gen.store.tensors():
            if t.name.endswith("gamma"):
                t.data = np.asarray(0.3 * rng.standard_normal(()))
            elif t.name.endswith(".b"):
                t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        disc = Discriminator3D(n=n, base_channels=4, seed=int(rng.integers(1 << 30)))
        net = PerceptualNet(channels=4, seed=int(rng.integers(1 << 30)))
        return (lambda: g_objective(gen, vol, f, l, disc, net)), gen.store.tensors()

    def b_vq_decoder(rng):
        n = 16
        vol, f, l = sample_pair(n, seed=22)
        gen = GeneratorVQ(n=n, base_channels=4, embed_dim=16,
                          codebook_size=12, seed=int(rng.integers(1 << 30)))
        for t in gen.store.tensors():
            if t.name.endswith(".b"):
                t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        disc = Discriminator3D(n=n, base_channels=4, seed=int(rng.integers(1 << 30)))
        net = PerceptualNet(channels=4, seed=int(rng.integers(1 << 30)))
        _, aux = gen.forward(Tensor(f[None]), Tensor(l[None]))
        frozen = aux["vq_indices"]
        decoder_side = [t for t in gen.store.tensors()
                        if ".refine" in t.name or t.name.startswith(("up", "final"))]
        return (lambda: g_objective(gen, vol, f, l, disc, net, frozen=frozen)), decoder_side

    def b_vq_encoder_commit(rng):
        n = 16
        _, f, l = sample_pair(n, seed=23)
        gen = GeneratorVQ(n=n, base_channels=4, embed_dim=16,
                          codebook_size=12, seed=int(rng.integers(1 << 30)))
        for t in gen.store.tensors():
            if t.name.endswith(".b"):
                t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        _, aux = gen.forward(Tensor(f[None]), Tensor(l[None]))
        frozen = aux["vq_indices"]
        enc_side = [t for t in gen.store.tensors() if ".enc" in t.name]

        def f_commit():
            _, aux2 = gen.forward(Tensor(f[None]), Tensor(l[None]), frozen_indices=frozen)
            # commitment only: the codebook term's stopped z_e target would
            # vary under encoder FD perturbations
            return aux2["vq_commitment"]

        return f_commit, enc_side

    def b_projection_loss(rng):
        n = 8
        vol = rng.random((1, n, n, n)) + 0.05
        pred = Tensor(vol, requires_grad=True, name="pred")
        f = rng.random((n, n))
        l = rng.random((n, n))
        return (lambda: projection_loss(pred, f, l)), [pred]

    def b_perceptual(rng):
        n = 8
        pred = Tensor(rng.random((1, n, n, n)), requires_grad=True, name="pred")
        gt = rng.random((n, n, n))
        net = PerceptualNet(channels=4, seed=int(rng.integers(1 << 30)))
        return (lambda: perceptual_loss(pred, gt, net, n_slices=2)), [pred]

    def b_discriminator(rng):
        n = 16
        real = Tensor(rng.random((1, n, n, n)))
        fake = Tensor(rng.random((1, n, n, n)))
        disc = Discriminator3D(n=n, base_channels=4, seed=int(rng.integers(1 << 30)))
        for t in disc.store.tensors():
            if t.name.endswith(".b"):
                t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        return (lambda: lsgan_d_loss(disc.forward(real), disc.forward(fake))), \
            disc.store.tensors()

    return [
        ("GeneratorGaStep", b_generator_ga),
        ("VqDecoderPath", b_vq_decoder),
        ("VqEncoderCommit", b_vq_encoder_commit),
        ("ProjectionLoss", b_projection_loss),
        ("PerceptualLoss", b_perceptual),
        ("DiscriminatorLsgan", b_discriminator),
    ]


# ---------------------------------------------------------------------------
# checkpoints

_MODEL_BUILDERS = {}


def _register_builder(kind):
    def deco(fn):
        _MODEL_BUILDERS[kind] = fn
        return fn
    return deco


@_register_builder("ga")
def _build_ga(cfg):
    return GeneratorGA(n=int(cfg["n"]), base_channels=int(cfg["base_channels"]),
                       lift_channels=int(cfg["lift_channels"]),
                       reduction=int(cfg["reduction"]),
                       lambda_rec=float(cfg["lambda_rec"]),
                       attention=True, seed=int(cfg["seed"]))


@_register_builder("baseline")
def _build_baseline(cfg):
    return GeneratorGA(n=int(cfg["n"]), base_channels=int(cfg["base_channels"]),
                       lift_channels=int(cfg["lift_channels"]),
                       reduction=int(cfg["reduction"]),
                       lambda_rec=float(cfg["lambda_rec"]),
                       attention=False, seed=int(cfg["seed"]))


@_register_builder("vq")
def _build_vq(cfg):
    return GeneratorVQ(n=int(cfg["n"]), base_channels=int(cfg["base_channels"]),
                       embed_dim=int(cfg["embed_dim"]),
                       codebook_size=int(cfg["codebook_size"]),
                       beta=float(cfg["beta"]), seed=int(cfg["seed"]))


@_register_builder("disc")
def _build_disc(cfg):
    return Discriminator3D(n=int(cfg["n"]), base_channels=int(cfg["base_channels"]),
                           seed=int(cfg["seed"]))


def save_checkpoint(model, path):
    """Single-model binary checkpoint; see load_checkpoint for the layout."""
    cfg = model.config()
    cfg_blob = "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg)).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", 1))
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    named = model.store.named()
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
    for _, t in named:
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    book = getattr(model, "codebook", None)
    if book is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<II", book.size, book.dim))
        buf.write(np.ascontiguousarray(book.entries.data, dtype="<f4").tobytes())
        buf.write(book.usage.astype("<u8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    b = fh.read(n)
    if len(b) != n:
        raise TruncatedError(f"checkpoint: expected {n} bytes for {what}, got {len(b)}")
    return b


def load_checkpoint(path):
    """Rebuild the model a checkpoint describes and load its weights.

    Layout: magic, u32 version, length-prefixed config text (key=value
    lines), u32 param count, per-param (u16 name len, name, u8 ndim,
    u32 dims), f32 payloads in header order, u8 codebook flag, then
    (u32 K, u32 D, f32 entries, u64 usage) when the flag is set.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != 1:
            raise FormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg = {}
        for line in _read_exact(fh, cfg_len, "config").decode("utf-8").splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                cfg[k] = v
        kind = cfg.get("kind")
        if kind not in _MODEL_BUILDERS:
            raise ValueError(f"checkpoint names unknown model kind {kind!r}")

        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "param count"))
        headers = []
        for _ in range(n_params):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            headers.append((name, dims))
        arrays = {}
        for name, dims in headers:
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 4 * count, f"payload of {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)

        (has_book,) = struct.unpack("<B", _read_exact(fh, 1, "codebook flag"))
        book_data = None
        if has_book:
            k, d = struct.unpack("<II", _read_exact(fh, 8, "codebook dims"))
            entries = np.frombuffer(_read_exact(fh, 4 * k * d, "codebook entries"),
                                    dtype="<f4").reshape(k, d)
            usage = np.frombuffer(_read_exact(fh, 8 * k, "codebook usage"), dtype="<u8")
            book_data = (entries, usage)
        if fh.read(1):
            raise FormatError("checkpoint: trailing bytes after codebook section")

    model = _MODEL_BUILDERS[kind](cfg)
    want = {name for name, _ in model.store.named()}
    got = set(arrays)
    if want != got:
        missing = sorted(want - got)[:3]
        extra = sorted(got - want)[:3]
        raise ValueError(f"checkpoint parameter set mismatch "
                         f"(missing {missing}, unexpected {extra})")
    dt = default_dtype()
    for name, t in model.store.named():
        arr = arrays[name]
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint param {name}: shape {arr.shape} != {t.shape}")
        t.data = arr.astype(dt)
    book = getattr(model, "codebook", None)
    if book is not None:
        if book_data is None:
            raise ValueError("checkpoint is missing the codebook section")
        entries, usage = book_data
        if entries.shape != (book.size, book.dim):
            raise ValueError(f"checkpoint codebook is {entries.shape}, "
                             f"model wants {(book.size, book.dim)}")
        book.entries.data = entries.astype(dt)
        book.usage = usage.astype(np.int64).copy()
    return model
