"""Vector quantization of feature grids and the 2D-to-3D feature lift.

quantize snaps each D-dimensional feature vector to its nearest codebook
row (squared Euclidean, ties resolved to the lowest index) and returns the
two VQ training terms:

* codebook loss pulls the selected rows toward the (frozen) encoder
  output: MSE(stopgrad(z_e), e_sel);
* commitment loss pulls the encoder toward the (frozen) selection:
  beta * MSE(z_e, stopgrad(e_sel)).

straight_through stitches the quantized values into the graph so the
decoder consumes e_sel forward while gradients skip back to z_e unchanged;
the codebook receives gradients only through the codebook loss. Selected
rows are materialized as onehot @ entries, which keeps that gradient route
inside the ordinary matmul machinery.

lift_2d_to_3d folds a (C, H, W) map into (C_out, C // C_out, H, W) by
splitting the channel index c as c = d * C_out + c3 (channel-major over
depth); inverse_lift is its exact inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.engine import Node, Tensor, default_dtype
from .autodiff.ops import ShapeError, add, matmul, mse_loss, mul_scalar, permute, reshape


class Codebook:
    """Learnable (K, D) embedding table plus usage counters.

    Entries start uniform in [-1/K, 1/K]. usage counts how often each row
    has been selected (maintained by the caller via note_usage) and rides
    along in checkpoints for post-hoc codebook health inspection.
    """

    def __init__(self, size, dim, rng=None, entries=None, usage=None):
        if size < 1 or dim < 1:
            raise ValueError(f"codebook needs size, dim >= 1, got ({size}, {dim})")
        self.size = int(size)
        self.dim = int(dim)
        if entries is None:
            if rng is None:
                rng = np.random.default_rng(0)
            data = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim))
        else:
            data = np.asarray(entries)
            if data.shape != (size, dim):
                raise ValueError(f"entries must be ({size}, {dim}), got {data.shape}")
        self.entries = Tensor(data.astype(default_dtype()), requires_grad=True,
                              name="codebook.entries")
        if usage is None:
            self.usage = np.zeros(size, dtype=np.int64)
        else:
            self.usage = np.asarray(usage, dtype=np.int64).copy()
            if self.usage.shape != (size,):
                raise ValueError(f"usage must be ({size},), got {self.usage.shape}")

    def note_usage(self, indices):
        self.usage += np.bincount(np.asarray(indices).reshape(-1), minlength=self.size)


@dataclass
class QuantizeResult:
    e_sel: Tensor              # selected rows, graph into the codebook entries
    indices: np.ndarray        # int64, shape of z_e minus the feature axis
    codebook_loss: Tensor
    commitment_loss: Tensor    # already scaled by beta
    perplexity: float


def nearest_indices(flat, entries):
    """Row index of the nearest codebook entry for each feature vector.

    Squared distances expanded as |z|^2 - 2 z.E^T + |E|^2; np.argmin picks
    the lowest index on ties.
    """
    d2 = (np.sum(flat * flat, axis=1, keepdims=True)
          - 2.0 * (flat @ entries.T)
          + np.sum(entries * entries, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def perplexity_of(indices, size):
    """exp(entropy) of the empirical code-usage distribution."""
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=size)
    probs = counts / max(counts.sum(), 1)
    nz = probs[probs > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def quantize(z_e, book, beta=0.25, frozen_indices=None):
    """Quantize the trailing feature axis of z_e against book.

    frozen_indices bypasses the nearest-neighbor search (used by the
    gradient checks, where index flips would invalidate finite
    differences). Losses follow the stop-gradient convention described in
    the module docstring.
    """
    if z_e.ndim < 1 or z_e.shape[-1] != book.dim:
        raise ShapeError(f"quantize: trailing axis must be D={book.dim}, "
                         f"got shape {z_e.shape}")
    if not beta >= 0:
        raise ValueError(f"quantize: beta must be >= 0, got {beta}")
    lead = z_e.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    flat = z_e.data.reshape(n, book.dim)

    if frozen_indices is None:
        idx = nearest_indices(flat, book.entries.data)
    else:
        idx = np.asarray(frozen_indices, dtype=np.int64).reshape(-1)
        if idx.shape != (n,):
            raise ShapeError(f"quantize: frozen_indices must have {n} entries, "
                             f"got {idx.shape}")
        if idx.min() < 0 or idx.max() >= book.size:
            raise ValueError("quantize: frozen index out of codebook range")

    onehot = np.zeros((n, book.size), dtype=z_e.data.dtype)
    onehot[np.arange(n), idx] = 1.0
    e_sel = reshape(matmul(Tensor(onehot), book.entries), z_e.shape)

    codebook_loss = mse_loss(z_e.detach(), e_sel)
    commitment = mul_scalar(mse_loss(z_e, e_sel.detach()), beta)
    return QuantizeResult(
        e_sel=e_sel,
        indices=idx.reshape(lead) if lead else idx.reshape(()),
        codebook_loss=codebook_loss,
        commitment_loss=commitment,
        perplexity=perplexity_of(idx, book.size),
    )


def straight_through(z_e, e_sel):
    """Forward the quantized values, backpropagate as if identity on z_e.

    The second input contributes no gradient here by construction; the
    codebook trains through the codebook loss alone.
    """
    if z_e.shape != e_sel.shape:
        raise ShapeError(f"straight_through: shape mismatch {z_e.shape} vs {e_sel.shape}")

    def bwd(g):
        return g, None

    return Tensor(e_sel.data, requires_grad=z_e.requires_grad or e_sel.requires_grad,
                  node=Node("StraightThrough", (z_e, e_sel), bwd))


def lift_2d_to_3d(x, out_channels):
    """(C, H, W) -> (C_out, C // C_out, H, W) with c = depth * C_out + c_out."""
    if x.ndim != 3:
        raise ShapeError(f"lift_2d_to_3d: input must be (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if out_channels < 1 or c % out_channels:
        raise ShapeError(f"lift_2d_to_3d: C={c} not divisible by out_channels={out_channels}")
    depth = c // out_channels
    return permute(reshape(x, (depth, out_channels, h, w)), (1, 0, 2, 3))


def inverse_lift(v):
    """(C3, D, H, W) -> (C3 * D, H, W); exact inverse of lift_2d_to_3d."""
    if v.ndim != 4:
        raise ShapeError(f"inverse_lift: input must be (C,D,H,W), got {v.shape}")
    c3, d, h, w = v.shape
    return reshape(permute(v, (1, 0, 2, 3)), (c3 * d, h, w))


def fuse_branches(a, b):
    """Mean of two same-shaped feature volumes."""
    if a.shape != b.shape:
        raise ShapeError(f"fuse_branches: shape mismatch {a.shape} vs {b.shape}")
    return mul_scalar(add(a, b), 0.5)


def gradcheck_cases():
    """FD cases restricted to routes where FD is the true gradient.

    Stop-gradient arms make naive finite differences see dependencies the
    analytic gradient intentionally drops, and the straight-through
    estimator is *defined* to disagree with the true (zero) derivative of
    the quantization step. So: codebook loss is checked against the
    entries, commitment against the encoder side, both with frozen
    indices; straight-through is covered by exact algebraic tests in the
    suite instead.
    """
    def b_codebook(rng):
        book = Codebook(6, 4, rng=rng)
        z = Tensor(rng.standard_normal((5, 4)))
        idx = nearest_indices(z.data, book.entries.data)
        return (lambda: quantize(z, book, frozen_indices=idx).codebook_loss,
                [book.entries])

    def b_commitment(rng):
        book = Codebook(6, 4, rng=rng)
        z = Tensor(rng.standard_normal((5, 4)), requires_grad=True, name="z_e")
        idx = nearest_indices(z.data, book.entries.data)
        return (lambda: quantize(z, book, frozen_indices=idx).commitment_loss, [z])

    def b_lift(rng):
        from .autodiff.ops import hadamard, mean
        x = Tensor(rng.standard_normal((8, 3, 2)), requires_grad=True, name="x")
        c = Tensor(rng.standard_normal((4, 2, 3, 2)))
        return (lambda: mean(hadamard(lift_2d_to_3d(x, 4), c))), [x]

    return [
        ("VqCodebookLoss", b_codebook),
        ("VqCommitment", b_commitment),
        ("FeatureLift", b_lift),
    ]
