"""Finite-difference verification of backward passes.

grad_check compares analytic gradients against central differences for
every (or a sampled subset of) leaf coordinates. Relative error uses
|analytic - numeric| / max(1, |analytic|, |numeric|) so tiny gradients are
judged on absolute terms.

primitive_cases() enumerates one check per differentiable primitive; model
modules contribute their own composed cases with the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .engine import Tensor


@dataclass
class GradReport:
    name: str
    max_rel_err: float = 0.0
    n_coords: int = 0
    worst_leaf: str = ""
    worst_coord: tuple = ()
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    per_leaf: dict = field(default_factory=dict)

    def summary(self):
        return (f"{self.name}: max_rel_err={self.max_rel_err:.3e} "
                f"over {self.n_coords} coords "
                f"(worst {self.worst_leaf}{list(self.worst_coord)}: "
                f"analytic={self.worst_analytic:.6e} numeric={self.worst_numeric:.6e})")


def _rel_err(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f, leaves, eps=1e-6, max_coords_per_leaf=None, rng=None, name="case"):
    """Check d f() / d leaf against central differences.

    f is a zero-argument callable returning a scalar Tensor; it must read
    the given leaves (requires_grad tensors) so that rebuilding the graph
    sees in-place perturbations of leaf.data. When max_coords_per_leaf is
    set, that many coordinates are sampled per leaf with rng.
    """
    leaves = list(leaves)
    for i, leaf in enumerate(leaves):
        if not leaf.requires_grad:
            raise ValueError(f"leaf {i} does not require grad")
        leaf.zero_grad()

    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check target must be scalar, got shape {out.shape}")
    out.backward()
    analytic = []
    for i, leaf in enumerate(leaves):
        if leaf.grad is None:
            analytic.append(np.zeros_like(leaf.data))
        else:
            analytic.append(leaf.grad.copy())

    report = GradReport(name=name)
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        n = flat.size
        if max_coords_per_leaf is not None and n > max_coords_per_leaf:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_leaf, replace=False)
        else:
            coords = range(n)
        a_flat = analytic[li].reshape(-1)
        lname = leaf.name or f"leaf{li}"
        leaf_worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(f().data)
            flat[c] = orig - eps
            f_minus = float(f().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = _rel_err(float(a_flat[c]), numeric)
            report.n_coords += 1
            if err > leaf_worst:
                leaf_worst = err
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_leaf = lname
                report.worst_coord = np.unravel_index(int(c), leaf.data.shape)
                report.worst_analytic = float(a_flat[c])
                report.worst_numeric = numeric
        report.per_leaf[lname] = leaf_worst
    return report


# ---------------------------------------------------------------------------
# per-primitive suite


def _leaf(rng, shape, name, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        # keep a margin around activation kinks so central differences
        # never straddle them
        x = x + 0.35 * np.sign(x + 1e-12)
    return Tensor(x, requires_grad=True, name=name)


def primitive_cases():
    """(name, builder) pairs; builder(rng) -> (f, leaves)."""

    # Probe constants must stay fixed across re-evaluations of f, so they
    # are drawn eagerly in the builder, not inside f.
    def fixed_probe(rng, shape):
        c = Tensor(rng.standard_normal(shape))
        return lambda t: ops.mean(ops.hadamard(t, c))

    cases = []

    def add_case(name, build):
        cases.append((name, build))

    def b_add(rng):
        a, b = _leaf(rng, (3, 4), "a"), _leaf(rng, (3, 4), "b")
        p = fixed_probe(rng, (3, 4))
        return (lambda: p(ops.add(a, b))), [a, b]

    def b_sub(rng):
        a, b = _leaf(rng, (2, 5), "a"), _leaf(rng, (2, 5), "b")
        p = fixed_probe(rng, (2, 5))
        return (lambda: p(ops.sub(a, b))), [a, b]

    def b_mul_scalar(rng):
        x = _leaf(rng, (4, 3), "x")
        s = Tensor(rng.standard_normal(()), requires_grad=True, name="s")
        p = fixed_probe(rng, (4, 3))
        return (lambda: p(ops.mul_scalar(x, s))), [x, s]

    def b_hadamard(rng):
        a, b = _leaf(rng, (3, 3, 2), "a"), _leaf(rng, (3, 3, 2), "b")
        p = fixed_probe(rng, (3, 3, 2))
        return (lambda: p(ops.hadamard(a, b))), [a, b]

    def b_matmul(rng):
        a, b = _leaf(rng, (4, 3), "a"), _leaf(rng, (3, 5), "b")
        p = fixed_probe(rng, (4, 5))
        return (lambda: p(ops.matmul(a, b))), [a, b]

    def b_batched_matmul(rng):
        a, b = _leaf(rng, (2, 3, 4), "a"), _leaf(rng, (2, 4, 2), "b")
        p = fixed_probe(rng, (2, 3, 2))
        return (lambda: p(ops.batched_matmul(a, b))), [a, b]

    def b_conv2d(rng):
        x = _leaf(rng, (2, 6, 7), "x")
        w = _leaf(rng, (3, 2, 3, 3), "w")
        bias = _leaf(rng, (3,), "bias")
        p = fixed_probe(rng, (3, 3, 4))  # stride 2, pad 1 output dims
        return (lambda: p(ops.conv2d(x, w, bias, stride=2, pad=1))), [x, w, bias]

    def b_conv3d(rng):
        x = _leaf(rng, (2, 4, 5, 4), "x")
        w = _leaf(rng, (2, 2, 3, 3, 3), "w")
        bias = _leaf(rng, (2,), "bias")
        # out dims with stride 1 pad 1: same spatial
        p = fixed_probe(rng, (2, 4, 5, 4))
        return (lambda: p(ops.conv3d(x, w, bias, stride=1, pad=1))), [x, w, bias]

    def b_upsample2d(rng):
        x = _leaf(rng, (2, 3, 4), "x")
        p = fixed_probe(rng, (2, 6, 8))
        return (lambda: p(ops.upsample2d_bilinear(x, 2))), [x]

    def b_upsample3d(rng):
        x = _leaf(rng, (2, 2, 3, 2), "x")
        p = fixed_probe(rng, (2, 4, 6, 4))
        return (lambda: p(ops.upsample3d_trilinear(x, 2))), [x]

    def b_relu(rng):
        x = _leaf(rng, (4, 4), "x", away_from_zero=True)
        p = fixed_probe(rng, (4, 4))
        return (lambda: p(ops.relu(x))), [x]

    def b_leaky_relu(rng):
        x = _leaf(rng, (4, 4), "x", away_from_zero=True)
        p = fixed_probe(rng, (4, 4))
        return (lambda: p(ops.leaky_relu(x, slope=0.2))), [x]

    def b_sigmoid(rng):
        x = _leaf(rng, (3, 5), "x")
        p = fixed_probe(rng, (3, 5))
        return (lambda: p(ops.sigmoid(x))), [x]

    def b_softmax(rng):
        x = _leaf(rng, (4, 6), "x")
        p = fixed_probe(rng, (4, 6))
        return (lambda: p(ops.softmax(x, axis=1))), [x]

    def b_instance_norm(rng):
        x = _leaf(rng, (3, 4, 4), "x")
        p = fixed_probe(rng, (3, 4, 4))
        return (lambda: p(ops.instance_norm(x, eps=1e-5))), [x]

    def b_concat(rng):
        a = _leaf(rng, (2, 3), "a")
        b = _leaf(rng, (2, 2), "b")
        c = _leaf(rng, (2, 4), "c")
        p = fixed_probe(rng, (2, 9))
        return (lambda: p(ops.concat([a, b, c], axis=1))), [a, b, c]

    def b_reshape(rng):
        x = _leaf(rng, (3, 4), "x")
        p = fixed_probe(rng, (2, 6))
        return (lambda: p(ops.reshape(x, (2, 6)))), [x]

    def b_permute(rng):
        x = _leaf(rng, (2, 3, 4), "x")
        p = fixed_probe(rng, (4, 2, 3))
        return (lambda: p(ops.permute(x, (2, 0, 1)))), [x]

    def b_mean(rng):
        x = _leaf(rng, (5, 3), "x")
        return (lambda: ops.mean(x)), [x]

    def b_mse(rng):
        a, b = _leaf(rng, (4, 4), "a"), _leaf(rng, (4, 4), "b")
        return (lambda: ops.mse_loss(a, b)), [a, b]

    add_case("Add", b_add)
    add_case("Sub", b_sub)
    add_case("MulScalar", b_mul_scalar)
    add_case("HadamardMul", b_hadamard)
    add_case("MatMul", b_matmul)
    add_case("BatchedMatMul", b_batched_matmul)
    add_case("Conv2d", b_conv2d)
    add_case("Conv3d", b_conv3d)
    add_case("Upsample2dBilinear", b_upsample2d)
    add_case("Upsample3dTrilinear", b_upsample3d)
    add_case("Relu", b_relu)
    add_case("LeakyRelu", b_leaky_relu)
    add_case("Sigmoid", b_sigmoid)
    add_case("Softmax", b_softmax)
    add_case("InstanceNorm", b_instance_norm)
    add_case("Concat", b_concat)
    add_case("Reshape", b_reshape)
    add_case("Permute", b_permute)
    add_case("Mean", b_mean)
    add_case("MseLoss", b_mse)
    return cases


def run_cases(cases, seed=0, eps=1e-6, max_coords_per_leaf=None):
    """Run (name, builder) pairs, return list of GradReport."""
    reports = []
    for name, build in cases:
        rng = np.random.default_rng(seed)
        f, leaves = build(rng)
        rep = grad_check(f, leaves, eps=eps, name=name,
                         max_coords_per_leaf=max_coords_per_leaf,
                         rng=np.random.default_rng(seed + 1))
        reports.append(rep)
    return reports
