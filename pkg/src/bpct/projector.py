"""Parallel-ray projection of volumes to view images, plus the exact adjoint.

Pixel conventions for a volume of shape (D, H, W):

* frontal: rays run along depth; image[y, x] = reduce_d vol[d, y, x],
  image shape (H, W);
* lateral: rays run along width; image[y, x] = reduce_w vol[x, y, w],
  image shape (H, D), so the image x axis walks the volume depth axis.

Two physics models share those ray paths:

* "mean": the reduction is the arithmetic mean of samples on the ray;
* "beer": attenuation response 1 - exp(-mu * mean).

The adjoint implements the transpose of the *linear* mean projection and
satisfies <project(v), g> == <v, adjoint(g)> exactly up to float rounding.
The Beer-Lambert model reuses it through the chain rule in project_tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.engine import Node, Tensor
from .volcore import CtVolume, DrrImage, View

MODEL_KINDS = ("mean", "beer")


@dataclass(frozen=True)
class ProjectionModel:
    kind: str = "mean"
    mu: float = 4.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown projection model {self.kind!r}; pick from {MODEL_KINDS}")
        if self.kind == "beer" and not self.mu > 0:
            raise ValueError(f"beer model needs mu > 0, got {self.mu}")


def _mean_project(arr, view):
    if arr.ndim != 3:
        raise ValueError(f"projection needs a 3-D volume, got shape {arr.shape}")
    if view is View.FRONTAL:
        return arr.mean(axis=0)
    if view is View.LATERAL:
        return np.ascontiguousarray(arr.mean(axis=2).T)
    raise ValueError(f"unknown view {view!r}")


def project_array(arr, view, model=ProjectionModel()):
    """Project a raw (D,H,W) array; keeps the input float dtype."""
    m = _mean_project(arr, view)
    if model.kind == "mean":
        return m
    return (1.0 - np.exp(-model.mu * m)).astype(m.dtype, copy=False)


def project(vol, view, model=ProjectionModel()):
    """Project a CtVolume to a tagged DrrImage."""
    if not isinstance(vol, CtVolume):
        raise TypeError(f"project expects a CtVolume, got {type(vol).__name__}")
    return DrrImage(project_array(vol.data, view, model).astype(np.float32), view)


def project_adjoint(grad_img, view, dims):
    """Transpose of the mean projection: spread g back along its rays.

    dims is the (D, H, W) shape of the volume the gradient refers to. The
    returned array has that shape and the input's dtype.
    """
    g = np.asarray(grad_img)
    if len(dims) != 3:
        raise ValueError(f"dims must be (D, H, W), got {dims}")
    d, h, w = (int(v) for v in dims)
    if view is View.FRONTAL:
        if g.shape != (h, w):
            raise ValueError(f"frontal gradient must be {(h, w)}, got {g.shape}")
        return np.broadcast_to(g[None, :, :] / d, (d, h, w)).astype(g.dtype, copy=True)
    if view is View.LATERAL:
        if g.shape != (h, d):
            raise ValueError(f"lateral gradient must be {(h, d)}, got {g.shape}")
        # forward: img[y, z] = mean_w vol[z, y, w]
        spread = (g.T / w)[:, :, None]
        return np.broadcast_to(spread, (d, h, w)).astype(g.dtype, copy=True)
    raise ValueError(f"unknown view {view!r}")


def project_tensor(vol_t, view, model=ProjectionModel()):
    """Differentiable projection of a (D,H,W) Tensor; backward is the adjoint."""
    if not isinstance(vol_t, Tensor):
        raise TypeError(f"project_tensor expects a Tensor, got {type(vol_t).__name__}")
    if vol_t.ndim != 3:
        raise ValueError(f"project_tensor needs a 3-D tensor, got shape {vol_t.shape}")
    dims = vol_t.shape
    m = _mean_project(vol_t.data, view)

    if model.kind == "mean":
        out = m

        def bwd(g):
            return (project_adjoint(g, view, dims),)

    else:
        att = np.exp(-model.mu * m)
        out = (1.0 - att).astype(m.dtype, copy=False)

        def bwd(g):
            return (project_adjoint(g * model.mu * att, view, dims),)

    kind = "ProjectMean" if model.kind == "mean" else "ProjectBeer"
    return Tensor(out, requires_grad=vol_t.requires_grad,
                  node=Node(kind, (vol_t,), bwd))
