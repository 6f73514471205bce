"""Forward projection, its adjoint, and the differentiable wrapper."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpct.autodiff.engine import Tensor
from bpct.autodiff.ops import hadamard, mean, mul_scalar
from bpct.projector import (ProjectionModel, project, project_adjoint,
                            project_array, project_tensor)
from bpct.volcore import View, make_phantom, random_spec
from oracles import loop_project


def test_uniform_volume_projects_to_constant():
    arr = np.full((4, 4, 4), 0.37, dtype=np.float64)
    for view in (View.FRONTAL, View.LATERAL):
        img = project_array(arr, view)
        assert np.allclose(img, 0.37, atol=1e-7)


def test_impulse_volume_spreads_one_pixel():
    arr = np.zeros((8, 8, 8), dtype=np.float64)
    arr[3, 5, 2] = 1.0
    front = project_array(arr, View.FRONTAL)
    assert front[5, 2] == pytest.approx(1.0 / 8)
    assert np.count_nonzero(front) == 1
    lat = project_array(arr, View.LATERAL)
    assert lat[5, 3] == pytest.approx(1.0 / 8)
    assert np.count_nonzero(lat) == 1


def test_projection_matches_loop_oracle_on_phantom():
    arr = make_phantom(random_spec(16, 5, seed=7)).data.astype(np.float64)
    for view in (View.FRONTAL, View.LATERAL):
        got = project_array(arr, view)
        want = loop_project(arr, view)
        rel = np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want)))
        assert rel < 1e-6


def test_projection_shapes_on_anisotropic_volume():
    arr = np.zeros((3, 5, 7))
    assert project_array(arr, View.FRONTAL).shape == (5, 7)
    assert project_array(arr, View.LATERAL).shape == (5, 3)


def test_attenuation_model_matches_closed_form():
    rng = np.random.default_rng(2)
    arr = rng.random((4, 5, 6))
    model = ProjectionModel("beer", mu=2.5)
    for view in (View.FRONTAL, View.LATERAL):
        got = project_array(arr, view, model)
        want = 1.0 - np.exp(-2.5 * loop_project(arr, view))
        assert np.max(np.abs(got - want)) < 1e-12


def test_project_tags_output_views():
    vol = make_phantom(random_spec(8, 2, seed=1))
    assert project(vol, View.FRONTAL).view is View.FRONTAL
    assert project(vol, View.LATERAL).view is View.LATERAL


def test_project_rejects_raw_arrays():
    with pytest.raises(TypeError):
        project(np.zeros((4, 4, 4)), View.FRONTAL)


def test_projection_model_validation():
    with pytest.raises(ValueError):
        ProjectionModel("sinogram")
    with pytest.raises(ValueError):
        ProjectionModel("beer", mu=0.0)


def test_adjoint_of_zero_gradient_is_zero():
    out = project_adjoint(np.zeros((4, 4)), View.FRONTAL, (4, 4, 4))
    assert not out.any()


def test_adjoint_spreads_impulse_uniformly_along_ray():
    g = np.zeros((2, 2))
    g[1, 0] = 1.0
    out = project_adjoint(g, View.FRONTAL, (2, 2, 2))
    want = np.zeros((2, 2, 2))
    want[0, 1, 0] = 0.5
    want[1, 1, 0] = 0.5
    assert np.array_equal(out, want)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(2, 8),
       st.integers(0, 10_000), st.sampled_from([View.FRONTAL, View.LATERAL]))
def test_adjoint_inner_product_identity(d, h, w, seed, view):
    # <P v, g> == <v, P^T g> for all v, g
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((d, h, w))
    g = rng.standard_normal(project_array(v, view).shape)
    lhs = float(np.sum(project_array(v, view) * g))
    rhs = float(np.sum(v * project_adjoint(g, view, (d, h, w))))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_adjoint_identity_at_fixed_size():
    rng = np.random.default_rng(99)
    v = rng.standard_normal((8, 8, 8))
    for view in (View.FRONTAL, View.LATERAL):
        g = rng.standard_normal((8, 8))
        lhs = float(np.sum(project_array(v, view) * g))
        rhs = float(np.sum(v * project_adjoint(g, view, (8, 8, 8))))
        assert abs(lhs - rhs) < 1e-10


def test_adjoint_rejects_mismatched_gradient_shape():
    with pytest.raises(ValueError):
        project_adjoint(np.zeros((3, 3)), View.FRONTAL, (4, 4, 4))


def _fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = g.ravel()
    for i in range(x.size):
        keep = flat_x[i]
        flat_x[i] = keep + eps
        hi = f(x)
        flat_x[i] = keep - eps
        lo = f(x)
        flat_x[i] = keep
        flat_g[i] = (hi - lo) / (2 * eps)
    return g


@pytest.mark.parametrize("kind,mu", [("mean", 4.0), ("beer", 3.0)])
def test_differentiable_projection_gradient(kind, mu):
    rng = np.random.default_rng(5)
    model = ProjectionModel(kind, mu)
    probe = rng.standard_normal((4, 3))
    x = rng.random((2, 4, 3))

    def scalar(arr):
        return float(np.sum(project_array(arr, View.FRONTAL, model) * probe))

    t = Tensor(x.copy(), requires_grad=True)
    out = project_tensor(t, View.FRONTAL, model)
    s = mul_scalar(mean(hadamard(out, Tensor(probe))), float(probe.size))
    s.backward()
    num = _fd_grad(scalar, x.copy())
    rel = np.max(np.abs(t.grad - num)) / max(1.0, np.max(np.abs(num)))
    assert rel < 1e-7
