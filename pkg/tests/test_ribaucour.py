import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ribtube.numerics import ParamGrid, ImmersedGrid
from ribtube import ribaucour as rb, verify
from ribtube.ribaucour import EmptyResultError, QuadricError
from conftest import torus, product_grid, observed_order


def plane(n=64, z=1.0):
    g = product_grid([(-1, 1), (-1, 1)], (n, n))
    U, V = g.mesh()
    return ImmersedGrid(g, np.stack([U, V, np.full_like(U, z)], -1))


def sphere_patch(n, spans=((0.3, 1.2), (0.0, 2.0))):
    g = product_grid(spans, (n, n))
    U, V = g.mesh()
    N = np.stack([np.cos(U) * np.cos(V), np.cos(U) * np.sin(V), np.sin(U)], -1)
    return ImmersedGrid(g, N), N


def saddle(n):
    g = product_grid([(-0.8, 0.8), (-0.8, 0.8)], (n, n))
    U, V = g.mesh()
    f = np.stack([U, V, 0.3 * (U * U - V * V)], -1)
    N = np.stack([-0.6 * U, 0.6 * V, np.ones_like(U)], -1)
    return ImmersedGrid(g, f), N / np.linalg.norm(N, axis=-1, keepdims=True)


def general_data(f, N, a=0.7, P0=(0.3, -0.2, 0.5), w=(0.2, 0.1, -0.3), c=1.3, b=0.4):
    """phi = a|f - P0|^2/2 + <f, w> + c, beta = (<a(f - P0) + w, N> + b) N.
    F = a(f - P0) + w + b N, so dF = a df + b dN stays tangent on any surface;
    f_* grad phi is the tangent part of a(f - P0) + w."""
    v = a * (f.values - np.asarray(P0)) + np.asarray(w)
    phi = a * np.sum((f.values - np.asarray(P0)) ** 2, -1) / 2 + f.values @ np.asarray(w) + c
    vn = np.sum(v * N, -1)[..., None] * N
    beta = vn + b * N
    return rb.build_combescure(f, phi, beta, grad_phi=v - vn)


# ---------------------------------------------------------------- inversion

def test_inversion_data_gives_position_field_and_identity_phi():
    f = plane(64)
    d = rb.inversion_data(f, np.zeros(3), 1.0)
    tol = verify.tolerance(f.grid)
    assert np.max(np.abs(d.F - f.values)) < tol
    assert np.max(np.abs(d.Phi - np.eye(2))) < tol


def test_inversion_of_plane_is_sphere():
    f = plane(64)
    r = rb.ribaucour_transform(rb.inversion_data(f, np.zeros(3), 1.0))
    dist = np.abs(np.linalg.norm(r.f_tilde.values - [0, 0, 0.5], axis=-1) - 0.5)
    assert np.nanmax(dist) < 1e-10
    exact = f.values / np.sum(f.values ** 2, -1)[..., None]
    assert np.nanmax(np.abs(r.f_tilde.values - exact)) < 1e-10


def test_inversion_spot_value():
    # node (1, 0, 1) lies on the grid of a plane patch with u in [0, 1]
    g = product_grid([(0, 1), (-1, 1)], (11, 21))
    U, V = g.mesh()
    f = ImmersedGrid(g, np.stack([U, V, np.ones_like(U)], -1))
    r = rb.ribaucour_transform(rb.inversion_data(f, np.zeros(3), 1.0))
    assert np.allclose(r.f_tilde.values[-1, 10], [0.5, 0, 0.5], atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(cx=st.floats(-1, 1), cy=st.floats(-1, 1), cz=st.floats(2, 4), R=st.floats(0.3, 3))
def test_inversion_matches_closed_form_for_any_sphere(cx, cy, cz, R):
    f = plane(17)
    P0 = np.array([cx, cy, cz])
    r = rb.ribaucour_transform(rb.inversion_data(f, P0, R))
    v = f.values - P0
    exact = P0 + R * R * v / np.sum(v * v, -1)[..., None]
    assert np.nanmax(np.abs(r.f_tilde.values - exact)) < 1e-10 * (1 + R * R)
    assert r.residual_i < 1e-10


# ---------------------------------------------------------------- parallel translation

def test_parallel_data_field():
    f, N = sphere_patch(24)
    d = rb.parallel_data(f, N)
    assert np.max(np.abs(d.F + N)) == 0.0


def test_parallel_translation_of_sphere():
    f, N = sphere_patch(40)
    r = rb.ribaucour_transform(rb.parallel_data(f, N))
    assert np.nanmax(np.abs(r.f_tilde.values - 2 * N)) < 1e-12


def test_zero_data_masks_everything():
    f = plane(16)
    with pytest.raises(EmptyResultError):
        rb.ribaucour_transform(rb.build_combescure(f, np.zeros(f.grid.counts), np.zeros_like(f.values)))


# ---------------------------------------------------------------- generic data

# b = -0.4 keeps |F| away from zero on the saddle (nu phi stays O(1))
GENERIC = [(torus, {}), (saddle, {"b": -0.4}), (sphere_patch, {})]


@pytest.mark.parametrize("surface,kw", GENERIC, ids=["torus", "saddle", "sphere"])
def test_generic_conditions_converge(surface, kw):
    res = []
    for n in (33, 65):
        f, N = surface(n)
        d = general_data(f, N, **kw)
        r = rb.ribaucour_transform(d)
        assert d.combescure_residual < verify.tolerance(f.grid)
        assert r.residual_i < 1e-10
        assert r.residual_ii < verify.tolerance(f.grid)
        res.append(r.residual_ii)
    assert observed_order(*res) >= 1.7


def test_transform_preserves_curvature_line_net():
    f, N = torus(65)
    r = rb.ribaucour_transform(general_data(f, N))
    rep = verify.check_curvature_lines(r.f_tilde)
    assert rep.passed, rep.record()


# ---------------------------------------------------------------- space forms

def test_spaceform_c0_reduces_to_euclidean():
    f, N = torus(33)
    d = general_data(f, N)
    a = rb.ribaucour_transform(d)
    b = rb.ribaucour_transform_spaceform(d, 0.0)
    assert np.array_equal(a.f_tilde.values, b.f_tilde.values, equal_nan=True)


def test_spaceform_constant_phi_zero_beta():
    f, _ = sphere_patch(33)
    phi = np.full(f.grid.counts, 0.8)
    d = rb.build_combescure(f, phi, np.zeros_like(f.values), c=1.0)
    r = rb.ribaucour_transform_spaceform(d, 1.0)
    # nu = 1/(c phi)^2 on the unit sphere, D = (1 - 2 nu phi c phi) I = -I, f~ = -f
    tol = verify.tolerance(f.grid)
    assert np.max(np.abs(r.D - (-np.eye(2)))) < tol
    assert np.nanmax(np.abs(r.f_tilde.values + f.values)) < tol
    assert rb.quadric_residual(r, 1.0) < 1e-12


def test_spaceform_rejects_off_quadric_samples():
    f, N = torus(17)
    d = general_data(f, N)
    with pytest.raises(QuadricError):
        rb.ribaucour_transform_spaceform(d, 1.0)
