import numpy as np
import pytest

from ribtube.numerics import ParamGrid, ImmersedGrid
from ribtube import verify, enneper as en
from ribtube.verify import InvariantReport, SampledMetric, MetricError
from conftest import (product_grid, sphere_net, torus, graph_surface, sheared_plane, cyclide, helix_tube,
                      example_triple, round_gauss_tube, observed_order)


def flat(reps):
    return {r.name: r for rep in reps for r in rep.flatten()}


# ---------------------------------------------------------------- reports and metrics

def test_verdict_is_max_against_tolerance():
    assert InvariantReport("a", 1.0, 0.5, 1.0).passed
    assert not InvariantReport("a", 1.0 + 1e-15, 0.5, 1.0).passed
    assert not InvariantReport("a", float("nan"), 0.0, 1.0).passed
    assert InvariantReport("a", 0.25, 0.125, 0.5).record() == \
        "check=a max=2.500000e-01 rms=1.250000e-01 tol=5.000000e-01 verdict=pass"


def test_tolerance_is_c_h_squared():
    g = ParamGrid.uniform([(0, 1), (0, 2)], (11, 11))
    assert verify.tolerance(g) == pytest.approx(10 * 0.2 ** 2)
    assert verify.tolerance(g, 3.0) == pytest.approx(3 * 0.2 ** 2)


def test_format_and_first_failure():
    ok = InvariantReport("b", 0.0, 0.0, 1.0)
    bad = InvariantReport("a", 2.0, 2.0, 1.0)
    top = InvariantReport("top", 2.0, 2.0, 1.0, parts=[bad])
    assert verify.format_reports([ok, top]).splitlines()[0].startswith("check=a ")
    assert verify.first_failure([ok, top]) is top
    assert not verify.all_passed([ok, top]) and verify.all_passed([ok])


def test_sampled_metric_validation():
    g = product_grid([(0, 1), (0, 1)], (5, 5))
    good = np.broadcast_to(np.eye(2), (5, 5, 2, 2)).copy()
    SampledMetric(g, good)
    skew = good.copy()
    skew[..., 0, 1] = 0.1
    with pytest.raises(MetricError, match="symmetric"):
        SampledMetric(g, skew)
    neg = good.copy()
    neg[..., 1, 1] = -1.0
    with pytest.raises(MetricError, match="positive"):
        SampledMetric(g, neg)
    with pytest.raises(MetricError):
        SampledMetric(g, good[:4])


# ---------------------------------------------------------------- orthogonal nets

def test_orthogonal_net_round_sphere():
    assert verify.check_orthogonal_net(sphere_net(48)).max < 1e-10


def test_orthogonal_net_partial_tube():
    ev = helix_tube(48)
    assert verify.check_orthogonal_net(ev.f).passed


def test_orthogonal_net_sheared_plane_fails():
    rep = verify.check_orthogonal_net(sheared_plane(129))
    assert rep.max > 100 * rep.tol


# ---------------------------------------------------------------- adapted second fundamental form

def test_adapted_on_cyclide_and_torus():
    assert verify.check_adapted_second_fundamental_form(cyclide(48).f).passed
    f, _ = torus(48)
    assert verify.check_adapted_second_fundamental_form(f).passed


def test_adapted_fails_on_graph_surface():
    rep = verify.check_adapted_second_fundamental_form(graph_surface(65))
    assert not rep.passed, rep.record()


# ---------------------------------------------------------------- spherical leaves

def test_latitude_circles_are_spherical_leaves():
    rep = verify.check_spherical_leaves(sphere_net(48, (-1.2, 1.2)), 0)
    parts = {p.name: p for p in rep.parts}
    assert parts["leaf_sphere_fit"].max < 1e-10
    assert parts["leaf_radius_constancy"].max < 1e-10
    assert rep.passed


def test_latitude_center_drift_is_radial_fd_error():
    # the FD curvature magnitude carries an O(h^2) factor that is the same at
    # every node of a latitude, so the centers sit on a small circle about the axis
    drift = []
    for n in (48, 96):
        N = sphere_net(n, (-1.2, 1.2))
        c, _, _ = verify.leaf_spheres(N, 0)
        rho = np.hypot(c[..., 0], c[..., 1])
        scale = np.max(np.abs(c), axis=(0, 2))
        assert np.max(np.ptp(rho, axis=0) / scale) < 1e-12
        assert np.max(np.ptp(c[..., 2], axis=0) / scale) < 1e-12
        drift.append(verify.check_spherical_leaves(N, 0).parts[0].max)
    assert observed_order(*drift) > 1.8


def test_enneper_leaves_are_spheres_about_gamma():
    tube = round_gauss_tube(65, (0.2, 1.0))
    es = en.enneper_parametrization(tube, example_triple(tube.s_grid))
    rep = verify.check_spherical_leaves(es.f, 0, mode="contained", centers=es.centers, radii=es.radii)
    assert rep.passed, rep.record()
    assert {p.name: p for p in rep.parts}["leaf_given_centers"].max < 1e-12


def test_helicoid_rulings_are_plane_like():
    g = product_grid([(-1, 1), (0, 2)], (33, 33))
    R, T = g.mesh()
    f = ImmersedGrid(g, np.stack([R * np.cos(T), R * np.sin(T), 0.5 * T], -1))
    rep = verify.check_spherical_leaves(f, 0)
    assert rep.meta["plane_like"] == rep.meta["leaves"] == 33
    assert rep.passed


def test_spherical_leaves_of_partial_tube_converge():
    r = [verify.check_spherical_leaves(helix_tube(n).f, 0).max for n in (33, 65)]
    assert r[1] < verify.tolerance(helix_tube(65).f.grid)
    assert r[0] / r[1] >= 3


def test_graph_surface_leaves_not_spherical():
    assert not verify.check_spherical_leaves(graph_surface(65), 0).passed


# ---------------------------------------------------------------- constant angle

def test_tube_leaf_spheres_are_orthogonal():
    ev = helix_tube(65)
    f = ev.f
    cs, _, _ = verify.leaf_spheres(f, 0)
    cbar = np.broadcast_to(np.nanmean(cs, axis=0, keepdims=True), cs.shape)
    n = np.cross(*np.moveaxis(np.stack(np.gradient(f.values, *f.grid.h, axis=(0, 1)), -1), -1, 0))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    rep = verify.check_constant_angle(f, cbar, n, 0, mean_abs=True)
    assert {p.name: p for p in rep.parts}["angle_orthogonal"].passed, rep.record()
    assert verify.check_orthogonal_leaf_spheres(f, 0).passed


def test_enneper_angle_matches_triple():
    tube = round_gauss_tube(65, (0.2, 1.0))
    tr = example_triple(tube.s_grid, a=0.7)
    es = en.enneper_parametrization(tube, tr)
    s = tube.s_grid.axis(0)
    expect = np.broadcast_to(0.7 / np.sqrt(0.49 + np.sin(s) ** 2), tube.grid.counts)
    rep = verify.check_constant_angle(es.f, es.centers, tube.N.values, expected=expect)
    assert rep.passed and rep.max < 1e-12, rep.record()


def test_round_sphere_own_leaves_flagged():
    N = sphere_net(33, (-1.2, 1.2))
    rep = verify.check_constant_angle(N, np.zeros_like(N.values), N.values)
    assert rep.meta["tangent_sphere_leaves"] == 33
    assert rep.passed


# ---------------------------------------------------------------- curvature lines and geodesic curvature

def test_torus_coordinate_net_is_curvature_net():
    f, _ = torus(48)
    assert verify.check_curvature_lines(f).passed


def test_rotated_parameter_torus_fails():
    g = product_grid([(0.0, 1.0), (0.0, 1.0)], (65, 65))
    u, v = g.mesh()
    U, V = 0.2 + u + 0.5 * v, 0.1 + v - 0.5 * u
    f = ImmersedGrid(g, np.stack([(2 + 0.7 * np.cos(U)) * np.cos(V), (2 + 0.7 * np.cos(U)) * np.sin(V),
                                  0.7 * np.sin(U)], -1))
    rep = verify.check_curvature_lines(f)
    assert rep.max > 100 * rep.tol, rep.record()


def test_latitude_circles_have_constant_geodesic_curvature():
    rep = verify.check_geodesic_curvature_constancy(sphere_net(48, (-1.2, 1.2)), 0)
    assert rep.passed and rep.max < 1e-10
    # kappa_g of the latitude at height s is tan s
    N = sphere_net(48, (-1.2, 1.2))
    kg = verify.geodesic_curvature(N, 0)
    s = N.grid.axis(1)
    assert np.max(np.abs(np.abs(kg) - np.abs(np.tan(s))[None, :])) < verify.tolerance(N.grid)


def test_graph_surface_geodesic_curvature_varies():
    assert not verify.check_geodesic_curvature_constancy(graph_surface(65), 0).passed


# ---------------------------------------------------------------- principal structure

def test_round_cylinder_eigenstructure():
    g = ParamGrid.uniform([(0, 2 * np.pi), (-1, 1)], (48, 17), periodic=(True, False),
                          factors=((0,), (1,)))
    T, Z = g.mesh()
    r = 0.8
    f = ImmersedGrid(g, np.stack([r * np.cos(T), r * np.sin(T), Z], -1))
    k, *_ = verify.principal_curvatures(f)
    # the zero curvature is exact; 1/r carries the periodic FD factor
    ks = np.sort(np.abs(k), axis=-1)
    assert np.max(ks[..., 0]) < 1e-12
    assert np.max(np.abs(ks[..., 1] - 1 / r)) < verify.tolerance(g)
    rep = verify.check_principal_structure(f)
    assert rep.meta["max_multiplicity"] == 1 and rep.meta["umbilic_fraction"] == 0.0


def test_sphere_is_flagged_umbilic():
    g = ParamGrid.uniform([(0, 2 * np.pi), (-1, 1)], (32, 17), periodic=(True, False), factors=((0,), (1,)))
    N = en.round_sphere_net((32, 17), [(0, 2 * np.pi), (-1, 1)], periodic=True)[0]
    rep = verify.check_principal_structure(ImmersedGrid(g, N.values))
    assert rep.meta["umbilic_fraction"] == 1.0


# ---------------------------------------------------------------- polar metrics

def metric_grid(n, spans=((-1.0, 1.0), (0.0, 2.0))):
    return product_grid(spans, (n, n))


def test_round_sphere_polar_metric():
    g = metric_grid(33)
    m = SampledMetric.from_function(g, lambda s, x: [[1, 0], [0, np.cos(s) ** 2]])
    rep = verify.check_polar_conformal(m, lam=np.sin(g.mesh()[0]))
    assert verify.all_passed([rep]), verify.format_reports([rep])


def test_conformal_to_product_metric():
    g = product_grid([(-1.0, 1.0), (0.0, 2.0), (0.0, 1.0)], (17, 17, 17))
    # e^{2u} (ds^2 + dx^2 + dy^2) with u = 0.3 sin x + s: E_1 = x, E_2 = y are umbilical leaves' normals
    def fn(s, x, y):
        w = np.exp(2 * (0.3 * np.sin(x) + s))
        z = 0 * s
        return [[w, z, z], [z, w, z], [z, z, w]]
    rep = verify.check_polar_conformal(SampledMetric.from_function(g, fn))
    assert rep.passed, verify.format_reports([rep])


def test_sheared_metric_fails():
    g = metric_grid(129)
    m = SampledMetric.from_function(g, lambda s, x: [[1, 0.4], [0.4, 1]])
    rep = verify.check_polar_conformal(m)
    assert rep.max > 100 * rep.tol


# ---------------------------------------------------------------- conformality

def test_identity_is_conformal_and_shear_is_not():
    g = product_grid([(0, 1), (0, 1)], (65, 65))
    X, Y = g.mesh()
    ident = verify.check_conformality(ImmersedGrid(g, np.stack([X, Y], -1)), expected_factor=np.ones_like(X))
    assert ident.max < 1e-12
    rep = verify.check_conformality(ImmersedGrid(g, np.stack([X + 0.5 * Y, Y], -1)))
    assert rep.max > 100 * rep.tol


# ---------------------------------------------------------------- suites and orders

def test_cor_rpt_suite_on_tube_and_graph():
    assert verify.all_passed(verify.suite_cor_rpt(helix_tube(48).f))
    reps = verify.suite_cor_rpt(graph_surface(65))
    assert [r.name for r in reps] == sorted(r.name for r in reps)
    assert not verify.all_passed(reps)


@pytest.mark.parametrize("check", ["orthogonal_net", "adapted_sff", "leaf_center_constancy"])
def test_residuals_shrink_with_h(check):
    res = []
    for n in (33, 65):
        reps = flat(verify.suite_cor_rpt(helix_tube(n).f))
        res.append(reps[check].max)
    assert res[0] / res[1] >= 3, res
    assert observed_order(*res) > 1.5
