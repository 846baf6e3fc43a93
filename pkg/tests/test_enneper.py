import numpy as np
import pytest

from ribtube.numerics import ImmersedGrid
from ribtube.ribaucour import EmptyResultError
from ribtube import enneper as en, verify, geometry as geo
from ribtube.enneper import GaussTubeError, TripleError, InversionPreconditionError
from conftest import sphere_curve_gauss_tube, round_gauss_tube, example_triple


def closed_round_tube(n, s_span=(-1.0, 1.0)):
    return round_gauss_tube(n, s_span)


# ---------------------------------------------------------------- Gauss tubes

def test_round_net_polar_data():
    N, g0 = en.round_sphere_net((48, 48), [(0, 2 * np.pi), (-1, 1)], periodic=True)
    tube = en.gauss_tube_from_grid(N, g0)
    S = N.grid.mesh()[-1]
    tol = verify.tolerance(N.grid)
    assert tube.residuals["unit"] < 1e-10
    assert np.max(np.abs(tube.v0 - np.cos(S))) < tol
    assert np.max(np.abs(tube.nu - 1)) < tol
    assert np.max(np.abs(tube.phi_sph - np.tan(S))) < tol


def test_round_net_three_sphere():
    N, g0 = en.round_sphere_net((12, 16, 12), [(0.4, 2.6), (0, 2 * np.pi), (-0.7, 0.7)], n=3,
                                periodic=(False, True, False))
    tube = en.gauss_tube_from_grid(N, g0)
    S = N.grid.mesh()[-1]
    assert np.max(np.abs(tube.v0 - np.cos(S))) < verify.tolerance(N.grid)


@pytest.mark.parametrize("n", [33, 65])
def test_tube_over_small_circle(n):
    tube = sphere_curve_gauss_tube(n)
    tol = verify.tolerance(tube.grid)
    r = tube.residuals
    assert r["unit"] < 1e-10 and r["quadric"] < 1e-10
    assert r["cross_block"] < tol and r["phi_slice_variation"] < tol and r["ribaucour_ii"] < tol


def test_small_circle_tube_converges():
    a, b = sphere_curve_gauss_tube(33), sphere_curve_gauss_tube(65)
    for key in ("cross_block", "phi_slice_variation"):
        assert np.log2(a.residuals[key] / b.residuals[key]) > 1.7


def test_perturbed_net_rejected():
    # at n = 33 the tolerance C h^2 = 0.36 is as large as the defect itself
    N, g0 = en.round_sphere_net((65, 65), [(0, 2 * np.pi), (-0.8, 0.8)], periodic=True)
    X, S = N.grid.mesh()
    v = N.values + 0.2 * np.stack([0 * X, 0 * X, np.cos(X) * np.cos(S)], -1)
    bent = ImmersedGrid(N.grid, v / np.linalg.norm(v, axis=-1, keepdims=True))
    with pytest.raises(GaussTubeError):
        en.gauss_tube_from_grid(bent, g0)


def test_orthogonal_but_non_spherical_net_rejected():
    # the Gauss map of an inverted planar-leaf surface: orthogonal net, E0 leaves not spherical
    tube = closed_round_tube(33, (-0.8, 0.5))
    sup = en.support_function(tube, lambda x: 5 + 0.5 * np.cos(x) + 0.2 * np.sin(2 * x), lambda s: np.exp(2 * s))
    f = en.gauss_parametrization(tube, sup).f
    Nt = en.inverted_gauss_map(f, tube.N, [0.3, -0.2, 15.0])
    assert en.gauss_tube_from_grid(Nt, require_spherical=False).residuals["phi_slice_variation"] > 0.1
    with pytest.raises(GaussTubeError, match="phi varies"):
        en.gauss_tube_from_grid(Nt)


def test_unit_norm_enforced():
    N, g0 = en.round_sphere_net((17, 17), [(0, 2 * np.pi), (-0.5, 0.5)], periodic=True)
    with pytest.raises(GaussTubeError):
        en.gauss_tube_from_grid(ImmersedGrid(N.grid, 1.01 * N.values), g0)


# ---------------------------------------------------------------- support function and planar leaves

def test_support_function_constant_case():
    tube = closed_round_tube(64)
    c = 1.7
    sup = en.support_function(tube, c, lambda s: c * np.tan(s))
    # cos s (c + c (sec s - 1)) = c
    assert np.max(np.abs(sup.gamma - c)) < verify.tolerance(tube.grid)


def test_support_function_without_integral():
    tube = closed_round_tube(32)
    sup = en.support_function(tube, 1.7, 0.0)
    S = tube.grid.mesh()[-1]
    assert np.max(np.abs(sup.gamma - 1.7 * np.cos(S))) < 1e-14


def test_support_function_generic_mixed_block():
    tube = closed_round_tube(65)
    sup = en.support_function(tube, lambda x: 2 + 0.5 * np.cos(x), lambda s: np.exp(2 * s))
    assert sup.mixed_residual < verify.tolerance(tube.grid)


def test_gauss_parametrization_of_sphere():
    tube = closed_round_tube(64)
    c = 1.7
    gp = en.gauss_parametrization(tube, en.support_function(tube, c, lambda s: c * np.tan(s)))
    tol = verify.tolerance(tube.grid)
    assert np.nanmax(np.abs(gp.f.values - c * tube.N.values)) < tol
    assert np.nanmax(np.abs(gp.A + np.eye(2) / c)) < tol


def test_cos_s_support_is_degenerate():
    # V = 0 makes P_ss vanish identically: every node is singular
    tube = closed_round_tube(33)
    with pytest.raises(EmptyResultError):
        en.gauss_parametrization(tube, en.support_function(tube, lambda x: 2 + np.cos(x), 0.0))


@pytest.mark.parametrize("n", [33, 65])
def test_gauss_parametrization_planar_leaves_and_differential(n):
    tube = closed_round_tube(n, (-0.8, 0.5))
    sup = en.support_function(tube, lambda x: 5 + 0.5 * np.cos(x) + 0.2 * np.sin(2 * x), lambda s: np.exp(2 * s))
    gp = en.gauss_parametrization(tube, sup)
    tol = verify.tolerance(tube.grid)
    assert gp.planar.passed, gp.planar.record()
    assert gp.differential_residual < tol
    reps = verify.suite_gauss_map(gp.f, tube.N, P=gp.P, mask=gp.regular_mask)
    assert verify.all_passed(reps), verify.format_reports(reps)


def test_gauss_parametrization_differential_converges():
    res = []
    for n in (33, 65):
        tube = closed_round_tube(n, (-0.8, 0.5))
        sup = en.support_function(tube, lambda x: 5 + 0.5 * np.cos(x), lambda s: np.exp(2 * s))
        res.append(en.gauss_parametrization(tube, sup).differential_residual)
    assert np.log2(res[0] / res[1]) > 1.7


# ---------------------------------------------------------------- Enneper triples

def enneper_tube(n, span=(0.2, 1.0)):
    return closed_round_tube(n, span)


def test_example_triple_node_value():
    tube = enneper_tube(33, (0.0, 1.0))
    tr = example_triple(tube.s_grid, a=0.7)
    es = en.enneper_parametrization(tube, tr)
    assert np.allclose(es.f.values[0, 0], [0.7, 0, 0], atol=1e-12)
    assert abs(np.linalg.norm(es.f.values[0, 0] - tr.gamma[0]) - 0.7) < 1e-12


def test_example_triple_constraint_and_angles():
    tube = enneper_tube(65)
    es = en.enneper_parametrization(tube, example_triple(tube.s_grid))
    tol = verify.tolerance(tube.grid)
    assert es.constraint_residual < 1e-12
    assert es.angle_spread < tol and es.angle_deviation < tol and es.distance_residual < 1e-12


def test_enneper_suite_passes_on_example():
    tube = enneper_tube(65)
    es = en.enneper_parametrization(tube, example_triple(tube.s_grid))
    reps = verify.suite_enneper(es.f, N=tube.N.values, centers=es.centers, radii=es.radii,
                                expected_cos=es.cos_theta)
    assert verify.all_passed(reps), verify.format_reports(reps)


def test_beta_zero_triple_gives_planar_leaves():
    tube = enneper_tube(33, (-0.7, 0.7))
    c = 0.5
    # <gamma', N> = c sin s, so alpha' = -c sin s keeps the constraint with beta = 0
    tr = en.EnneperTriple.from_functions(
        tube.s_grid, lambda s: np.stack([0 * s, 0 * s, c * s], -1), lambda s: np.stack([0 * s, 0 * s, c + 0 * s], -1),
        lambda s: 1 + c * np.cos(s), lambda s: -c * np.sin(s), lambda s: 0 * s, lambda s: 0 * s)
    es = en.enneper_parametrization(tube, tr)
    rep = verify.check_planar_leaves(es.f, 0)
    assert rep.passed, rep.record()


def test_constraint_violation_rejected():
    tube = enneper_tube(33)
    tr = en.EnneperTriple.from_functions(
        tube.s_grid, lambda s: np.stack([0 * s, 0 * s, s], -1), lambda s: np.stack([0 * s, 0 * s, 1 + 0 * s], -1),
        lambda s: 0.7 + 0 * s, lambda s: 0 * s, np.cos, lambda s: -np.sin(s))
    with pytest.raises(TripleError, match="constraint"):
        en.enneper_parametrization(tube, tr)


def test_mismatched_grids_rejected():
    tube = enneper_tube(33)
    with pytest.raises(TripleError):
        en.enneper_parametrization(tube, example_triple(enneper_tube(17).s_grid))


# ---------------------------------------------------------------- lambda family

def test_lambda_one_is_identity():
    tube = enneper_tube(33)
    tr = example_triple(tube.s_grid)
    d = en.deform_family(tr, 1.0)
    assert np.array_equal(d.gamma, tr.gamma)
    assert np.array_equal(d.alpha.values, tr.alpha.values) and np.array_equal(d.beta.values, tr.beta.values)
    shifted = en.deform_family(tr, 1.0, alpha0=2.0, gamma0=[1, 0, 0])
    assert np.allclose(shifted.alpha.values - 2.0, tr.alpha.values - tr.alpha.values[0], atol=1e-15)
    assert np.allclose(shifted.gamma - [1, 0, 0], tr.gamma - tr.gamma[0], atol=1e-15)


def test_lambda_two_scales():
    tube = enneper_tube(33)
    tr = example_triple(tube.s_grid)
    d = en.deform_family(tr, 2.0)
    s = tube.s_grid.axis(0)
    assert np.max(np.abs(d.beta.values - 2 * np.sin(s))) < 1e-15
    assert np.ptp(d.alpha.values) == 0.0
    assert np.max(np.abs(d.gamma[:, 2] - (2 * s - s[0]))) < 1e-14
    assert en.constraint_residual(tube, d) < 1e-10


def test_lambda_quadratic_keeps_constraint():
    tube = enneper_tube(65)
    d = en.deform_family(example_triple(tube.s_grid), lambda s: 1 + s ** 2 / 4)
    assert en.constraint_residual(tube, d) < verify.tolerance(tube.grid)


def test_vanishing_lambda_rejected():
    tube = enneper_tube(33)
    with pytest.raises(TripleError):
        en.deform_family(example_triple(tube.s_grid), lambda s: s - 0.5)


# ---------------------------------------------------------------- normalization and inversion

def test_normalization_fixed_point():
    # gamma = (0, 0, cosh s), alpha = sinh s, beta = 1: |gamma|^2 = alpha^2 + beta^2 at every s,
    # alpha(0) = 0 and gamma(0) = beta(0) e3, so lambda = 1 solves the normalization
    tube = enneper_tube(33, (0.0, 1.0))
    tr = en.EnneperTriple.from_functions(
        tube.s_grid, lambda s: np.stack([0 * s, 0 * s, np.cosh(s)], -1),
        lambda s: np.stack([0 * s, 0 * s, np.sinh(s)], -1),
        np.sinh, np.cosh, lambda s: 1 + 0 * s, lambda s: 0 * s)
    nz = en.normalize_through_point(tr, e=[0, 0, 1])
    assert np.max(np.abs(nz.lam.values - 1.0)) < 1e-8
    assert np.max(np.abs(nz.triple.gamma - tr.gamma)) < 1e-8


@pytest.mark.parametrize("n", [33, 65])
def test_normalized_leaf_spheres_meet_at_origin(n):
    tube = enneper_tube(n)
    nz = en.normalize_through_point(example_triple(tube.s_grid))
    tol = verify.tolerance(tube.grid)
    assert nz.through_point_residual < tol
    assert en.constraint_residual(tube, nz.triple) < tol
    es = en.enneper_parametrization(tube, nz.triple)
    pre = en.leaf_sphere_contains(es.f, np.zeros(3), es.centers, es.radii)
    assert pre["through_point"] < tol and pre["membership"] < 1e-12


def test_unnormalized_spheres_have_no_common_point():
    tube = enneper_tube(33)
    tr = example_triple(tube.s_grid)
    assert en.common_point(tr.gamma, tr.R)[1] > 0.5


def test_normalize_rejects_vanishing_beta():
    tube = enneper_tube(33, (-0.5, 0.5))
    with pytest.raises(TripleError, match="beta"):
        en.normalize_through_point(example_triple(tube.s_grid))


def test_planarize_normalized_surface():
    tube = enneper_tube(65)
    nz = en.normalize_through_point(example_triple(tube.s_grid))
    inv = en.planarize_by_inversion(en.enneper_parametrization(tube, nz.triple))
    assert inv.planar.passed, inv.planar.record()
    assert inv.closed_form_residual < 1e-12


def test_planarize_round_sphere_through_origin():
    N, _ = en.round_sphere_net((33, 33), [(0, 2 * np.pi), (-1.2, 1.2)], periodic=True)
    f = ImmersedGrid(N.grid, N.values + [0, 0, 1])
    one = np.ones(N.grid.counts)
    inv = en.planarize_by_inversion(f, centers=np.broadcast_to([0.0, 0.0, 1.0], f.values.shape), radii=one)
    # |f|^2 = 2 f_z on this sphere, so the image is the plane z = 1/2
    assert np.nanmax(np.abs(inv.f.values[..., 2] - 0.5)) < 1e-12


def test_planarize_rejects_generic_surface():
    tube = enneper_tube(33)
    es = en.enneper_parametrization(tube, example_triple(tube.s_grid))
    with pytest.raises(InversionPreconditionError):
        en.planarize_by_inversion(es)


def test_planarize_rejects_surface_through_center():
    N, _ = en.round_sphere_net((17, 17), [(0, 2 * np.pi), (-1.5, 1.5)], periodic=True)
    with pytest.raises(InversionPreconditionError):
        en.planarize_by_inversion(ImmersedGrid(N.grid, N.values + [0, 0, 1]), p=[1, 0, 1])


# ---------------------------------------------------------------- general Enneper pipeline

def general_pipeline(n):
    tube = closed_round_tube(n, (-0.8, 0.5))
    sup = en.support_function(tube, lambda x: 5 + 0.5 * np.cos(x) + 0.2 * np.sin(2 * x), lambda s: np.exp(2 * s))
    f = en.gauss_parametrization(tube, sup).f
    p, r = np.array([0.3, -0.2, 15.0]), 10.0
    v = f.values - p
    ft = ImmersedGrid(f.grid, r * r * v / np.sum(v * v, axis=-1, keepdims=True))
    Nt = en.inverted_gauss_map(f, tube.N, p)
    tt = en.gauss_tube_from_grid(Nt, require_spherical=False)
    tr, leaf_res = en.extract_triple(ft, tt)
    return ft, tt, tr, leaf_res


def test_general_pipeline_round_trip_and_family():
    ft, tt, tr, leaf_res = general_pipeline(65)
    tol = verify.tolerance(tt.grid)
    assert leaf_res < tol and en.constraint_residual(tt, tr) < tol
    es = en.enneper_parametrization(tt, tr)
    assert np.nanmax(np.linalg.norm(es.f.values - ft.values, axis=-1)) < tol
    d = en.deform_family(tr, lambda s: 2 - 0.3 * s)
    ed = en.enneper_parametrization(tt, d)
    reps = verify.suite_enneper(ed.f, N=tt.N.values, centers=ed.centers, radii=ed.radii,
                                expected_cos=ed.cos_theta)
    assert verify.all_passed(reps), verify.format_reports(reps)
    nz = en.normalize_through_point(d)
    inv = en.planarize_by_inversion(en.enneper_parametrization(tt, nz.triple))
    assert inv.planar.passed, inv.planar.record()
    # closing the loop: the Gauss map of the planar-leaf surface has spherical E0 leaves,
    # i.e. plane sections of S^2
    Ng = en.gauss_map_of(inv.f)
    assert verify.check_planar_leaves(Ng).passed


def test_gauss_map_of_orients():
    tube = closed_round_tube(33)
    f = ImmersedGrid(tube.grid, 2 * tube.N.values)
    n = en.gauss_map_of(f, orient=tube.N.values)
    assert np.max(np.abs(n.values - tube.N.values)) < verify.tolerance(tube.grid)
    assert np.allclose(geo.induced_metric(n)[..., 0, 1], 0, atol=verify.tolerance(tube.grid))
