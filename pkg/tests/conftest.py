"""Shared builders for the test modules."""
import numpy as np
import pytest

from ribtube.numerics import ParamGrid, ImmersedGrid
from ribtube.curves import (ScalarAlongCurve, integrate_frame, integrate_sphere_frame,
                            solve_combescure_along_curve)
from ribtube import partial_tube as pt
from ribtube import enneper as en


def product_grid(spans, counts, periodic=()):
    """One factor per axis."""
    return ParamGrid.uniform(spans, counts, periodic=periodic,
                             factors=tuple((i,) for i in range(len(counts))))


def sphere_net(n, s_span=(-1.0, 1.0)):
    """Latitude/longitude net N(x, s) = (cos s cos x, cos s sin x, sin s)."""
    N, _ = en.round_sphere_net((n, n), [(0.0, 2 * np.pi), s_span], periodic=True)
    return N


def torus(n, R=2.0, r=0.7, spans=((0.2, 1.5), (0.1, 1.3))):
    g = product_grid(spans, (n, n))
    U, V = g.mesh()
    f = np.stack([(R + r * np.cos(U)) * np.cos(V), (R + r * np.cos(U)) * np.sin(V), r * np.sin(U)], -1)
    N = np.stack([np.cos(U) * np.cos(V), np.cos(U) * np.sin(V), np.sin(U)], -1)
    return ImmersedGrid(g, f), N


def graph_surface(n, shear=0.3):
    g = product_grid([(0.0, 1.0), (0.0, 1.0)], (n, n))
    U, V = g.mesh()
    return ImmersedGrid(g, np.stack([U + shear * V, V, np.sin(2 * U) * np.cos(3 * V) + U * V], -1))


def sheared_plane(n, shear=0.5):
    g = product_grid([(0.0, 1.0), (0.0, 1.0)], (n, n))
    U, V = g.mesh()
    return ImmersedGrid(g, np.stack([U + shear * V, V, 0 * U], -1))


def circle_curve(n):
    gs = ParamGrid.uniform([(0.0, 2 * np.pi)], (n,), periodic=(True,))
    return integrate_frame([1.0, 0.0], [1, 0, 0], [[0, 1, 0], [-1, 0, 0], [0, 0, 1]], grid=gs)


def cyclide(n, offset=3.0):
    """Constant phi = -1/2, beta = 0 over the unit circle, circle fiber."""
    curve = circle_curve(n)
    gs = curve.grid
    gt = ParamGrid.uniform([(0.0, 2 * np.pi)], (n,), periodic=(True,))
    t = gt.axis(0)
    fib = ImmersedGrid(gt, np.stack([offset + np.cos(t), np.sin(t)], -1))
    spec = pt.PartialTubeSpec.from_curve(curve, ScalarAlongCurve.constant(gs, -0.5),
                                         [np.zeros(n), np.zeros(n)], fib)
    return pt.build_partial_tube(spec)


def helix_phi(gs, p0=-2.0, amp=0.3):
    return ScalarAlongCurve.from_function(gs, lambda s: p0 - amp * np.sin(s),
                                          lambda s: -amp * np.cos(s), lambda s: amp * np.sin(s))


def helix_tube(n, p0=-2.0, b0=(-1.0, 0.5), off=-3.0, zeta=False):
    """Generic tube over a helix: non-constant phi, non-zero beta."""
    gs = ParamGrid.uniform([(0.0, 3.0)], (n,))
    curve = integrate_frame([0.6, 0.3], [0, 0, 0], np.eye(3), grid=gs)
    phi = helix_phi(gs, p0)
    betas = solve_combescure_along_curve(curve, phi, list(b0))
    gt = ParamGrid.uniform([(0.0, 2.5)], (n,))
    t = gt.axis(0)
    fib = ImmersedGrid(gt, 0.7 * np.stack([off + np.cos(t), 0.5 * np.sin(t)], -1))
    ev = pt.build_partial_tube(pt.PartialTubeSpec.from_curve(curve, phi, betas, fib))
    if not zeta:
        return ev
    dt = np.stack([-np.sin(t), 0.5 * np.cos(t)], -1)
    z = np.stack([-dt[:, 1], dt[:, 0]], -1)
    return ev, z / np.linalg.norm(z, axis=-1)[:, None]


def wavy_tube(n):
    """Tube over a curve with non-constant curvature and a second generic phi."""
    gs = ParamGrid.uniform([(0.0, 2.5)], (n,))
    k1 = ScalarAlongCurve.from_function(gs, lambda s: 0.6 + 0.1 * np.cos(s), lambda s: -0.1 * np.sin(s))
    curve = integrate_frame([k1, 0.3], [0, 0, 0], np.eye(3), grid=gs)
    phi = ScalarAlongCurve.from_function(gs, lambda s: -2.0 + 0.2 * np.cos(2 * s),
                                         lambda s: -0.4 * np.sin(2 * s), lambda s: -0.8 * np.cos(2 * s))
    betas = solve_combescure_along_curve(curve, phi, [-1.0, 0.5])
    gt = ParamGrid.uniform([(0.0, 2.0)], (n,))
    t = gt.axis(0)
    fib = ImmersedGrid(gt, np.stack([-2.0 + 0.6 * np.cos(t), 0.4 * np.sin(t)], -1))
    return pt.build_partial_tube(pt.PartialTubeSpec.from_curve(curve, phi, betas, fib))


def sphere_curve_gauss_tube(n):
    gs = ParamGrid.uniform([(0.0, 1.5)], (n,))
    curve = integrate_sphere_frame([ScalarAlongCurve.constant(gs, 0.8)], [1, 0, 0], [[0, 1, 0], [0, 0, 1]], gs)
    phi = ScalarAlongCurve.from_function(gs, lambda s: 1.5 + 0.3 * np.sin(s), lambda s: 0.3 * np.cos(s))
    betas = solve_combescure_along_curve(curve, phi, [-1.0])
    gy = ParamGrid.uniform([(-0.6, 0.6)], (n,))
    fiber = ImmersedGrid(gy, gy.axis(0)[:, None])
    return en.build_gauss_tube(curve, phi, betas, fiber)


def round_gauss_tube(n, s_span=(-0.8, 0.8)):
    N, g0 = en.round_sphere_net((n, n), [(0.0, 2 * np.pi), s_span], periodic=True)
    S = N.grid.mesh()[-1]
    return en.gauss_tube_from_grid(N, g0, v0=np.cos(S), rho=np.ones_like(S))


def example_triple(grid, a=0.7):
    """gamma = (0, 0, s), alpha = a, beta = sin s."""
    return en.EnneperTriple.from_functions(
        grid, lambda s: np.stack([0 * s, 0 * s, s], -1), lambda s: np.stack([0 * s, 0 * s, 1 + 0 * s], -1),
        lambda s: a + 0 * s, lambda s: 0 * s, np.sin, np.cos)


def observed_order(r_coarse, r_fine, ratio=2.0):
    return float(np.log(r_coarse / r_fine) / np.log(ratio))


@pytest.fixture(scope="session")
def cyclide64():
    return cyclide(64)


@pytest.fixture(scope="session")
def helix64():
    return helix_tube(64)


# ---------------------------------------------------------------- acceptance summary

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    ok = rep.passed and CRITERIA.get(number, (True, title))[0]
    CRITERIA[number] = (ok, title)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, title = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
