"""Hypersurfaces of Enneper type built from a Gauss map N: M0 x I -> S^n.

Planar-leaf case: N is a Ribaucour partial tube over a curve in S^n with
polar metric  d sigma^2 = v0^2 d sigma0^2 + rho^2 ds^2,  the support function

    gamma(x, s) = v0 (U(x) + int_0^s V rho / v0 d tau)

and the Gauss parametrization  f = gamma N + N_* grad gamma,  whose shape
operator is  A = -P^-1,  P = Hess gamma + gamma I  (both w.r.t. d sigma^2).

General case: a triple (gamma(s), alpha(s), beta(s)) subject to

    <gamma', N> + alpha' = beta rho

gives  f = gamma + alpha N + beta rho^-1 N_* d_s,  whose leaves lie on the
spheres S(gamma(s), sqrt(alpha^2 + beta^2)) at constant angle.

Grids are products (fiber axes, s); the s axis is always the last one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import geometry as geo
from . import verify
from .curves import SampledCurveFrame, ScalarAlongCurve
from .numerics import ImmersedGrid, ParamGrid, grid_diff, quadrature, rk4_integrate
from .ribaucour import (EmptyResultError, RibaucourResult, build_combescure, inversion_data,
                        ribaucour_transform, ribaucour_transform_spaceform)

log = logging.getLogger(__name__)


class GaussTubeError(ValueError):
    """Samples do not form a valid Gauss tube."""


class TripleError(ValueError):
    """An Enneper triple violates its constraint or a hypothesis."""


class InversionPreconditionError(ValueError):
    pass


# ---------------------------------------------------------------- Gauss tubes

@dataclass
class GaussTube:
    N: ImmersedGrid
    v0: np.ndarray              # warping of the E0 block w.r.t. fiber_metric
    rho: np.ndarray             # sqrt of the ds^2 coefficient
    phi_sph: np.ndarray         # -rho^-1 d_s log v0
    fiber_metric: np.ndarray    # counts0 + (d0, d0)
    residuals: dict = field(default_factory=dict)
    spherical: bool = True

    @property
    def nu(self) -> np.ndarray:
        """Same samples as ``rho`` (the s-direction metric coefficient)."""
        return self.rho

    @property
    def grid(self) -> ParamGrid:
        return self.N.grid

    @property
    def d0(self) -> int:
        return self.N.grid.ndim - 1

    @property
    def s(self) -> np.ndarray:
        return self.N.grid.axis(self.N.grid.ndim - 1)

    @property
    def s_grid(self) -> ParamGrid:
        return self.N.grid.sub([self.N.grid.ndim - 1])

    @property
    def mask(self) -> np.ndarray:
        return self.N.mask


def round_sphere_net(counts, spans, n: int = 2, periodic=False):
    """Polar coordinates on S^n, s the latitude:  N = (cos s omega(x), sin s).

    n = 2: omega = (cos x, sin x); n = 3: omega(x1, x2) the standard
    spherical coordinates on S^2.  Returns the grid and the unit-curvature
    fiber metric (dx^2, or dx1^2 + sin^2 x1 dx2^2)."""
    if n not in (2, 3):
        raise ValueError("round_sphere_net supports n = 2 or 3")
    if isinstance(periodic, (tuple, list)):
        per = tuple(bool(q) for q in periodic)
    else:
        per = (False,) * (n - 2) + (bool(periodic), False)
    nfib = n - 1
    grid = ParamGrid.uniform(spans, counts, periodic=per, factors=(tuple(range(nfib)), (nfib,)))
    M = grid.mesh()
    s = M[-1]
    if n == 2:
        x = M[0]
        vals = np.stack([np.cos(s) * np.cos(x), np.cos(s) * np.sin(x), np.sin(s)], axis=-1)
        g0 = np.ones(grid.counts[:1] + (1, 1))
    else:
        a, b = M[0], M[1]
        om = np.stack([np.sin(a) * np.cos(b), np.sin(a) * np.sin(b), np.cos(a)], axis=-1)
        vals = np.concatenate([np.cos(s)[..., None] * om, np.sin(s)[..., None]], axis=-1)
        a0 = grid.axis(0)[:, None] * np.ones(grid.counts[1])[None, :]
        g0 = np.zeros(grid.counts[:2] + (2, 2))
        g0[..., 0, 0] = 1.0
        g0[..., 1, 1] = np.sin(a0) ** 2
    return ImmersedGrid(grid, vals), g0


def _polar_data(N: ImmersedGrid, fiber_metric):
    grid = N.grid
    d = grid.ndim
    d0 = d - 1
    g = geo.induced_metric(N)
    g0 = np.asarray(fiber_metric, dtype=float)
    g0 = g0.reshape(g0.shape[:d0] + (1,) + g0.shape[-2:])
    blk = g[..., :d0, :d0]
    with np.errstate(all="ignore"):
        v0sq = np.einsum("...ii->...", np.linalg.solve(np.broadcast_to(g0, blk.shape), blk)) / d0
    v0 = np.sqrt(v0sq)
    rho = np.sqrt(g[..., d0, d0])
    with np.errstate(all="ignore"):
        cross = np.abs(g[..., :d0, d0]) / np.sqrt(np.diagonal(blk, axis1=-2, axis2=-1) * g[..., d0, d0][..., None])
        conf = np.max(np.abs(blk - v0sq[..., None, None] * g0), axis=(-1, -2)) / v0sq
        phi = -grid_diff(np.log(v0), grid, d0) / rho
    return g, v0, rho, phi, np.max(cross, axis=-1), conf


def _nanmax(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.nanmax(a)) if np.isfinite(a).any() else float("nan")


def gauss_tube_from_grid(N: ImmersedGrid, fiber_metric=None, C: float = verify.DEFAULT_C,
                         require_spherical: bool = True, v0=None, rho=None) -> GaussTube:
    """Extract the polar data (v0, rho, phi) of a sampled map into S^n and
    check the Gauss-tube invariants.

    ``fiber_metric`` is the metric d sigma0^2 on the fiber coordinates
    (default: the Euclidean one).  Closed-form ``v0`` / ``rho`` are compared
    against the extracted samples when given and then used in their place.  ``require_spherical=False``
    accepts nets whose E0 leaves are not spherical (general Enneper case);
    the orthogonality of the net is always required.
    """
    grid = N.grid
    d = grid.ndim
    if len(grid.factors) != 2 or grid.factors[1] != (d - 1,):
        raise GaussTubeError("Gauss tube grids are products M0 x I with the s axis last")
    d0 = d - 1
    fin = N.mask
    unit = _nanmax(np.where(fin, np.abs(np.linalg.norm(N.values, axis=-1) - 1.0), np.nan))
    if not unit <= 1e-10:
        raise GaussTubeError(f"samples leave the unit sphere: {unit:.3e}")
    if fiber_metric is None:
        fiber_metric = np.broadcast_to(np.eye(d0), grid.counts[:d0] + (d0, d0))
    g, v0e, rhoe, phi, cross, conf = _polar_data(N, fiber_metric)
    tol = verify.tolerance(grid, C)
    res = {"unit": unit, "cross_block": _nanmax(cross)}
    if d0 > 1:
        res["fiber_conformal"] = _nanmax(conf)
    if v0 is not None:
        res["v0_match"] = _nanmax(np.abs(v0e - v0) / np.abs(v0))
    if rho is not None:
        res["rho_match"] = _nanmax(np.abs(rhoe - rho) / np.abs(rho))
    axes0 = tuple(range(d0))
    with np.errstate(all="ignore"):
        spread = np.nanmax(phi, axis=axes0) - np.nanmin(phi, axis=axes0)
    res["phi_slice_variation"] = _nanmax(spread) / max(1.0, _nanmax(np.abs(phi)))
    log.info("Gauss tube: %s", ", ".join(f"{k}={v:.3e}" for k, v in res.items()))
    if not res["cross_block"] <= tol:
        raise GaussTubeError(f"net not orthogonal for the metric induced by N: cross block {res['cross_block']:.3e}")
    for key in ("v0_match", "rho_match"):
        if key in res and not res[key] <= tol:
            raise GaussTubeError(f"{key} residual {res[key]:.3e} exceeds {tol:.3e}")
    if require_spherical:
        if d0 > 1 and not res["fiber_conformal"] <= tol:
            raise GaussTubeError(f"E0 block not conformal to the fiber metric: {res['fiber_conformal']:.3e}")
        if not res["phi_slice_variation"] <= tol:
            raise GaussTubeError("not a valid Gauss tube: phi varies along the E0 leaves by "
                                 f"{res['phi_slice_variation']:.3e} > {tol:.3e}")
    # closed forms that passed the comparison replace the FD extraction
    if v0 is not None:
        v0e = np.broadcast_to(np.asarray(v0, dtype=float), grid.counts).copy()
    if rho is not None:
        rhoe = np.broadcast_to(np.asarray(rho, dtype=float), grid.counts).copy()
    return GaussTube(N, v0e, rhoe, phi, np.asarray(fiber_metric, dtype=float), res, require_spherical)


def build_gauss_tube(curve: SampledCurveFrame, phi: ScalarAlongCurve, betas, fiber: ImmersedGrid,
                     C: float = verify.DEFAULT_C) -> GaussTube:
    """Ribaucour partial tube in S^n over a unit-speed curve on S^n.

    For every fiber node y the Combescure data (phi, b + Psi(y)) on the curve
    go through the space-form transform with c = 1; the transforms are
    stacked into N(y, s).  Irregular nodes are NaN.
    """
    if curve.c != 1.0:
        raise GaussTubeError("the base curve must lie on the unit sphere (integrate_sphere_frame)")
    off = float(np.max(np.abs(np.linalg.norm(curve.gamma, axis=1) - 1.0)))
    if off > 1e-8:
        raise GaussTubeError(f"base curve leaves the unit sphere: {off:.3e}")
    k = fiber.m
    if k > curve.xi.shape[1]:
        raise GaussTubeError("fiber dimension exceeds the number of normals tangent to the sphere")
    coeffs = np.stack([b.values if isinstance(b, ScalarAlongCurve) else np.broadcast_to(np.asarray(b, dtype=float), curve.s.shape)
                       for b in betas], axis=1)
    b = np.einsum("ni,nim->nm", coeffs, curve.xi[:, :coeffs.shape[1]])
    grad_phi = phi.d()[:, None] * curve.T
    base = ImmersedGrid(curve.grid, curve.gamma)
    g0 = fiber.grid
    grid = ParamGrid.product(g0, curve.grid)
    m = curve.m
    vals = np.full(grid.counts + (m,), np.nan)
    res_ii, comb, quad = [], [], []
    for idx in np.ndindex(*g0.counts):
        y = fiber.values[idx]
        if not np.all(np.isfinite(y)):
            continue
        beta = b + np.einsum("k,nkm->nm", y, curve.xi[:, :k])
        data = build_combescure(base, phi.values, beta, grad_phi=grad_phi, c=1.0)
        try:
            r = ribaucour_transform_spaceform(data, 1.0)
        except EmptyResultError:
            continue
        vals[idx] = np.where(r.regular_mask[:, None], r.f_tilde.values, np.nan)
        res_ii.append(r.residual_ii)
        comb.append(data.combescure_residual)
        nv = np.linalg.norm(r.f_tilde.values[r.regular_mask], axis=1)
        quad.append(float(np.max(np.abs(nv - 1.0))))
    if not res_ii:
        raise EmptyResultError("Gauss tube: every node irregular")
    N = ImmersedGrid(grid, vals)
    tube = gauss_tube_from_grid(N, geo.induced_metric(fiber), C)
    tube.residuals.update(ribaucour_ii=_nanmax(res_ii), combescure=_nanmax(comb), quadric=_nanmax(quad))
    return tube


# ---------------------------------------------------------------- planar leaves

@dataclass
class SupportData:
    U: np.ndarray
    V: np.ndarray
    gamma: np.ndarray
    hess: np.ndarray            # coordinate Hessian w.r.t. d sigma^2
    P: np.ndarray               # coordinate endomorphism g^-1 Hess + gamma I
    mixed_residual: float


def _on_fiber(value, tube: GaussTube):
    d0 = tube.d0
    shape0 = tube.grid.counts[:d0]
    if callable(value):
        mesh0 = np.meshgrid(*[tube.grid.axis(a) for a in range(d0)], indexing="ij")
        value = value(*mesh0)
    return np.broadcast_to(np.asarray(value, dtype=float), shape0).copy()


def _on_s(value, tube: GaussTube):
    s = tube.s
    if isinstance(value, ScalarAlongCurve):
        return value.values
    if callable(value):
        value = value(s)
    return np.broadcast_to(np.asarray(value, dtype=float), s.shape).copy()


def _anchor(I, s, s_anchor):
    """Subtract the running integral at s_anchor (linear interpolation)."""
    if not (s[0] <= s_anchor <= s[-1]):
        return I
    j = min(int(np.searchsorted(s, s_anchor, side="right")) - 1, len(s) - 2)
    w = (s_anchor - s[j]) / (s[j + 1] - s[j])
    return I - ((1.0 - w) * I[..., j] + w * I[..., j + 1])[..., None]


def support_function(tube: GaussTube, U, V, s_anchor: float = 0.0) -> SupportData:
    """gamma = v0 (U + int_{s_anchor}^s V rho / v0), P = Hess gamma + gamma I.

    The integral starts at ``s_anchor`` when it lies in the s range, else at
    the first grid node.
    """
    grid = tube.grid
    d = grid.ndim
    d0 = tube.d0
    Ux = _on_fiber(U, tube)
    Vs = _on_s(V, tube)
    integrand = Vs * tube.rho / tube.v0
    I = quadrature(integrand, grid.h[d0], axis=d0)
    I = _anchor(I, tube.s, s_anchor)
    gam = tube.v0 * (Ux[(Ellipsis, None)] + I)
    N = tube.N
    J = geo.jacobian(N)
    H2 = geo.hessian_vectors(N)
    ok = np.all(np.isfinite(J), axis=(-1, -2))
    Js = np.where(ok[..., None, None], J, np.eye(*J.shape[-2:]))
    Gamma = geo.christoffel_from_immersion(Js, H2)
    hess = geo.covariant_hessian(gam, grid, Gamma)
    g = geo.gram(Js)
    P = np.linalg.solve(g, hess) + gam[..., None, None] * np.eye(d)
    _, R = geo.tangent_frame(Js)
    Hon = geo.to_frame(hess, R)
    scale = max(1.0, _nanmax(np.where(ok, np.abs(gam), np.nan)))
    mixed = np.where(ok, np.max(np.abs(Hon[..., :d0, d0]), axis=-1), np.nan) / scale
    mres = _nanmax(mixed)
    log.info("support function: mixed Hessian block %.3e", mres)
    return SupportData(Ux, Vs, gam, hess, P, mres)


def _interior(grid: ParamGrid, margin: int):
    """Index tuple dropping ``margin`` nodes at both ends of non-periodic axes."""
    return tuple(slice(None) if p else slice(margin, c - margin) for c, p in zip(grid.counts, grid.periodic))


@dataclass
class GaussParametrization:
    f: ImmersedGrid
    N: ImmersedGrid
    P: np.ndarray
    A: np.ndarray               # -P^-1 on regular nodes
    regular_mask: np.ndarray
    differential_residual: float          # nodes >= 2 steps from open boundaries
    planar: verify.InvariantReport
    differential_residual_all: float = float("nan")

    @property
    def masked_nodes(self) -> int:
        return int((~self.regular_mask).sum())


def gauss_parametrization(tube: GaussTube, supp: SupportData, C: float = verify.DEFAULT_C,
                          cond_max: float = 1e8) -> GaussParametrization:
    """f = gamma N + N_* grad gamma; nodes with singular P are masked (NaN)."""
    N = tube.N
    grid = N.grid
    d = grid.ndim
    J = geo.jacobian(N)
    ok = np.all(np.isfinite(J), axis=(-1, -2)) & np.isfinite(supp.gamma)
    Js = np.where(ok[..., None, None], J, np.eye(*J.shape[-2:]))
    g = geo.gram(Js)
    dg = geo.scalar_gradient(supp.gamma, grid)
    coords = np.linalg.solve(g, np.where(ok[..., None], dg, 0.0)[..., None])[..., 0]
    f = supp.gamma[..., None] * N.values + np.einsum("...mi,...i->...m", J, coords)
    Ps = np.where(ok[..., None, None], supp.P, np.eye(d))
    # P is only known to O(h^2): singular values below h^2 |P| count as zero
    _, R = geo.tangent_frame(Js)
    Pon = np.einsum("...ij,...jk,...kl->...il", R, Ps, np.linalg.inv(R))
    with np.errstate(all="ignore"):
        sv = np.linalg.svd(Pon, compute_uv=False)
    floor = grid.hmax ** 2 * max(1.0, _nanmax(np.where(ok, sv[..., 0], np.nan)))
    regular = ok & np.all(np.isfinite(sv), axis=-1) & (sv[..., -1] > floor) & (sv[..., 0] < cond_max * sv[..., -1])
    if not regular.any():
        raise EmptyResultError("P singular at every node (the Gauss parametrization degenerates)")
    A = np.where(regular[..., None, None], -np.linalg.inv(np.where(regular[..., None, None], Ps, np.eye(d))), np.nan)
    f = np.where(regular[..., None], f, np.nan)
    fg = ImmersedGrid(grid, f)
    Jf = geo.jacobian(fg)
    pred = np.einsum("...mi,...ij->...mj", J, supp.P)
    with np.errstate(all="ignore"):
        err = np.linalg.norm(Jf - pred, axis=-2) / np.linalg.norm(pred, axis=-2)
    efield = np.where(regular, np.max(err, axis=-1), np.nan)
    dres_all = _nanmax(efield)
    # f is itself built from FD partials, so its FD differential loses an order
    # in the one-sided boundary layer; the headline residual skips two nodes
    # next to open boundaries
    inner = efield[_interior(grid, 2)]
    dres = _nanmax(inner)
    planar = verify.check_planar_leaves(fg, 0, C)
    log.info("Gauss parametrization: %d masked nodes, differential %.3e (%.3e with boundary), planar leaves %.3e",
             int((~regular).sum()), dres, dres_all, planar.max)
    return GaussParametrization(fg, N, supp.P, A, regular, dres, planar, dres_all)


# ---------------------------------------------------------------- general case

@dataclass
class EnneperTriple:
    grid: ParamGrid             # 1-D s grid
    gamma: np.ndarray           # (Ns, m)
    alpha: ScalarAlongCurve
    beta: ScalarAlongCurve
    dgamma: np.ndarray | None = None
    gamma_fn: Callable | None = None
    dgamma_fn: Callable | None = None

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma.shape[0] != self.grid.counts[0]:
            raise TripleError("gamma samples do not match the s grid")

    @classmethod
    def from_functions(cls, grid: ParamGrid, gamma_fn, dgamma_fn, alpha_fn, dalpha_fn, beta_fn, dbeta_fn):
        s = grid.axis(0)
        gam = np.asarray(gamma_fn(s), dtype=float)
        dgam = np.asarray(dgamma_fn(s), dtype=float)
        return cls(grid, gam, ScalarAlongCurve.from_function(grid, alpha_fn, dalpha_fn),
                   ScalarAlongCurve.from_function(grid, beta_fn, dbeta_fn), dgam, gamma_fn, dgamma_fn)

    @property
    def s(self) -> np.ndarray:
        return self.grid.axis(0)

    @property
    def m(self) -> int:
        return self.gamma.shape[1]

    @property
    def R(self) -> np.ndarray:
        return np.hypot(self.alpha.values, self.beta.values)

    @property
    def cos_theta(self) -> np.ndarray:
        return self.alpha.values / self.R

    def gamma_prime(self) -> np.ndarray:
        if self.dgamma is not None:
            return self.dgamma
        return grid_diff(self.gamma, self.grid, 0)

    def dgamma_at(self, s) -> np.ndarray:
        if self.dgamma_fn is not None:
            return np.asarray(self.dgamma_fn(np.asarray(s, dtype=float)), dtype=float)
        dg = self.gamma_prime()
        return np.array([np.interp(s, self.s, dg[:, i]) for i in range(self.m)])


def _check_s_grid(tube: GaussTube, triple: EnneperTriple):
    sg = tube.s_grid
    if sg.counts != triple.grid.counts or not np.allclose(sg.axis(0), triple.s, rtol=0, atol=1e-12):
        raise TripleError("triple and Gauss tube use different s grids")


def _unit_e1(tube: GaussTube):
    """rho^-1 N_* d_s with the FD error along N removed."""
    d0 = tube.d0
    Ns = grid_diff(tube.N.values, tube.grid, d0)
    Nv = tube.N.values
    Ns = Ns - np.sum(Ns * Nv, axis=-1, keepdims=True) * Nv
    return Ns / np.linalg.norm(Ns, axis=-1, keepdims=True)


def constraint_field(tube: GaussTube, triple: EnneperTriple) -> np.ndarray:
    """<gamma', N> + alpha' - beta rho at every node."""
    _check_s_grid(tube, triple)
    d0 = tube.d0
    ex = (None,) * d0
    gp = triple.gamma_prime()[ex]
    return np.sum(gp * tube.N.values, axis=-1) + triple.alpha.d()[ex] - triple.beta.values[ex] * tube.rho


def constraint_residual(tube: GaussTube, triple: EnneperTriple) -> float:
    return _nanmax(np.abs(constraint_field(tube, triple)))


@dataclass
class EnneperSurface:
    f: ImmersedGrid
    N: ImmersedGrid
    triple: EnneperTriple
    centers: np.ndarray          # per node, gamma(s)
    radii: np.ndarray            # per node, sqrt(alpha^2 + beta^2)
    cos_theta: np.ndarray        # per node, alpha / R
    constraint_residual: float
    distance_residual: float
    angle_spread: float
    angle_deviation: float


def enneper_parametrization(tube: GaussTube, triple: EnneperTriple, C: float = verify.DEFAULT_C,
                            check: bool = True) -> EnneperSurface:
    """f = gamma + alpha N + beta rho^-1 N_* d_s, with the leaf-sphere checks."""
    _check_s_grid(tube, triple)
    tol = verify.tolerance(tube.grid, C)
    cres = constraint_residual(tube, triple)
    if check and not cres <= tol:
        raise TripleError(f"constraint <gamma', N> + alpha' = beta rho violated: residual {cres:.3e} > {tol:.3e}")
    d0 = tube.d0
    ex = (None,) * d0
    u = _unit_e1(tube)
    al = triple.alpha.values[ex][..., None]
    be = triple.beta.values[ex][..., None]
    cen = np.broadcast_to(triple.gamma[ex], tube.N.values.shape)
    f = cen + al * tube.N.values + be * u
    fg = ImmersedGrid(tube.grid, f)
    R = np.broadcast_to(triple.R[ex], tube.grid.counts)
    ct = np.broadcast_to(triple.cos_theta[ex], tube.grid.counts)
    v = f - cen
    dist = np.linalg.norm(v, axis=-1)
    with np.errstate(all="ignore"):
        cosv = np.sum(v * tube.N.values, axis=-1) / dist
    axes0 = tuple(range(d0))
    dres = _nanmax(np.abs(dist - R) / R)
    spread = _nanmax(np.nanstd(cosv, axis=axes0))
    dev = _nanmax(np.abs(cosv - ct))
    log.info("Enneper parametrization: constraint %.3e, distance %.3e, angle spread %.3e",
             cres, dres, spread)
    return EnneperSurface(fg, tube.N, triple, np.array(cen), np.array(R), np.array(ct),
                          cres, dres, spread, dev)


def _as_lambda(lam, grid: ParamGrid) -> ScalarAlongCurve:
    if isinstance(lam, ScalarAlongCurve):
        return lam
    if callable(lam):
        return ScalarAlongCurve.from_function(grid, lam)
    return ScalarAlongCurve.constant(grid, float(lam))


def deform_family(triple: EnneperTriple, lam, alpha0=None, gamma0=None) -> EnneperTriple:
    """beta~ = lam beta, alpha~' = lam alpha', gamma~' = lam gamma'.

    Integration constants default to the input values at the first node; a
    constant lam scales the increments exactly, otherwise the running
    integrals use Simpson quadrature.  Derivatives are stored exactly, so the
    constraint residual scales by lam.
    """
    lam = _as_lambda(lam, triple.grid)
    lv = lam.values
    if not (np.all(lv > 0) or np.all(lv < 0)) or np.min(np.abs(lv)) < 1e-12 * max(np.max(np.abs(lv)), 1e-300):
        raise TripleError("lambda vanishes on the grid")
    h = triple.grid.h[0]
    a0 = triple.alpha.values[0] if alpha0 is None else float(alpha0)
    g0 = triple.gamma[0] if gamma0 is None else np.asarray(gamma0, dtype=float)
    da = lv * triple.alpha.d()
    dg = lv[:, None] * triple.gamma_prime()
    if np.all(lv == lv[0]):
        a = a0 + lv[0] * (triple.alpha.values - triple.alpha.values[0])
        gam = g0 + lv[0] * (triple.gamma - triple.gamma[0])
    else:
        a = a0 + quadrature(da, h)
        gam = g0 + quadrature(dg, h, axis=0)
    db = lam.d() * triple.beta.values + lv * triple.beta.d()
    out = EnneperTriple(triple.grid, gam, ScalarAlongCurve(triple.grid, a, da),
                        ScalarAlongCurve(triple.grid, lv * triple.beta.values, db), dg)
    return out


@dataclass
class Normalization:
    triple: EnneperTriple
    lam: ScalarAlongCurve
    through_point_residual: float     # max | |gamma|^2 - alpha^2 - beta^2 | / max(1, R^2)
    e: np.ndarray | None = None


def _normalize_once(triple: EnneperTriple, e):
    m = triple.m
    grid = triple.grid
    s0, s1 = grid.lo[0], grid.hi[0]
    al, be = triple.alpha, triple.beta

    def lam_prime(s, G, a, lam):
        b = be.at(s)
        return (np.dot(G, triple.dgamma_at(s)) - a * al.d_at(s) - lam * b * be.d_at(s)) / b ** 2

    def rhs(s, y):
        G, a, lam = y[:m], y[m], y[m + 1]
        dg = triple.dgamma_at(s)
        return np.concatenate([lam * dg, [lam * al.d_at(s), lam_prime(s, G, a, lam)]])

    y0 = np.concatenate([be.at(s0) * e, [0.0, 1.0]])
    ys = rk4_integrate(rhs, y0, (s0, s1), grid.counts[0] - 1, project_every=10 ** 9)
    G, a, lam = ys[:, :m], ys[:, m], ys[:, m + 1]
    if not (np.all(lam > 0) or np.all(lam < 0)):
        raise TripleError("lambda crosses zero during the normalization")
    dlam = np.array([lam_prime(si, Gi, ai, li) for si, Gi, ai, li in zip(triple.s, G, a, lam)])
    return G, a, lam, dlam


def _candidate_directions(triple: EnneperTriple):
    m = triple.m
    out = [np.eye(m)[i] * sg for sg in (1.0, -1.0) for i in range(m)]
    t = triple.gamma_prime()[0]
    if np.linalg.norm(t) > 0:
        out += [t / np.linalg.norm(t), -t / np.linalg.norm(t)]
    return out


def normalize_through_point(triple: EnneperTriple, e=None) -> Normalization:
    """Choose lambda so that every leaf sphere passes through the origin.

    State (G, a, lam) with  G' = lam gamma',  a' = lam alpha',
    lam' = (<G, gamma'> - a alpha' - lam beta beta') / beta^2,
    from lam = 1, a = 0, G = beta(s0) e at the first node, e a unit vector.
    The invariant |G|^2 - a^2 - lam^2 beta^2 vanishes initially and is
    conserved.  Output (G, a, lam beta).

    With ``e=None`` the coordinate axes and +-gamma'(s0) are tried in a fixed
    order and the direction keeping lam furthest from zero (relative to its
    maximum) is used.
    """
    bvals = triple.beta.values
    scale = max(float(np.max(np.abs(bvals))), 1e-300)
    if np.min(np.abs(bvals)) < 1e-12 * scale or not (np.all(bvals > 0) or np.all(bvals < 0)):
        raise TripleError("beta vanishes on the grid: some leaf degenerates to a round sphere")
    if e is not None:
        e = np.asarray(e, dtype=float)
        e = e / np.linalg.norm(e)
        G, a, lam, dlam = _normalize_once(triple, e)
    else:
        best = None
        for cand in _candidate_directions(triple):
            try:
                sol = _normalize_once(triple, cand)
            except TripleError:
                continue
            q = float(np.min(np.abs(sol[2])) / np.max(np.abs(sol[2])))
            if best is None or q > best[0]:
                best = (q, cand, sol)
        if best is None:
            raise TripleError("lambda crosses zero for every candidate initial direction")
        _, e, (G, a, lam, dlam) = best
    grid = triple.grid
    al, be = triple.alpha, triple.beta
    lamc = ScalarAlongCurve(grid, lam, dlam)
    dg = lam[:, None] * triple.gamma_prime()
    da = lam * al.d()
    bt = lam * be.values
    dbt = dlam * be.values + lam * be.d()
    out = EnneperTriple(grid, G, ScalarAlongCurve(grid, a, da), ScalarAlongCurve(grid, bt, dbt), dg)
    inv = np.abs(np.sum(G * G, axis=1) - a ** 2 - bt ** 2) / max(1.0, float(np.max(a ** 2 + bt ** 2)))
    res = float(np.max(inv))
    log.info("normalization through the origin (e = %s): residual %.3e, lambda in [%.3f, %.3f]",
             np.array2string(e, precision=3), res, float(lam.min()), float(lam.max()))
    return Normalization(out, lamc, res, e)


# ---------------------------------------------------------------- leaf spheres and inversion

def common_point(centers, radii):
    """Least-squares point on all spheres S(c_j, r_j) (from the differences of
    |p - c_j|^2 = r_j^2).  Returns (p, max relative miss, rank)."""
    c = np.asarray(centers, dtype=float)
    r = np.asarray(radii, dtype=float)
    rhs = np.sum(c * c, axis=1) - r ** 2
    A = 2.0 * (c - c.mean(axis=0))
    b = rhs - rhs.mean()
    p, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    miss = np.abs(np.linalg.norm(p - c, axis=1) - r) / r
    return p, float(np.max(miss)), int(rank)


def leaf_sphere_contains(f: ImmersedGrid, p, centers, radii, which_factor: int = 0) -> dict:
    """Per-leaf checks for given per-node sphere data: leaf points on the
    sphere, and p on the sphere (both relative to the radius)."""
    p = np.asarray(p, dtype=float)
    memb, through = [], []
    for idx, _ in geo.leaf_index_sets(f.grid, which_factor):
        pts = f.values[idx].reshape(-1, f.m)
        ok = np.all(np.isfinite(pts), axis=1)
        c = np.asarray(centers)[idx].reshape(-1, f.m)[ok]
        r = np.asarray(radii)[idx].ravel()[ok]
        memb.append(float(np.max(np.abs(np.linalg.norm(pts[ok] - c, axis=1) - r) / r)))
        through.append(float(np.max(np.abs(np.linalg.norm(p - c, axis=1) - r) / r)))
    return {"membership": max(memb), "through_point": max(through)}


def _pencil_admits(pts, p, tol) -> float:
    """Miss of p from the closest sphere containing the leaf ``pts`` (0 when
    the leaf spans a lower-dimensional affine subspace that does not contain p,
    since then some sphere of the pencil passes through p)."""
    mid = pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(pts - mid, full_matrices=False)
    r = int(np.sum(sv > 1e-9 * max(sv[0], 1e-300)))
    m = pts.shape[1]
    fit = verify.fit_leaf_sphere(pts)
    if "plane-like" in fit.flags:
        return 0.0
    if r < m:
        B = vt[:r]
        off = (p - mid) - B.T @ (B @ (p - mid))
        if np.linalg.norm(off) > tol * fit.radius:
            return 0.0
    return abs(float(np.linalg.norm(p - fit.center)) - fit.radius) / fit.radius


@dataclass
class InversionResult:
    f: ImmersedGrid
    transform: RibaucourResult
    closed_form_residual: float
    planar: verify.InvariantReport
    precondition: dict


def planarize_by_inversion(f, p=None, centers=None, radii=None, radius: float = 1.0,
                           C: float = verify.DEFAULT_C, which_factor: int = 0) -> InversionResult:
    """Invert a hypersurface whose leaf spheres pass through p, via the
    Ribaucour data of the inversion in S(p, radius); the image has planar leaves.

    ``f`` may be an EnneperSurface, whose leaf spheres are then used; bare
    grids need ``centers`` / ``radii`` or fall back to per-leaf sphere fits.
    """
    if isinstance(f, EnneperSurface):
        centers = f.centers if centers is None else centers
        radii = f.radii if radii is None else radii
        f = f.f
    m = f.m
    p = np.zeros(m) if p is None else np.asarray(p, dtype=float)
    tol = verify.tolerance(f.grid, C)
    vals = f.values[f.mask]
    ext = float(np.max(np.linalg.norm(vals - vals.mean(axis=0), axis=1)))
    dmin = float(np.min(np.linalg.norm(vals - p, axis=1)))
    if dmin <= 1e-8 * max(ext, 1.0):
        raise InversionPreconditionError(f"hypersurface passes through the inversion center (distance {dmin:.3e})")
    if centers is not None:
        pre = leaf_sphere_contains(f, p, centers, radii, which_factor)
    else:
        miss = []
        for idx, _ in geo.leaf_index_sets(f.grid, which_factor):
            pts = f.values[idx].reshape(-1, m)
            pts = pts[np.all(np.isfinite(pts), axis=1)]
            if len(pts) >= m + 2:
                miss.append(_pencil_admits(pts, p, tol))
        pre = {"through_point": max(miss) if miss else 0.0}
    for k, v in pre.items():
        if not v <= tol:
            raise InversionPreconditionError(f"leaf spheres: {k} residual {v:.3e} exceeds {tol:.3e}")
    data = inversion_data(f, p, radius)
    tr = ribaucour_transform(data)
    v = f.values - p
    closed = p + radius ** 2 * v / np.sum(v * v, axis=-1, keepdims=True)
    ok = tr.regular_mask
    cres = _nanmax(np.where(ok, np.linalg.norm(tr.f_tilde.values - closed, axis=-1), np.nan))
    planar = verify.check_planar_leaves(tr.f_tilde, which_factor, C)
    log.info("inversion: closed-form residual %.3e, planar leaves %.3e", cres, planar.max)
    return InversionResult(tr.f_tilde, tr, cres, planar, pre)


def inverted_gauss_map(f: ImmersedGrid, N: ImmersedGrid, p=None) -> ImmersedGrid:
    """Unit normal of the inversion of f about p: the reflection of N in the
    direction f - p."""
    p = np.zeros(f.m) if p is None else np.asarray(p, dtype=float)
    u = f.values - p
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    Nt = N.values - 2.0 * np.sum(N.values * u, axis=-1, keepdims=True) * u
    return ImmersedGrid(f.grid, Nt)


def gauss_map_of(f: ImmersedGrid, orient=None) -> ImmersedGrid:
    """FD unit normal of a hypersurface, optionally oriented along ``orient``."""
    n = geo.hypersurface_normal(geo.jacobian(f))
    if orient is not None:
        sgn = np.sign(np.sum(n * np.asarray(orient), axis=-1))
        n = n * np.where(sgn == 0, 1.0, sgn)[..., None]
    return ImmersedGrid(f.grid, n)


def extract_triple(f: ImmersedGrid, tube: GaussTube, rank_tol: float = 1e-8):
    """Recover (gamma, alpha, beta) of an Enneper-type hypersurface with Gauss
    map tube.N by solving c + alpha N + beta u = f on each leaf (u the unit
    E1 direction of N).  Round leaves leave the triple undetermined and raise.
    Returns the triple (FD derivatives) and the max relative leaf residual."""
    d0 = tube.d0
    m = f.m
    u = _unit_e1(tube)
    ns = tube.grid.counts[d0]
    gam = np.zeros((ns, m))
    al = np.zeros(ns)
    be = np.zeros(ns)
    worst = 0.0
    for j in range(ns):
        idx = (slice(None),) * d0 + (j,)
        pts = f.values[idx].reshape(-1, m)
        Nl = tube.N.values[idx].reshape(-1, m)
        ul = u[idx].reshape(-1, m)
        ok = np.all(np.isfinite(pts) & np.isfinite(Nl) & np.isfinite(ul), axis=1)
        npt = int(ok.sum())
        A = np.zeros((npt * m, m + 2))
        A[:, :m] = np.tile(np.eye(m), (npt, 1))
        A[:, m] = Nl[ok].ravel()
        A[:, m + 1] = ul[ok].ravel()
        sol, _, _, sv = np.linalg.lstsq(A, pts[ok].ravel(), rcond=None)
        if sv[-1] < rank_tol * sv[0]:
            raise TripleError(f"leaf {j} is round: its sphere is not determined")
        gam[j], al[j], be[j] = sol[:m], sol[m], sol[m + 1]
        r = np.linalg.norm(A @ sol - pts[ok].ravel()) / np.sqrt(npt)
        worst = max(worst, float(r / np.hypot(al[j], be[j])))
    sg = tube.s_grid
    tr = EnneperTriple(sg, gam, ScalarAlongCurve(sg, al), ScalarAlongCurve(sg, be))
    log.info("extracted triple: leaf residual %.3e", worst)
    return tr, worst
