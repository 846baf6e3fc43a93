"""Ribaucour partial tubes

    f(x0, x1) = f1(x1) - 2 nu phi F,   F = f1_* grad phi + beta + Psi(f0(x0)),

over a base f1 carrying a parallel orthonormal normal frame xi_1..xi_k
(Psi(y) = sum y_i xi_i) and a fiber f0: M0 -> R^k.  Product grids put the
fiber axes first, then the base axes; factor 0 is E0 (fiber directions).

Tangent tensors on the base (Phi, D, shape operator blocks along E1) are
expressed in the orthonormal frame of f1 from QR of its partials; for a curve
base parametrized by arc length that frame is just T.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .curves import SampledCurveFrame, ScalarAlongCurve
from .numerics import ImmersedGrid, ParamGrid, grid_diff

log = logging.getLogger(__name__)

COND_MAX = 1e8


def _well_conditioned(D) -> np.ndarray:
    """cond(D) < 1e8 and D not numerically zero (a 1x1 D always has cond 1)."""
    with np.errstate(all="ignore"):
        sv = np.linalg.svd(D, compute_uv=False)
    ok = np.all(np.isfinite(sv), axis=-1)
    smin, smax = sv[..., -1], sv[..., 0]
    return ok & (smin > 1e-8) & (smax < COND_MAX * smin)


def _lift0(a, d0: int, d1: int):
    """Insert d1 singleton base axes after the d0 fiber axes of ``a``."""
    a = np.asarray(a)
    return a.reshape(a.shape[:d0] + (1,) * d1 + a.shape[d0:])


class TubeError(RuntimeError):
    pass


class PreconditionError(TubeError):
    """The input does not satisfy the hypotheses of the reconstruction."""


@dataclass
class PartialTubeSpec:
    f1: ImmersedGrid
    xi: np.ndarray                 # counts1 + (k, m)
    f0: ImmersedGrid               # fiber into R^k
    phi: np.ndarray                # counts1
    beta: np.ndarray               # counts1 + (m,)
    grad_phi: np.ndarray | None = None
    curve: SampledCurveFrame | None = None
    dphi: np.ndarray | None = None     # phi' along an arc-length curve base
    d2phi: np.ndarray | None = None
    substantial: bool = True
    frame_residuals: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.xi.shape[-2]

    @property
    def m(self) -> int:
        return self.f1.m

    @classmethod
    def from_curve(cls, curve: SampledCurveFrame, phi: ScalarAlongCurve, beta, fiber: ImmersedGrid,
                   k: int | None = None, normalize: bool = True):
        """Tube over an arc-length curve; ``beta`` is a list of coefficient
        functions along xi_1..xi_{m-1} or an ambient (N, m) array."""
        if k is None:
            k = fiber.m
        if k > curve.m - 1:
            raise TubeError("fiber dimension exceeds the normal rank of the curve")
        if isinstance(beta, (list, tuple)):
            coeffs = np.stack([b.values if isinstance(b, ScalarAlongCurve) else np.asarray(b, dtype=float)
                               for b in beta], axis=1)
            beta = np.einsum("ni,nim->nm", coeffs, curve.xi[:, :coeffs.shape[1]])
        beta = np.asarray(beta, dtype=float)
        f1 = ImmersedGrid(curve.grid, curve.gamma)
        dphi = phi.d()
        spec = cls(f1, curve.xi[:, :k].copy(), fiber, phi.values.copy(), beta,
                   grad_phi=dphi[:, None] * curve.T, curve=curve, dphi=dphi, d2phi=phi.d2())
        spec.frame_residuals = frame_residuals(spec)
        return normalize_fiber(spec) if normalize else spec

    @classmethod
    def from_grid(cls, f1: ImmersedGrid, xi, fiber: ImmersedGrid, phi, beta, grad_phi=None,
                  normalize: bool = True):
        spec = cls(f1, np.asarray(xi, dtype=float), fiber, np.asarray(phi, dtype=float),
                   np.asarray(beta, dtype=float), grad_phi=grad_phi)
        spec.frame_residuals = frame_residuals(spec)
        return normalize_fiber(spec) if normalize else spec


@dataclass
class TubeEvaluation:
    spec: PartialTubeSpec
    f: ImmersedGrid
    F: np.ndarray
    nu: np.ndarray
    phi: np.ndarray
    P: np.ndarray
    D: np.ndarray
    Phi: np.ndarray
    regular_mask: np.ndarray
    Q1: np.ndarray                 # base orthonormal frame, counts1 + (m, d1)
    R1: np.ndarray                 # counts1 + (d1, d1)
    H2on: np.ndarray               # base second partials in the frame, counts1 + (d1, d1, m)

    @property
    def d0(self) -> int:
        return self.spec.f0.grid.ndim

    @property
    def d1(self) -> int:
        return self.spec.f1.grid.ndim


def frame_residuals(spec: PartialTubeSpec) -> dict:
    """Orthonormality, normality and normal-connection parallelism of xi (FD)."""
    xi = spec.xi
    k = spec.k
    G = np.einsum("...im,...jm->...ij", xi, xi)
    J = geo.jacobian(spec.f1)
    Q, _ = geo.tangent_frame(J)
    tang = np.einsum("...km,...mi->...ki", xi, Q)
    par = 0.0
    g1 = spec.f1.grid
    for a in range(g1.ndim):
        dxi = grid_diff(xi, g1, a)
        nrm = np.stack([geo.project_normal(dxi[..., i, :], Q) for i in range(k)], axis=-2)
        scale = np.linalg.norm(J[..., a], axis=-1)[..., None]
        par = max(par, float(np.nanmax(np.linalg.norm(nrm, axis=-1) / scale)))
    return {"orthonormality": float(np.nanmax(np.abs(G - np.eye(k)))),
            "normality": float(np.nanmax(np.abs(tang))),
            "parallel": par}


def normalize_fiber(spec: PartialTubeSpec, tol: float = 1e-9) -> PartialTubeSpec:
    """Replace a non-substantial fiber f0 in v + W by f0 - v in W, absorbing
    Psi(v) into beta and restricting the frame to Psi(W)."""
    vals = spec.f0.values.reshape(-1, spec.f0.m)
    vals = vals[np.all(np.isfinite(vals), axis=1)]
    mid = vals.mean(axis=0)
    _, sv, vt = np.linalg.svd(vals - mid, full_matrices=False)
    rank = int(np.sum(sv > tol * max(sv[0], 1e-300))) if len(sv) else 0
    if rank >= spec.k:
        spec.substantial = True
        return spec
    W = vt[:rank]                                   # (rank, k) orthonormal rows
    v = mid - W.T @ (W @ mid)                       # offset orthogonal to W
    beta = spec.beta + np.einsum("k,...km->...m", v, spec.xi)
    xi = np.einsum("rk,...km->...rm", W, spec.xi)
    f0 = ImmersedGrid(spec.f0.grid, np.einsum("rk,...k->...r", W, spec.f0.values - v))
    log.info("fiber not substantial (rank %d < %d); offset absorbed into beta", rank, spec.k)
    out = PartialTubeSpec(spec.f1, xi, f0, spec.phi, beta, spec.grad_phi, spec.curve,
                          spec.dphi, spec.d2phi, False)
    out.frame_residuals = frame_residuals(out)
    return out


def _base_geometry(spec: PartialTubeSpec):
    """grad phi (ambient), Hess phi and second partial vectors in the base frame."""
    if spec.curve is not None:
        c = spec.curve
        n = len(c.s)
        Q = c.T[:, :, None]
        R = np.ones((n, 1, 1))
        hess = spec.d2phi[:, None, None]
        H2on = c.acceleration()[:, None, None, :]
        grad = spec.grad_phi
        return grad, hess, H2on, Q, R
    f1 = spec.f1
    J = geo.jacobian(f1)
    H2 = geo.hessian_vectors(f1)
    Q, R = geo.tangent_frame(J)
    g = geo.gram(J)
    if spec.grad_phi is None:
        dphi = geo.scalar_gradient(spec.phi, f1.grid)
        grad = np.einsum("...mi,...i->...m", J, np.linalg.solve(g, dphi[..., None])[..., 0])
    else:
        grad = spec.grad_phi
    Gamma = geo.christoffel_from_immersion(J, H2)
    hess = geo.to_frame(geo.covariant_hessian(spec.phi, f1.grid, Gamma), R)
    Ri = np.linalg.inv(R)
    H2on = np.einsum("...ai,...abm,...bj->...ijm", Ri, H2, Ri)
    return grad, hess, H2on, Q, R


def build_partial_tube(spec: PartialTubeSpec) -> TubeEvaluation:
    """Evaluate the tube on the product grid (fiber axes, base axes).

    Fiber nodes where f0 is not finite are treated as the limit |f0| -> oo,
    where f = f1, P = I and D = I.
    """
    g0, g1 = spec.f0.grid, spec.f1.grid
    grid = ParamGrid.product(g0, g1)
    d0, d1 = g0.ndim, g1.ndim
    m = spec.m
    grad, hess, H2on, Q1, R1 = _base_geometry(spec)
    f0v = spec.f0.values
    fin0 = np.all(np.isfinite(f0v), axis=-1)
    psi = np.tensordot(np.where(fin0[..., None], f0v, 0.0), spec.xi, axes=([-1], [-2]))  # c0+c1+(m,)
    exp0 = (Ellipsis,) + (None,) * d1
    exp1 = (None,) * d0 + (Ellipsis,)
    fin = np.broadcast_to(fin0[exp0], grid.counts)
    F = (grad + spec.beta)[exp1] + psi
    nF = np.sum(F * F, axis=-1)
    with np.errstate(divide="ignore"):
        nu = np.where(fin & (nF > 0), 1.0 / np.where(nF > 0, nF, 1.0), np.where(fin, np.inf, 0.0))
    phi = np.broadcast_to(spec.phi[exp1], grid.counts)
    nus = np.where(np.isfinite(nu), nu, 0.0)
    f1v = np.broadcast_to(spec.f1.values[exp1], grid.counts + (m,))
    f = f1v - 2.0 * (nus * phi)[..., None] * F
    eta = spec.beta[exp1] + psi
    Phi = hess[exp1] - np.einsum("...ijm,...m->...ij", H2on[exp1], eta)
    D = np.eye(d1) - 2.0 * (nus * phi)[..., None, None] * Phi
    P = np.eye(m) - 2.0 * nus[..., None, None] * np.einsum("...a,...b->...ab", F, F)
    scale = max(float(np.nanmax(np.abs(spec.phi))), 1e-300)
    regular = (np.abs(phi) > 1e-12 * scale) & np.isfinite(nu) & np.all(np.isfinite(f), axis=-1)
    regular &= ~fin | (nF > 1e-24)
    regular &= _well_conditioned(np.where(regular[..., None, None], D, np.eye(d1)))
    if not regular.any():
        raise TubeError("whole grid irregular: phi, F or D degenerate everywhere")
    f = np.where(regular[..., None], f, np.nan)
    fg = ImmersedGrid(grid, f)
    log.info("partial tube: %d/%d regular nodes", int(regular.sum()), regular.size)
    return TubeEvaluation(spec, fg, F, nu, phi, P, D, Phi, regular, Q1, R1, H2on)


def predicted_metric(ev: TubeEvaluation) -> np.ndarray:
    """Closed-form block metric 4 nu^2 phi^2 g0 (+) R1^T D^2 R1 in product coordinates."""
    d0, d1 = ev.d0, ev.d1
    g0 = geo.induced_metric(ev.spec.f0)
    exp0 = (Ellipsis,) + (None,) * d1
    exp1 = (None,) * d0 + (Ellipsis,)
    shape = ev.f.grid.counts + (d0 + d1, d0 + d1)
    out = np.zeros(shape)
    fac = 4.0 * np.where(np.isfinite(ev.nu), ev.nu, np.nan) ** 2 * ev.phi ** 2
    out[..., :d0, :d0] = fac[..., None, None] * _lift0(g0, d0, d1)
    R1 = np.broadcast_to(ev.R1[exp1], ev.f.grid.counts + (d1, d1))
    out[..., d0:, d0:] = np.einsum("...ai,...ab,...bc,...cj->...ij", R1, ev.D, ev.D, R1)
    return np.where(ev.regular_mask[..., None, None], out, np.nan)


def differential_residuals(ev: TubeEvaluation) -> dict:
    """FD f_* against the closed forms along both factors:
    f_* X0 = -2 nu phi P Psi(f0_* X0) and f_* X1 = P f1_* D X1 (relative)."""
    d0, d1 = ev.d0, ev.d1
    J = geo.jacobian(ev.f)
    J0 = geo.jacobian(ev.spec.f0)                                        # c0+(k,d0)
    exp0 = (Ellipsis,) + (None,) * d1
    exp1 = (None,) * d0 + (Ellipsis,)
    psiJ0 = np.einsum("...ka,...km->...ma", _lift0(J0, d0, d1), ev.spec.xi[exp1][..., :, :])
    pred0 = -2.0 * (ev.nu * ev.phi)[..., None, None] * np.einsum("...ab,...bi->...ai", ev.P, psiJ0)
    Q1 = np.broadcast_to(ev.Q1[exp1], ev.f.grid.counts + ev.Q1.shape[-2:])
    R1 = np.broadcast_to(ev.R1[exp1], ev.f.grid.counts + (d1, d1))
    pred1 = np.einsum("...ab,...bi,...ij,...jk->...ak", ev.P, Q1, ev.D, R1)
    out = {}
    for name, pred, Jb in (("fiber", pred0, J[..., :d0]), ("base", pred1, J[..., d0:])):
        err = np.linalg.norm(Jb - pred, axis=-2) / np.maximum(np.linalg.norm(pred, axis=-2), 1e-300)
        err = np.where(ev.regular_mask, np.max(err, axis=-1), np.nan)
        out[name] = float(np.nanmax(err))
    return out


def predicted_shape_operators(ev: TubeEvaluation, delta=None, zeta=None) -> dict:
    """Closed-form shape operators of the tube.

    ``zeta``: normals of f0 in R^k (fiber samples c0 + (k,)); the tube normal is
    P Psi(zeta).  ``delta``: normals of f1 orthogonal to the xi frame (base
    samples c1 + (m,)); the tube normal is P delta.  Each entry holds the unit
    normal field, the E0 block in fiber coordinates and the E1 block in the
    base orthonormal frame; cross blocks vanish.
    """
    d0, d1 = ev.d0, ev.d1
    exp0 = (Ellipsis,) + (None,) * d1
    exp1 = (None,) * d0 + (Ellipsis,)
    counts = ev.f.grid.counts
    nu = np.where(np.isfinite(ev.nu), ev.nu, np.nan)
    phi = ev.phi
    Dinv = np.linalg.inv(np.where(ev.regular_mask[..., None, None], ev.D, np.eye(d1)))
    out = {}
    if zeta is not None:
        zeta = np.asarray(zeta, dtype=float)
        f0 = ev.spec.f0
        g0 = geo.induced_metric(f0)
        II0 = np.einsum("...abk,...k->...ab", geo.hessian_vectors(f0), zeta)
        A0 = np.linalg.solve(g0, II0)                                      # c0+(d0,d0)
        psiz = np.tensordot(zeta, ev.spec.xi, axes=([-1], [-2]))           # c0+c1+(m,)
        zF = np.sum(psiz * ev.F, axis=-1)
        E0 = -(_lift0(A0, d0, d1) / (2.0 * nu)[..., None, None] + zF[..., None, None] * np.eye(d0)) / phi[..., None, None]
        Af1 = np.einsum("...ijm,...m->...ij", np.broadcast_to(ev.H2on[exp1], counts + ev.H2on.shape[-3:]), psiz)
        E1 = np.einsum("...ij,...jk->...ik", Dinv, Af1 + 2.0 * (nu * zF)[..., None, None] * ev.Phi)
        normal = np.einsum("...ab,...b->...a", ev.P, psiz)
        out["zeta"] = (normal, E0, E1)
    if delta is not None:
        delta = np.broadcast_to(np.asarray(delta, dtype=float)[exp1], counts + (ev.spec.m,))
        db = np.sum(delta * ev.spec.beta[exp1], axis=-1)
        E0 = np.broadcast_to((-db / phi)[..., None, None] * np.eye(d0), counts + (d0, d0))
        Af1 = np.einsum("...ijm,...m->...ij", np.broadcast_to(ev.H2on[exp1], counts + ev.H2on.shape[-3:]), delta)
        E1 = np.einsum("...ij,...jk->...ik", Dinv, Af1 + 2.0 * (nu * db)[..., None, None] * ev.Phi)
        normal = np.einsum("...ab,...b->...a", ev.P, delta)
        out["delta"] = (normal, E0, E1)
    return out


def fd_shape_operator(f: ImmersedGrid, normal) -> np.ndarray:
    """A = g^-1 II with II_ij = <d_i d_j f, n> (coordinates)."""
    g = geo.induced_metric(f)
    II = np.einsum("...ijm,...m->...ij", geo.hessian_vectors(f), normal)
    with np.errstate(all="ignore"):
        return np.linalg.solve(np.where(np.isfinite(g), g, np.eye(g.shape[-1])), II)


def shape_operator_residuals(ev: TubeEvaluation, predicted: dict, interior: int = 0) -> dict:
    """Relative max deviation of FD shape-operator blocks from the closed forms,
    plus the cross blocks and the tangency of the predicted normals."""
    d0, d1 = ev.d0, ev.d1
    exp1 = (None,) * d0 + (Ellipsis,)
    counts = ev.f.grid.counts
    R1 = np.broadcast_to(ev.R1[exp1], counts + (d1, d1))
    R1i = np.linalg.inv(R1)
    J = geo.jacobian(ev.f)
    sl = tuple(slice(interior, c - interior) for c in counts)
    mask = ev.regular_mask[sl]
    out = {}
    for name, (normal, E0, E1) in predicted.items():
        A = fd_shape_operator(ev.f, normal)
        A0 = A[..., :d0, :d0]
        A1 = np.einsum("...ij,...jk,...kl->...il", R1, A[..., d0:, d0:], R1i)
        scale = np.maximum(np.max(np.abs(E0), axis=(-1, -2)), np.max(np.abs(E1), axis=(-1, -2)))
        scale = np.maximum(scale, 1.0)
        r0 = np.max(np.abs(A0 - E0), axis=(-1, -2)) / scale
        r1 = np.max(np.abs(A1 - E1), axis=(-1, -2)) / scale
        rc = np.max(np.abs(A[..., :d0, d0:]), axis=(-1, -2)) / scale
        tang = np.max(np.abs(np.einsum("...mi,...m->...i", J, normal)), axis=-1) / np.max(
            np.linalg.norm(J, axis=-2), axis=-1)
        for key, r in (("E0", r0), ("E1", r1), ("cross", rc), ("normality", tang)):
            out[f"{name}.{key}"] = float(np.nanmax(np.where(mask, r[sl], np.nan)))
    return out


# ---------------------------------------------------------------- generators

def surface_family(curve: SampledCurveFrame, phi: ScalarAlongCurve, betas, fiber: ImmersedGrid,
                   tol: float | None = None) -> TubeEvaluation:
    """Surface through a unit-speed fiber curve alpha in R^n moved along a curve
    in R^{n+1}:

        f(t, s) = gamma - 2 phi (phi' gamma' + sum (beta_i + alpha_i) xi_i)
                         / (phi'^2 + sum (beta_i + alpha_i)^2).
    """
    if fiber.grid.ndim != 1 or fiber.m != curve.m - 1:
        raise TubeError("fiber must be a curve in R^n for a curve in R^{n+1}")
    h = fiber.grid.hmax
    if tol is None:
        tol = 10.0 * max(h, curve.h) ** 2
    speed = np.linalg.norm(geo.jacobian(fiber)[..., 0], axis=-1)
    if np.max(np.abs(speed - 1.0)) > tol:
        raise TubeError(f"fiber is not unit speed: {np.max(np.abs(speed - 1.0)):.3e}")
    from .curves import combescure_curve_residual
    res = combescure_curve_residual(curve, phi, betas)
    if res > tol:
        raise TubeError(f"beta_i' + phi' k_i residual {res:.3e} exceeds {tol:.3e}")
    spec = PartialTubeSpec.from_curve(curve, phi, betas, fiber, normalize=False)
    ev = build_partial_tube(spec)
    den = np.sum(ev.F * ev.F, axis=-1)
    low = den < 1e-12
    if low.any():
        ev.regular_mask &= ~low
        ev.f.values[low] = np.nan
    return ev


def hypersurface_foliation(curve: SampledCurveFrame, phi: ScalarAlongCurve, betas,
                           g: ImmersedGrid) -> TubeEvaluation:
    """Hypersurface of R^{n+1} foliated by the images of g: M^{n-1} -> R^n,
    each leaf lying in an (n-1)-sphere orthogonal to the hypersurface."""
    if g.m != curve.m - 1 or g.grid.ndim != curve.m - 2:
        raise TubeError("g must be a hypersurface of R^n for a curve in R^{n+1}")
    from .curves import combescure_curve_residual
    res = combescure_curve_residual(curve, phi, betas)
    tol = 10.0 * max(g.grid.hmax, curve.h) ** 2
    if res > tol:
        raise TubeError(f"beta_i' + phi' k_i residual {res:.3e} exceeds {tol:.3e}")
    spec = PartialTubeSpec.from_curve(curve, phi, betas, g, normalize=False)
    return build_partial_tube(spec)


def channel_hypersurface(curve: SampledCurveFrame, phi: ScalarAlongCurve, betas,
                         patch_grid: ParamGrid, height: float = 0.0) -> TubeEvaluation:
    """Channel hypersurface: the foliation generated by a planar patch
    g(x) = (x, height) of R^n; leaves are round (n-1)-spheres."""
    X = np.stack(patch_grid.mesh(), axis=-1)
    vals = np.concatenate([X, np.full(X.shape[:-1] + (1,), height)], axis=-1)
    return hypersurface_foliation(curve, phi, betas, ImmersedGrid(patch_grid, vals))


# ---------------------------------------------------------------- reconstruction

@dataclass
class Reconstruction:
    spec: PartialTubeSpec
    rebuilt: TubeEvaluation
    deviation: float
    mu: np.ndarray
    tau: np.ndarray
    base_slice: tuple
    reference_fiber_point: tuple
    mu_residual: float = 0.0


def _leaf_mu(f: ImmersedGrid, f1v, Q1, d0):
    """Leaf average of (c - f1)/|c - f1|^2, c = f + Z/|Z|^2 the centers of the
    spheres containing the E0 leaves, projected on the base tangent space.
    Written as |Z|^2 w/|w|^2 with w = |Z|^2 (f - f1) + Z, which stays finite
    when Z -> 0 (totally geodesic leaves)."""
    Z = geo.leaf_mean_curvature(f, 0)
    z2 = np.sum(Z * Z, axis=-1, keepdims=True)
    w = z2 * (f.values - f1v) + Z
    w2 = np.sum(w * w, axis=-1, keepdims=True)
    with np.errstate(all="ignore"):
        mu = np.where(w2 > 0, z2 * w / np.where(w2 > 0, w2, 1.0), 0.0)
    mu = np.nanmean(mu.reshape((-1,) + mu.shape[d0:]), axis=0)
    return np.einsum("...mi,...i->...m", Q1, np.einsum("...mi,...m->...i", Q1, mu))


def reconstruct_tube(f: ImmersedGrid, base_slice=None, reference_fiber_point=None,
                     reference_x0=None, check: bool = True, tol_scale: float = 10.0) -> Reconstruction:
    """Recover (f1, xi, f0, phi, beta) from a sampled tube and rebuild it.

    The grid must carry two factors, E0 (fiber axes first) and E1.  Indices
    are multi-indices into the fiber axes; defaults are the grid minimum for
    the base slice, the maximum for z0 and the middle node for the
    normalization point x0*.
    """
    grid = f.grid
    if len(grid.factors) != 2 or grid.factors[0] != tuple(range(len(grid.factors[0]))):
        raise PreconditionError("expected factors (fiber axes, base axes) with fiber axes first")
    d0 = len(grid.factors[0])
    c0 = grid.counts[:d0]
    if check:
        from .verify import suite_cor_rpt
        reports = suite_cor_rpt(f, C=tol_scale)
        bad = [r for r in reports if not r.passed]
        if bad:
            raise PreconditionError(f"not a Ribaucour partial tube: {bad[0].name} "
                                    f"max {bad[0].max:.3e} > tol {bad[0].tol:.3e}")
    xb = tuple(base_slice) if base_slice is not None else (0,) * d0
    z0 = tuple(reference_fiber_point) if reference_fiber_point is not None else tuple(c - 1 for c in c0)
    xs = tuple(reference_x0) if reference_x0 is not None else tuple(c // 2 for c in c0)
    if xs in (xb, z0) or xb == z0:
        raise PreconditionError("base slice, z0 and x0* must be distinct fiber nodes")
    g0 = grid.sub(grid.factors[0])
    g1 = grid.sub(grid.factors[1])
    f1v = f.values[xb]
    if not np.all(np.isfinite(f1v)):
        raise PreconditionError("base slice contains masked nodes")
    f1 = ImmersedGrid(g1, f1v)
    Q1, _ = geo.tangent_frame(geo.jacobian(f1))
    diff = f.values - f1v[(None,) * d0]
    n2 = np.sum(diff * diff, axis=-1)
    n2b = n2.copy()
    n2b[xb] = np.inf
    if np.any(n2b < 1e-24):
        raise PreconditionError("f coincides with f1 away from the base slice; rho undefined")
    with np.errstate(all="ignore"):
        rho = 2.0 * diff / n2[..., None]
    mu = _leaf_mu(f, f1v[(None,) * d0], Q1, d0)
    h = rho - mu[(None,) * d0]
    h[xb] = np.nan
    hz = h[z0]
    sec = h - hz[(None,) * d0]                                  # xi^{x0}
    tau = np.log(np.linalg.norm(sec[xs], axis=-1))
    et = np.exp(-tau)
    phi = -et
    beta = et[..., None] * hz
    sections = et[(None,) * d0 + (Ellipsis, None)] * sec        # c0 + c1 + (m,)
    # orthonormal combinations of the parallel sections at a reference base node
    mid1 = tuple(c // 2 for c in g1.counts)
    S = sections[(Ellipsis,) + mid1 + (slice(None),)].reshape(-1, f.m)
    ok = np.all(np.isfinite(S), axis=1)
    U, sv, Vt = np.linalg.svd(S[ok], full_matrices=False)
    k = int(np.sum(sv > 1e-8 * sv[0]))
    # xi_i = sum_j C_ij S_j with C = (Sigma^-1 U^T)[:k]
    Cfull = np.zeros((k, S.shape[0]))
    Cfull[:, ok] = (U[:, :k] / sv[:k]).T
    flat = sections.reshape((-1,) + g1.counts + (f.m,))
    flat = np.where(np.isfinite(flat), flat, 0.0)
    xi = np.einsum("kj,j...m->...km", Cfull, flat)
    f0 = np.einsum("...m,...km->...k", sections, xi[(None,) * d0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        f0 = np.nanmean(f0.reshape(c0 + (-1, k)), axis=d0)
    f0[xb] = np.inf
    # the rebuild takes grad phi from FD of the recovered phi, so it is an
    # independent check; -phi mu must agree with it (tangent part of F)
    spec = PartialTubeSpec(f1, xi, ImmersedGrid(g0, f0), phi, beta)
    spec.frame_residuals = frame_residuals(spec)
    rebuilt = build_partial_tube(spec)
    grad_fd = _base_geometry(spec)[0]
    mu_res = float(np.nanmax(np.linalg.norm(grad_fd + phi[..., None] * mu, axis=-1))
                   / np.nanmax(np.linalg.norm(rebuilt.F, axis=-1)))
    dev = np.linalg.norm(rebuilt.f.values - f.values, axis=-1)
    scale = max(float(np.nanmax(np.linalg.norm(f.values - np.nanmean(f.values.reshape(-1, f.m), axis=0),
                                               axis=-1))), 1e-300)
    deviation = float(np.nanmax(dev)) / scale
    log.info("tube reconstruction: k = %d, rebuild deviation %.3e, mu consistency %.3e", k, deviation, mu_res)
    return Reconstruction(spec, rebuilt, deviation, mu, tau, xb, z0, mu_res)
