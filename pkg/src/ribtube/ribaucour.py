"""Combescure data (phi, beta) on a sampled immersion and the Ribaucour
transform it determines, in flat space and in space forms Q_c.

Flat case, with F = f_* grad phi + beta and nu = |F|^-2:

    f~ = f - 2 nu phi F,   P v = v - 2 nu <F, v> F,
    D = I - 2 nu phi (Hess phi - A_beta),   delta = -F / phi.

Tangent tensors (Phi, D) live in the orthonormal frame obtained by
Gram-Schmidt on the FD partials in axis order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .numerics import ImmersedGrid, pseudo_inner

log = logging.getLogger(__name__)

COND_MAX = 1e8


class EmptyResultError(RuntimeError):
    """No regular node survives."""


class QuadricError(ValueError):
    pass


@dataclass
class CombescureData:
    f: ImmersedGrid
    phi: np.ndarray
    beta: np.ndarray
    grad_phi: np.ndarray        # f_* grad phi, ambient
    F: np.ndarray
    nu: np.ndarray
    Phi: np.ndarray             # Hess phi - A_beta in the orthonormal frame
    Q: np.ndarray
    R: np.ndarray
    valid: np.ndarray           # tangent space of full rank
    combescure_residual: float
    normality_residual: float
    c: float = 0.0


@dataclass
class RibaucourResult:
    f_tilde: ImmersedGrid
    P: np.ndarray
    D: np.ndarray
    delta: np.ndarray
    regular_mask: np.ndarray
    residual_i: float
    residual_ii: float
    residual_ii_field: np.ndarray


def _normal_part(v, Q, position=None):
    out = geo.project_normal(v, Q)
    if position is not None:
        u = position / np.linalg.norm(position, axis=-1, keepdims=True)
        out = out - np.sum(out * u, axis=-1, keepdims=True) * u
    return out


def build_combescure(f: ImmersedGrid, phi, beta, grad_phi=None, c: float = 0.0) -> CombescureData:
    """Assemble F, nu and Phi from (phi, beta) and measure the Combescure condition.

    ``grad_phi`` may carry a closed-form f_* grad phi; otherwise it is computed
    from FD partials of phi and the FD induced metric.  With ``c != 0`` the
    samples are the umbilical inclusion into R^{m+1} and the condition is
    measured in the normal space of f inside Q_c (position direction removed).
    """
    grid = f.grid
    phi = np.asarray(phi, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if phi.shape != grid.counts or beta.shape != f.values.shape:
        raise ValueError("phi / beta shapes must match the grid")
    J = geo.jacobian(f)
    H2 = geo.hessian_vectors(f)
    g = geo.gram(J, f.signature)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(g)
    valid = np.isfinite(cond) & (cond < 1e12) & f.mask
    Q, R = geo.tangent_frame(np.where(valid[..., None, None], J, np.eye(*J.shape[-2:])))
    if grad_phi is None:
        dphi = geo.scalar_gradient(phi, grid)
        coords = np.linalg.solve(np.where(valid[..., None, None], g, np.eye(grid.ndim)), dphi[..., None])[..., 0]
        grad_phi = np.einsum("...mi,...i->...m", J, coords)
    grad_phi = np.asarray(grad_phi, dtype=float)
    Gamma = geo.christoffel_from_immersion(np.where(valid[..., None, None], J, np.eye(*J.shape[-2:])), H2, f.signature)
    hess = geo.covariant_hessian(phi, grid, Gamma)
    sig = np.asarray(f.signature, dtype=float)
    Abeta = np.einsum("...ijm,m,...m->...ij", H2, sig, beta)
    Phi = geo.to_frame(hess - Abeta, R)
    Phi = 0.5 * (Phi + np.swapaxes(Phi, -1, -2))
    F = grad_phi + beta
    nF = pseudo_inner(F, F, f.signature)
    with np.errstate(divide="ignore"):
        nu = np.where(nF != 0.0, 1.0 / np.where(nF != 0.0, nF, 1.0), np.inf)

    position = f.values if c != 0.0 else None
    dF = np.stack([geo.grid_diff(F, grid, a) for a in range(grid.ndim)], axis=-2)   # counts+(d,m)
    res = []
    for a in range(grid.ndim):
        nrm = np.linalg.norm(_normal_part(dF[..., a, :], Q, position), axis=-1)
        res.append(nrm / np.linalg.norm(J[..., a], axis=-1))
    comb = np.max(np.stack(res), axis=0)
    comb_res = float(np.nanmax(np.where(valid, comb, np.nan))) if valid.any() else np.nan
    bn = np.linalg.norm(beta, axis=-1)
    tang = np.max(np.abs(np.einsum("...mi,...m->...i", Q, beta)), axis=-1)
    scale = np.maximum(np.nanmax(np.where(valid, bn, np.nan)) if valid.any() else 0.0, 1.0)
    norm_res = float(np.nanmax(np.where(valid, tang, np.nan)) / scale) if valid.any() else np.nan
    log.info("Combescure residual %.3e, beta normality residual %.3e", comb_res, norm_res)
    return CombescureData(f, phi, beta, grad_phi, F, nu, Phi, Q, R, valid, comb_res, norm_res, c)


def inversion_data(f: ImmersedGrid, center, radius: float) -> CombescureData:
    """Data for the inversion in the sphere S(P0, r): 2 phi = |f - P0|^2 - r^2,
    beta = normal part of f - P0.  Here f_* grad phi is the tangent part of
    f - P0 exactly, so F = f - P0 to rounding."""
    v = f.values - np.asarray(center, dtype=float)
    phi = 0.5 * (np.sum(v * v, axis=-1) - radius ** 2)
    J = geo.jacobian(f)
    Q, _ = geo.tangent_frame(J)
    tang = np.einsum("...mi,...i->...m", Q, np.einsum("...mi,...m->...i", Q, v))
    return build_combescure(f, phi, v - tang, grad_phi=tang)


def parallel_data(f: ImmersedGrid, xi) -> CombescureData:
    """Data for the parallel translation f + xi by a parallel normal field xi:
    2 phi = |xi|^2 (constant), beta = -xi."""
    xi = np.asarray(xi, dtype=float)
    phi = 0.5 * np.sum(xi * xi, axis=-1)
    return build_combescure(f, phi, -xi, grad_phi=np.zeros_like(xi))


def _transform(data: CombescureData, G, nu, Dtensor, extra_regular=None) -> RibaucourResult:
    f = data.f
    sig = np.asarray(f.signature, dtype=float)
    phi = data.phi
    d = f.grid.ndim
    m = f.m
    Fn = np.abs(pseudo_inner(G, G, f.signature))
    scale = np.nanmax(np.where(data.valid, np.linalg.norm(f.values, axis=-1), np.nan)) if data.valid.any() else 1.0
    scale = max(scale, 1.0)
    regular = data.valid & (np.abs(phi) > 1e-12 * scale) & (Fn > 1e-24 * scale ** 2) & np.isfinite(nu)
    if extra_regular is not None:
        regular &= extra_regular
    eye_d = np.eye(d)
    Dsafe = np.where(regular[..., None, None], Dtensor, eye_d)
    with np.errstate(all="ignore"):
        sv = np.linalg.svd(Dsafe, compute_uv=False)
    regular &= np.all(np.isfinite(sv), axis=-1) & (sv[..., -1] > 1e-8) & (sv[..., 0] < COND_MAX * sv[..., -1])
    if not regular.any():
        raise EmptyResultError("no regular node: phi, F or D degenerate everywhere")
    nus = np.where(regular, nu, 0.0)
    ft = f.values - 2.0 * (nus * phi)[..., None] * G
    ft = np.where(regular[..., None], ft, np.nan)
    P = np.eye(m) - 2.0 * nus[..., None, None] * np.einsum("...a,...b,b->...ab", G, G, sig)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(regular[..., None], -G / np.where(regular, phi, 1.0)[..., None], np.nan)
    # condition (i): P Z - Z = <Z, delta>(f - f~) for Z in the standard basis
    diffv = np.where(regular[..., None], f.values - ft, 0.0)
    Mi = (P - np.eye(m)) - np.einsum("...a,...b,b->...ab", diffv, np.where(regular[..., None], delta, 0.0), sig)
    res_i = float(np.max(np.abs(Mi[regular])) / 2.0)
    # condition (ii): f~_* = P f_* D by finite differences
    ftg = ImmersedGrid(f.grid, ft, f.signature)
    Jt = geo.jacobian(ftg)
    pred = np.einsum("...ab,...bi,...ij,...jk->...ak", P, data.Q, Dsafe, data.R)
    err = np.linalg.norm(Jt - pred, axis=-2) / np.maximum(np.linalg.norm(pred, axis=-2), 1e-300)
    field = np.max(err, axis=-1)
    field = np.where(regular, field, np.nan)
    res_ii = float(np.nanmax(field)) if np.isfinite(field).any() else np.nan
    log.info("Ribaucour transform: %d/%d regular nodes, cond (i) %.2e, cond (ii) %.2e",
             int(regular.sum()), regular.size, res_i, res_ii)
    return RibaucourResult(ftg, P, Dtensor, delta, regular, res_i, res_ii, field)


def ribaucour_transform(data: CombescureData) -> RibaucourResult:
    """f~ = f - 2 nu phi F with P, D, delta; checks conditions (i) and (ii)."""
    d = data.f.grid.ndim
    nu = np.where(np.isfinite(data.nu), data.nu, 0.0)
    D = np.eye(d) - 2.0 * (nu * data.phi)[..., None, None] * data.Phi
    return _transform(data, data.F, data.nu, D)


def ribaucour_transform_spaceform(data: CombescureData, c: float, tol: float | None = None) -> RibaucourResult:
    """Ribaucour transform of f: M -> Q_c given through its umbilical inclusion
    F = i o f (the samples of ``data.f``).

    G = F_* grad phi + beta + c phi F, nu = <G, G>^-1, F~ = F - 2 nu phi G,
    D = I - 2 nu phi (Hess phi + c phi I - A_beta).
    """
    f = data.f
    if c == 0.0:
        return ribaucour_transform(data)
    if tol is None:
        tol = 10.0 * f.grid.hmax ** 2
    q = pseudo_inner(f.values, f.values, f.signature) * c
    off = float(np.nanmax(np.abs(q - 1.0)))
    if off > tol:
        raise QuadricError(f"samples leave the quadric of curvature {c}: {off:.3e}")
    d = f.grid.ndim
    G = data.grad_phi + data.beta + c * data.phi[..., None] * f.values
    nG = pseudo_inner(G, G, f.signature)
    with np.errstate(divide="ignore"):
        nu = np.where(nG != 0.0, 1.0 / np.where(nG != 0.0, nG, 1.0), np.inf)
    nus = np.where(np.isfinite(nu), nu, 0.0)
    D = np.eye(d) - 2.0 * (nus * data.phi)[..., None, None] * (data.Phi + c * data.phi[..., None, None] * np.eye(d))
    res = _transform(data, G, nu, D)
    q2 = pseudo_inner(res.f_tilde.values, res.f_tilde.values, f.signature) * c
    log.info("space-form transform: quadric residual %.3e", float(np.nanmax(np.abs(q2 - 1.0))))
    return res


def quadric_residual(result: RibaucourResult, c: float) -> float:
    v = result.f_tilde.values
    q = pseudo_inner(v, v, result.f_tilde.signature) * c
    return float(np.nanmax(np.abs(q - 1.0)))
