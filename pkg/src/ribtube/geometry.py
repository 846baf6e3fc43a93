"""Finite-difference differential geometry of sampled immersions.

Everything works on stacked arrays: a map sampled on a d-dimensional grid has
values of shape ``counts + (m,)``; per-node matrices carry two trailing axes.
Tangent frames come from QR of the Jacobian (Gram-Schmidt in axis order, R
with positive diagonal), so a bilinear form B in coordinates reads
``R^-T B R^-1`` in the orthonormal frame.
"""
from __future__ import annotations

import itertools

import numpy as np

from .numerics import ImmersedGrid, ParamGrid, grid_diff, grid_diff2


def jacobian(f: ImmersedGrid) -> np.ndarray:
    """Partials as columns: shape counts + (m, d)."""
    g = f.grid
    return np.stack([grid_diff(f.values, g, a) for a in range(g.ndim)], axis=-1)


def second_partials(values, grid: ParamGrid) -> np.ndarray:
    """d_i d_j of an array with trailing value axes; shape counts + (d, d) + tail."""
    v = np.asarray(values, dtype=float)
    d = grid.ndim
    first = [grid_diff(v, grid, a) for a in range(d)]
    rows = [[None] * d for _ in range(d)]
    for i in range(d):
        rows[i][i] = grid_diff2(v, grid, i)
        for j in range(i + 1, d):
            rows[i][j] = rows[j][i] = grid_diff(first[i], grid, j)
    return np.stack([np.stack(r, axis=d) for r in rows], axis=d)


def hessian_vectors(f: ImmersedGrid) -> np.ndarray:
    """d_i d_j f with shape counts + (d, d, m)."""
    return second_partials(f.values, f.grid)


def scalar_gradient(u, grid: ParamGrid) -> np.ndarray:
    """Coordinate partials of a scalar field, shape counts + (d,)."""
    return np.stack([grid_diff(u, grid, a) for a in range(grid.ndim)], axis=-1)


def gram(J, signature=None) -> np.ndarray:
    """J^T G J for column-stacked partials J (counts + (m, d))."""
    if signature is None:
        return np.einsum("...ki,...kj->...ij", J, J)
    s = np.asarray(signature, dtype=float)
    return np.einsum("...ki,k,...kj->...ij", J, s, J)


def induced_metric(f: ImmersedGrid) -> np.ndarray:
    return gram(jacobian(f), f.signature)


def tangent_frame(J):
    """Orthonormal tangent frame Q (counts+(m,d)) and R (counts+(d,d)), J = Q R."""
    Q, R = np.linalg.qr(J)
    sgn = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    sgn = np.where(sgn == 0, 1.0, sgn)
    Q = Q * sgn[..., None, :]
    R = R * sgn[..., :, None]
    return Q, R


def to_frame(B, R) -> np.ndarray:
    """Express a coordinate bilinear form in the orthonormal frame: R^-T B R^-1."""
    Ri = np.linalg.inv(R)
    return np.einsum("...ai,...ab,...bj->...ij", Ri, B, Ri)


def normal_projector(Q) -> np.ndarray:
    m = Q.shape[-2]
    return np.eye(m) - np.einsum("...ai,...bi->...ab", Q, Q)


def project_normal(v, Q) -> np.ndarray:
    """Normal part of ambient vectors v (counts + (m,)) given the tangent frame Q."""
    return v - np.einsum("...mi,...i->...m", Q, np.einsum("...mi,...m->...i", Q, v))


def hypersurface_normal(J) -> np.ndarray:
    """Unit normal of a hypersurface from cofactors of the m x (m-1) Jacobian."""
    m = J.shape[-2]
    comps = []
    for k in range(m):
        rows = [r for r in range(m) if r != k]
        comps.append((-1) ** k * np.linalg.det(J[..., rows, :]))
    n = np.stack(comps, axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def christoffel_from_immersion(J, H2, signature=None) -> np.ndarray:
    """Gamma^k_ij = g^{kl} <d_i d_j f, d_l f>; shape counts + (k, i, j)."""
    g = gram(J, signature)
    s = np.ones(J.shape[-2]) if signature is None else np.asarray(signature, dtype=float)
    low = np.einsum("...ijm,m,...ml->...lij", H2, s, J)
    return np.einsum("...kl,...lij->...kij", np.linalg.inv(g), low)


def christoffel_from_metric(g, grid: ParamGrid) -> np.ndarray:
    """Christoffel symbols of the second kind from FD derivatives of sampled g."""
    d = grid.ndim
    dg = np.stack([grid_diff(g, grid, a) for a in range(d)], axis=-3)  # counts+(a,i,j) = d_a g_ij
    # Gamma_lij = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    low = 0.5 * (np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg)
    return np.einsum("...kl,...lij->...kij", np.linalg.inv(g), low)


def covariant_hessian(u, grid: ParamGrid, Gamma) -> np.ndarray:
    """Hess u_ij = d_i d_j u - Gamma^k_ij d_k u (coordinates)."""
    return second_partials(u, grid) - np.einsum("...kij,...k->...ij", Gamma, scalar_gradient(u, grid))


def leaf_index_sets(grid: ParamGrid, which_factor: int):
    """Yield (index_tuple, leaf_axes) slices selecting each leaf of a factor."""
    axes = grid.factors[which_factor]
    other = [a for a in range(grid.ndim) if a not in axes]
    for combo in itertools.product(*[range(grid.counts[a]) for a in other]):
        idx = [slice(None)] * grid.ndim
        for a, i in zip(other, combo):
            idx[a] = i
        yield tuple(idx), combo


def leaf_mean_curvature(f: ImmersedGrid, which_factor: int, J=None, H2=None, full: bool = False):
    """Mean curvature vector of the leaves of a factor, projected on the other
    factors' tangent directions (the component that lies in f_* of the
    complementary distribution).  Returns an ambient field counts + (m,).
    With ``full`` the whole mean curvature vector of the leaf in the ambient
    space is returned instead.
    """
    grid = f.grid
    if J is None:
        J = jacobian(f)
    if H2 is None:
        H2 = hessian_vectors(f)
    axes = list(grid.factors[which_factor])
    other = [a for a in range(grid.ndim) if a not in axes]
    Jl = J[..., axes]
    hl = gram(Jl, f.signature)
    hinv = np.linalg.inv(hl)
    Hsub = H2[..., axes, :, :][..., :, axes, :]
    Hvec = np.einsum("...ab,...abm->...m", hinv, Hsub) / len(axes)
    Ql, _ = tangent_frame(Jl)
    if full:
        return Hvec - np.einsum("...mi,...i->...m", Ql, np.einsum("...mi,...m->...i", Ql, Hvec))
    if not other:
        return np.zeros_like(Hvec)
    Q, _ = tangent_frame(J)
    t_all = np.einsum("...mi,...i->...m", Q, np.einsum("...mi,...m->...i", Q, Hvec))
    t_leaf = np.einsum("...mi,...i->...m", Ql, np.einsum("...mi,...m->...i", Ql, Hvec))
    return t_all - t_leaf
