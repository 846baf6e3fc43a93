"""Invariant engine: numerical residual checks on sampled immersions and
sampled metrics.

Every check returns an ``InvariantReport`` whose residuals are normalized by a
local geometric scale (metric norms, curvature scale, leaf radius), so the
single tolerance model tol = C h^2 (h = largest grid step) applies everywhere.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .numerics import FitResult, ImmersedGrid, ParamGrid, fit_plane, fit_sphere

log = logging.getLogger(__name__)

DEFAULT_C = 10.0


def tolerance(grid: ParamGrid, C: float = DEFAULT_C) -> float:
    return C * grid.hmax ** 2


@dataclass
class InvariantReport:
    name: str
    max: float
    rms: float
    tol: float
    meta: dict = field(default_factory=dict)
    parts: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max) and self.max <= self.tol)

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def record(self) -> str:
        return f"check={self.name} max={self.max:.6e} rms={self.rms:.6e} tol={self.tol:.6e} verdict={self.verdict}"

    def flatten(self) -> list:
        """This report followed by its sub-reports (depth first)."""
        out = [self]
        for p in self.parts:
            out.extend(p.flatten())
        return out


def _summary(name, values, tol, meta=None, parts=None) -> InvariantReport:
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        return InvariantReport(name, float("nan"), float("nan"), tol, dict(meta or {}, empty=True), parts or [])
    return InvariantReport(name, float(v.max()), float(np.sqrt(np.mean(v * v))), tol, dict(meta or {}),
                           parts or [])


def _combine(name, parts, tol, meta=None) -> InvariantReport:
    mx = max((p.max if np.isfinite(p.max) else np.inf) for p in parts) if parts else float("nan")
    # a part with its own tolerance counts through its ratio to the shared one
    ratios = [p.max / p.tol * tol if p.tol > 0 else (0.0 if p.max == 0 else np.inf) for p in parts]
    mx = max(ratios) if ratios else mx
    rms = float(np.sqrt(np.mean([p.rms ** 2 for p in parts if np.isfinite(p.rms)]))) if parts else float("nan")
    return InvariantReport(name, float(mx), rms, tol, dict(meta or {}), list(parts))


def _meta(grid, C, **kw):
    return dict(h=grid.hmax, C=C, **kw)


def _blocks(grid: ParamGrid, factors=None):
    return tuple(factors) if factors is not None else grid.factors


# ---------------------------------------------------------------- metric data

class MetricError(ValueError):
    pass


@dataclass
class SampledMetric:
    grid: ParamGrid
    g: np.ndarray
    factors: tuple = ()

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        d = self.grid.ndim
        if self.g.shape != self.grid.counts + (d, d):
            raise MetricError("metric samples must have shape counts + (d, d)")
        if np.max(np.abs(self.g - np.swapaxes(self.g, -1, -2))) > 1e-12 * max(1.0, np.max(np.abs(self.g))):
            raise MetricError("metric samples are not symmetric")
        if np.min(np.linalg.eigvalsh(self.g)) <= 0.0:
            raise MetricError("metric samples are not positive definite")
        if not self.factors:
            self.factors = self.grid.factors

    @classmethod
    def from_function(cls, grid: ParamGrid, fn, factors=()):
        """``fn(*mesh)`` returns a nested d x d list of arrays (or scalars)."""
        mesh = grid.mesh()
        rows = fn(*mesh)
        g = np.stack([np.stack([np.broadcast_to(np.asarray(e, dtype=float), grid.counts) for e in r], -1)
                      for r in rows], -2)
        return cls(grid, g, tuple(factors))


# ---------------------------------------------------------------- nets and forms

def check_orthogonal_net(f: ImmersedGrid, C: float = DEFAULT_C, factors=None) -> InvariantReport:
    """max |g_ij| / sqrt(g_ii g_jj) over pairs of axes in different factors."""
    grid = f.grid
    blocks = _blocks(grid, factors)
    g = geo.induced_metric(f)
    vals = []
    for a, A in enumerate(blocks):
        for B in blocks[a + 1:]:
            for i in A:
                for j in B:
                    vals.append(np.abs(g[..., i, j]) / np.sqrt(np.abs(g[..., i, i] * g[..., j, j])))
    if not vals:
        return _summary("orthogonal_net", [0.0], tolerance(grid, C), _meta(grid, C, note="single factor"))
    return _summary("orthogonal_net", np.max(np.stack(vals), axis=0), tolerance(grid, C), _meta(grid, C))


def check_adapted_second_fundamental_form(f: ImmersedGrid, C: float = DEFAULT_C, factors=None) -> InvariantReport:
    """max || normal part of d_i d_j f || / (|d_i f| |d_j f|) over mixed pairs."""
    grid = f.grid
    blocks = _blocks(grid, factors)
    J = geo.jacobian(f)
    H2 = geo.hessian_vectors(f)
    g = geo.gram(J)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(np.where(np.isfinite(g), g, np.eye(grid.ndim)))
    ok = np.isfinite(cond) & (cond < 1e12) & f.mask
    Q, _ = geo.tangent_frame(np.where(ok[..., None, None], J, np.eye(*J.shape[-2:])))
    nrm = np.linalg.norm(J, axis=-2)
    vals = []
    for a, A in enumerate(blocks):
        for B in blocks[a + 1:]:
            for i in A:
                for j in B:
                    nv = np.linalg.norm(geo.project_normal(H2[..., i, j, :], Q), axis=-1)
                    vals.append(nv / (nrm[..., i] * nrm[..., j]))
    if not vals:
        return _summary("adapted_sff", [0.0], tolerance(grid, C), _meta(grid, C, note="single factor"))
    r = np.where(ok, np.max(np.stack(vals), axis=0), np.nan)
    return _summary("adapted_sff", r, tolerance(grid, C), _meta(grid, C, masked=float(1 - ok.mean())))


# ---------------------------------------------------------------- leaves

def _leaves(grid: ParamGrid, which):
    return list(geo.leaf_index_sets(grid, which))


def _hull_coords(p):
    """Affine hull of points: origin, orthonormal basis rows, coordinates."""
    mid = p.mean(axis=0)
    _, sv, vt = np.linalg.svd(p - mid, full_matrices=False)
    r = int(np.sum(sv > 1e-9 * max(sv[0], 1e-300)))
    B = vt[:r]
    return mid, B, (p - mid) @ B.T


def fit_leaf_sphere(points) -> FitResult:
    """Sphere fit inside the affine hull of the points (a circle for planar
    curves, a 2-sphere for a curve spanning 3 dimensions, ...).  Points on a
    line come back plane-like."""
    p = np.asarray(points, dtype=float).reshape(-1, np.shape(points)[-1])
    p = p[np.all(np.isfinite(p), axis=1)]
    if len(p) < 3:
        return FitResult("sphere", np.full(p.shape[1], np.nan), float("inf"), 0.0, ("plane-like",))
    mid, B, q = _hull_coords(p)
    if B.shape[0] < 2 or q.shape[0] < B.shape[0] + 2:
        return FitResult("sphere", mid, float("inf"), 0.0, ("plane-like",))
    res = fit_sphere(q)
    return FitResult("sphere", mid + res.center @ B, res.radius, res.rms, res.flags)


def leaf_spheres(f: ImmersedGrid, which_factor: int = 0, J=None, H2=None):
    """Per-node leaf-sphere centers c = f + Z/|Z|^2 and radii 1/|Z| of the spheres
    orthogonal to f that contain the leaves (Z: leaf mean curvature projected
    on the complementary tangent directions)."""
    Z = geo.leaf_mean_curvature(f, which_factor, J, H2)
    z2 = np.sum(Z * Z, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = f.values + Z / z2[..., None]
        r = 1.0 / np.sqrt(z2)
    return c, r, Z


def check_spherical_leaves(f: ImmersedGrid, which_factor: int = 0, C: float = DEFAULT_C,
                           mode: str = "extrinsic", centers=None, radii=None,
                           plane_ratio: float = 1e-6) -> InvariantReport:
    """Leaves of a factor lie in spheres.

    ``extrinsic``: leaf-sphere center constancy, radius constancy, distance to the
    mean center, containment (f - c) in f_* of the complementary factors, and
    an independent sphere fit in the affine hull of each leaf.
    ``contained``: only sphere fits, or distances to given per-node
    ``centers`` (with optional ``radii``).  Leaves with vanishing mean
    curvature are plane-like: reported in the metadata, not failed.
    """
    grid = f.grid
    tol = tolerance(grid, C)
    axes = grid.factors[which_factor]
    other = [a for a in range(grid.ndim) if a not in axes]
    J = geo.jacobian(f)
    fit_r, plane_like, n_leaves = [], 0, 0
    center_r, radius_r, dist_r, cont_r, given_r = [], [], [], [], []
    if mode == "extrinsic":
        H2 = geo.hessian_vectors(f)
        cs, rs, Z = leaf_spheres(f, which_factor, J, H2)
        Hfull = np.linalg.norm(geo.leaf_mean_curvature(f, which_factor, J, H2, full=True), axis=-1)
        Qo, _ = geo.tangent_frame(J[..., other]) if other else (None, None)
    for idx, _ in _leaves(grid, which_factor):
        pts = f.values[idx].reshape(-1, f.m)
        ok = np.all(np.isfinite(pts), axis=1)
        if ok.sum() < 3:
            continue
        n_leaves += 1
        ext = float(np.max(np.linalg.norm(pts[ok] - pts[ok].mean(axis=0), axis=1)))
        if mode == "extrinsic":
            zl = np.linalg.norm(Z[idx].reshape(-1, f.m)[ok], axis=1)
            hl = float(np.max(Hfull[idx].ravel()[ok]))
            # |Z| below the FD error of the leaf curvature: the sphere is a plane
            # (or too flat to locate its center), e.g. planar circles in normal planes
            if np.max(zl) * ext < plane_ratio or np.max(zl) < grid.hmax ** 2 * hl:
                plane_like += 1
                continue
            c = cs[idx].reshape(-1, f.m)[ok]
            r = rs[idx].ravel()[ok]
            cbar, rbar = c.mean(axis=0), float(np.mean(r))
            # curvature scale of the leaf: a leaf that is a small arc of a large
            # sphere has |Z| << |H|, and c, r are then only as accurate as Z
            # relative to |H|
            kap = max(hl, 1.0 / rbar)
            center_r.append(np.max(np.linalg.norm(c - cbar, axis=1)) / (rbar ** 2 * kap))
            radius_r.append(np.max(np.abs(r - rbar)) / (rbar ** 2 * kap))
            dist_r.append(np.max(np.abs(np.linalg.norm(pts[ok] - cbar, axis=1) - rbar)) / rbar)
            if other:
                v = cbar - pts[ok]
                Qv = Qo[idx].reshape((-1,) + Qo.shape[-2:])[ok]
                tang = np.einsum("nmi,ni->nm", Qv, np.einsum("nmi,nm->ni", Qv, v))
                cont_r.append(np.max(np.linalg.norm(v - tang, axis=1)) / rbar)
        if centers is not None:
            c = np.asarray(centers)[idx].reshape(-1, f.m)[ok]
            d = np.linalg.norm(pts[ok] - c, axis=1)
            R = np.asarray(radii)[idx].ravel()[ok] if radii is not None else np.full(len(d), d.mean())
            given_r.append(np.max(np.abs(d - R)) / np.mean(R))
        fit = fit_leaf_sphere(pts[ok])
        if "plane-like" in fit.flags:
            if mode != "extrinsic":
                plane_like += 1
            continue
        fit_r.append(fit.rms / fit.radius ** 2)
    meta = _meta(grid, C, leaves=n_leaves, plane_like=plane_like, mode=mode)
    parts = []
    if mode == "extrinsic":
        parts += [_summary("leaf_center_constancy", center_r or [0.0], tol, meta),
                  _summary("leaf_radius_constancy", radius_r or [0.0], tol, meta),
                  _summary("leaf_distance", dist_r or [0.0], tol, meta)]
        if other:
            parts.append(_summary("leaf_containment", cont_r or [0.0], tol, meta))
    if centers is not None:
        parts.append(_summary("leaf_given_centers", given_r, tol, meta))
    parts.append(_summary("leaf_sphere_fit", fit_r or [0.0], tol, meta))
    rep = _combine("spherical_leaves", parts, tol, meta)
    return rep


def check_constant_angle(f: ImmersedGrid, centers, N, which_factor: int = 0, C: float = DEFAULT_C,
                         expected=None, mean_abs: bool = False) -> InvariantReport:
    """Per-leaf spread of cos theta = <(f - c)/|f - c|, N>.

    ``centers`` are per-node sphere centers (constant along each leaf).  With
    ``expected`` (per-node cos theta) the absolute deviation is reported too;
    ``mean_abs`` additionally reports mean |cos theta| (orthogonal spheres).
    """
    grid = f.grid
    tol = tolerance(grid, C)
    v = f.values - np.asarray(centers)
    u = v / np.linalg.norm(v, axis=-1, keepdims=True)
    cos = np.sum(u * np.asarray(N), axis=-1)
    spread, dev, mabs, flagged = [], [], [], 0
    for idx, _ in _leaves(grid, which_factor):
        cl = cos[idx].ravel()
        cl = cl[np.isfinite(cl)]
        if cl.size < 2:
            continue
        if np.min(np.abs(cl)) > 1.0 - 1e-9:
            flagged += 1
        spread.append(np.std(cl))
        mabs.append(np.mean(np.abs(cl)))
        if expected is not None:
            e = np.asarray(expected)[idx].ravel()
            e = e[np.isfinite(cos[idx].ravel())]
            dev.append(np.max(np.abs(cl - e)))
    meta = _meta(grid, C, tangent_sphere_leaves=flagged)
    parts = [_summary("angle_spread", spread, tol, meta)]
    if expected is not None:
        parts.append(_summary("angle_expected", dev, tol, meta))
    if mean_abs:
        parts.append(_summary("angle_orthogonal", mabs, tol, meta))
    return _combine("constant_angle", parts, tol, meta)


def check_orthogonal_leaf_spheres(f: ImmersedGrid, which_factor: int = 0, C: float = DEFAULT_C,
                                  N=None) -> InvariantReport:
    """The hypersphere through each leaf, centered at the leaf mean of the
    leaf-sphere centers, meets the hypersurface orthogonally: |<N, (f - c)/|f - c|>|."""
    if f.grid.ndim != f.m - 1:
        raise ValueError("check_orthogonal_leaf_spheres needs a hypersurface grid")
    J = geo.jacobian(f)
    if N is None:
        N = geo.hypersurface_normal(J)
    cs, _, Z = leaf_spheres(f, which_factor, J)
    vals, flat = [], 0
    for idx, _ in _leaves(f.grid, which_factor):
        pts = f.values[idx].reshape(-1, f.m)
        c = cs[idx].reshape(-1, f.m)
        ok = np.all(np.isfinite(pts), axis=1) & np.all(np.isfinite(c), axis=1)
        if ok.sum() < 2:
            flat += 1
            continue
        v = pts[ok] - c[ok].mean(axis=0)
        u = v / np.linalg.norm(v, axis=1, keepdims=True)
        vals.append(np.max(np.abs(np.sum(u * np.asarray(N)[idx].reshape(-1, f.m)[ok], axis=1))))
    return _summary("orthogonal_leaf_spheres", vals or [0.0], tolerance(f.grid, C),
                    _meta(f.grid, C, plane_like=flat))


# ---------------------------------------------------------------- surfaces

def fundamental_forms(f: ImmersedGrid):
    """(E, F, G), (L, M, N) and the unit normal of a surface in R^3."""
    J = geo.jacobian(f)
    H2 = geo.hessian_vectors(f)
    n = np.cross(J[..., 0], J[..., 1])
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    g = geo.gram(J)
    II = np.einsum("...ijm,...m->...ij", H2, n)
    return g, II, n


def check_curvature_lines(f: ImmersedGrid, C: float = DEFAULT_C) -> InvariantReport:
    """|F|/sqrt(EG) and |M|/(sqrt(EG) |A|) with |A| the largest principal curvature
    (floored by the inverse diameter); umbilic nodes are counted in the metadata."""
    grid = f.grid
    if grid.ndim != 2 or f.m != 3:
        raise ValueError("check_curvature_lines needs a surface grid in R^3")
    g, II, _ = fundamental_forms(f)
    EG = np.sqrt(g[..., 0, 0] * g[..., 1, 1])
    with np.errstate(all="ignore"):
        A = np.linalg.solve(g, II)
        k = np.linalg.eigvals(A).real
    vals = f.values[f.mask]
    diam = float(np.max(np.linalg.norm(vals - vals.mean(axis=0), axis=1))) * 2.0
    kmax = np.maximum(np.max(np.abs(k), axis=-1), 1.0 / diam)
    umb = np.abs(k[..., 0] - k[..., 1]) < 1e-3 * kmax
    tol = tolerance(grid, C)
    meta = _meta(grid, C, umbilic_fraction=float(np.nanmean(umb)))
    parts = [_summary("curvature_lines_F", np.abs(g[..., 0, 1]) / EG, tol, meta),
             _summary("curvature_lines_M", np.abs(II[..., 0, 1]) / (EG * kmax), tol, meta)]
    return _combine("curvature_lines", parts, tol, meta)


def geodesic_curvature(f: ImmersedGrid, axis: int) -> np.ndarray:
    """Signed geodesic curvature of the coordinate curves along ``axis`` of a
    surface, from the Christoffel symbols of the induced metric."""
    J = geo.jacobian(f)
    H2 = geo.hessian_vectors(f)
    g = geo.gram(J)
    Gam = geo.christoffel_from_immersion(J, H2)
    acc = Gam[..., :, axis, axis]                       # nabla_u u, u = d_axis
    u = np.zeros(2)
    u[axis] = 1.0
    det = np.sqrt(np.linalg.det(g))
    cross = u[0] * acc[..., 1] - u[1] * acc[..., 0]
    return det * cross / g[..., axis, axis] ** 1.5


def check_geodesic_curvature_constancy(f: ImmersedGrid, axis: int, C: float = DEFAULT_C) -> InvariantReport:
    """max over curves of |kappa_g - mean| / max(|mean|, 1/L) along the curves of ``axis``."""
    grid = f.grid
    kg = geodesic_curvature(f, axis)
    J = geo.jacobian(f)
    speed = np.linalg.norm(J[..., axis], axis=-1)
    kg = np.moveaxis(kg, axis, -1).reshape(-1, grid.counts[axis])
    sp = np.moveaxis(speed, axis, -1).reshape(-1, grid.counts[axis])
    vals = []
    for kc, sc in zip(kg, sp):
        ok = np.isfinite(kc) & np.isfinite(sc)
        if ok.sum() < 2:
            continue
        L = float(np.sum(sc[ok]) * grid.h[axis])
        mean = float(np.mean(kc[ok]))
        vals.append(np.max(np.abs(kc[ok] - mean)) / max(abs(mean), 1.0 / L))
    return _summary("geodesic_curvature_constancy", vals, tolerance(grid, C), _meta(grid, C, axis=axis))


# ---------------------------------------------------------------- hypersurfaces

def principal_curvatures(f: ImmersedGrid, N=None):
    """Principal curvatures (ascending) and coordinate principal directions of a
    hypersurface, via the generalized eigenproblem II x = k g x."""
    J = geo.jacobian(f)
    if N is None:
        N = geo.hypersurface_normal(J)
    g = geo.gram(J)
    II = np.einsum("...ijm,...m->...ij", geo.hessian_vectors(f), N)
    w, V = np.linalg.eigh(g)
    S = np.einsum("...ij,...j,...kj->...ik", V, 1.0 / np.sqrt(w), V)
    M = np.einsum("...ij,...jk,...kl->...il", S, II, S)
    k, Y = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    X = np.einsum("...ij,...jk->...ik", S, Y)
    return k, X, g, II, N


def check_principal_structure(f: ImmersedGrid, C: float = DEFAULT_C, cluster_factor=None,
                              simple_factor=None, gap: float = 1e-3, N=None) -> InvariantReport:
    """Eigenstructure of (g, II) on a hypersurface grid.

    Multiplicities use a relative gap max(gap, tol); the simplicity test
    uses max(gap, h^2).  ``cluster_factor``: the
    axes of that factor should carry one repeated curvature: reports its
    spread, the alignment (off-block part of the shape operator) and the
    constancy of the repeated value along the leaves (Dupin).  ``simple_factor``:
    the curvature along that (1-D) factor should be simple; reports the
    fraction of nodes where it is not.
    """
    grid = f.grid
    if grid.ndim != f.m - 1:
        raise ValueError("check_principal_structure needs a hypersurface grid")
    tol = tolerance(grid, C)
    k, X, g, II, N = principal_curvatures(f, N)
    vals = f.values[f.mask]
    diam = 2.0 * float(np.max(np.linalg.norm(vals - vals.mean(axis=0), axis=1)))
    scale = np.maximum(np.max(np.abs(k), axis=-1), 1.0 / diam)
    thr = max(gap, tol)
    dk = np.diff(k, axis=-1) / scale[..., None]
    mult = 1 + np.sum(dk <= thr, axis=-1)
    umbilic = np.all(dk <= thr, axis=-1)
    A = np.linalg.solve(g, II)
    meta = _meta(grid, C, umbilic_fraction=float(np.nanmean(umbilic)),
                 max_multiplicity=int(np.nanmax(np.where(np.isfinite(scale), mult, 0))), gap=thr)
    parts = []
    if cluster_factor is not None:
        B = list(grid.factors[cluster_factor])
        nb = [a for a in range(grid.ndim) if a not in B]
        AB = A[..., B, :][..., :, B]
        kb = np.linalg.eigvals(AB).real
        kbar = np.mean(kb, axis=-1)
        parts.append(_summary("principal_cluster", np.ptp(kb, axis=-1) / scale, tol, meta))
        off = np.max(np.abs(A[..., B, :][..., :, nb]), axis=(-1, -2)) if nb else np.zeros(grid.counts)
        parts.append(_summary("principal_alignment", off / scale, tol, meta))
        dup = []
        for idx, _ in _leaves(grid, cluster_factor):
            kl = kbar[idx].ravel()
            sl = scale[idx].ravel()
            okk = np.isfinite(kl)
            if okk.sum() >= 2:
                dup.append(np.ptp(kl[okk]) / np.max(sl[okk]))
        parts.append(_summary("dupin_constancy", dup, tol, meta))
        meta["cluster_multiplicity"] = len(B)
    if simple_factor is not None:
        a = grid.factors[simple_factor]
        if len(a) != 1:
            raise ValueError("simple_factor must be one-dimensional")
        a = a[0]
        ka = A[..., a, a]
        j = np.argmin(np.abs(k - ka[..., None]), axis=-1)[..., None]
        kj = np.take_along_axis(k, j, axis=-1)
        dist = np.abs(k - kj)
        np.put_along_axis(dist, j, np.inf, axis=-1)
        gaps = np.min(dist, axis=-1) / scale
        # separation only has to beat the O(h^2) error of FD curvatures
        bad = np.where(np.isfinite(gaps), gaps <= max(gap, grid.hmax ** 2), np.nan)
        frac = float(np.nanmean(bad))
        meta["simple_min_gap"] = float(np.nanmin(gaps))
        parts.append(InvariantReport("principal_simple", frac, frac, 0.0, dict(meta)))
    if not parts:
        parts.append(_summary("principal_symmetry", np.zeros(1), tol, meta))
    return _combine("principal_structure", parts, tol, meta)


# ---------------------------------------------------------------- intrinsic checks

def check_polar_conformal(metric: SampledMetric, C: float = DEFAULT_C, lam=None) -> InvariantReport:
    """(a) cross blocks, (b) umbilicity of E_a^perp for a >= 1, (c) mixed block of
    Hess lambda with respect to ``metric`` (when lambda is given, dim M0 = 1)."""
    grid = metric.grid
    tol = tolerance(grid, C)
    g = metric.g
    blocks = metric.factors
    d = grid.ndim
    diag = np.sqrt(np.abs(np.diagonal(g, axis1=-2, axis2=-1)))
    cross = [np.zeros(grid.counts)]
    for a, A in enumerate(blocks):
        for B in blocks[a + 1:]:
            for i in A:
                for j in B:
                    cross.append(np.abs(g[..., i, j]) / (diag[..., i] * diag[..., j]))
    parts = [_summary("polar_cross_block", np.max(np.stack(cross), axis=0), tol, _meta(grid, C))]
    Gam = geo.christoffel_from_metric(g, grid)
    span = np.array([hi - lo for lo, hi in zip(grid.lo, grid.hi)])
    L = float(np.sqrt(np.sum(span ** 2)) * np.nanmax(diag))
    # scale: largest second-fundamental-form value on unit vectors
    alpha_all = np.abs(Gam) * diag[..., :, None, None] / (diag[..., None, :, None] * diag[..., None, None, :])
    kscale = max(float(np.nanmax(alpha_all)), 1.0 / L)
    umb = [np.zeros(grid.counts)]
    for a in range(1, len(blocks)):
        A = list(blocks[a])
        perp = [i for i in range(d) if i not in A]
        gp = g[..., perp, :][..., :, perp]
        gpi = np.linalg.inv(gp)
        for kk in A:
            Gk = Gam[..., kk, :, :][..., perp, :][..., :, perp]
            eta = np.einsum("...ij,...ij->...", gpi, Gk) / len(perp)
            res = Gk - eta[..., None, None] * gp
            nres = res * diag[..., kk, None, None] / (diag[..., perp][..., :, None] * diag[..., perp][..., None, :])
            umb.append(np.max(np.abs(nres), axis=(-1, -2)) / kscale)
    parts.append(_summary("polar_umbilicity", np.max(np.stack(umb), axis=0), tol, _meta(grid, C)))
    if lam is not None:
        if len(blocks[0]) != 1:
            raise ValueError("the Hessian test needs a one-dimensional first factor")
        lam = np.asarray(lam, dtype=float)
        H = geo.covariant_hessian(lam, grid, Gam)
        Hn = H / (diag[..., :, None] * diag[..., None, :])
        hscale = max(float(np.nanmax(np.abs(Hn))), float(np.nanmax(np.abs(lam))) / L ** 2)
        i0 = blocks[0][0]
        others = [j for j in range(d) if j != i0]
        mixed = np.max(np.abs(Hn[..., i0, others]), axis=-1) / hscale
        parts.append(_summary("hess_lambda_mixed", mixed, tol, _meta(grid, C)))
    return _combine("polar_conformal", parts, tol, _meta(grid, C))


def check_conformality(fmap: ImmersedGrid, C: float = DEFAULT_C, domain_metric=None,
                       expected_factor=None) -> InvariantReport:
    """J^T G J = lambda^2 g with lambda^2 = tr(g^-1 J^T G J)/d estimated per node;
    ``expected_factor`` (lambda samples) is compared when given."""
    grid = fmap.grid
    tol = tolerance(grid, C)
    d = grid.ndim
    J = geo.jacobian(fmap)
    h = geo.gram(J, fmap.signature)
    g = np.broadcast_to(np.eye(d), h.shape) if domain_metric is None else np.asarray(domain_metric, dtype=float)
    lam2 = np.einsum("...ii->...", np.linalg.solve(g, h)) / d
    res = np.max(np.abs(h - lam2[..., None, None] * g), axis=(-1, -2)) / (
        np.abs(lam2) * np.max(np.abs(g), axis=(-1, -2)))
    parts = [_summary("conformal_residual", res, tol, _meta(grid, C))]
    if expected_factor is not None:
        lam = np.sqrt(np.abs(lam2))
        e = np.asarray(expected_factor, dtype=float)
        parts.append(_summary("conformal_factor", np.abs(lam - e) / np.abs(e), tol, _meta(grid, C)))
    return _combine("conformality", parts, tol, _meta(grid, C))


def check_metric_prediction(f: ImmersedGrid, predicted, C: float = DEFAULT_C, mask=None) -> InvariantReport:
    """|g_FD - g_pred|_ij / sqrt(g_ii g_jj) (predicted diagonal)."""
    g = geo.induced_metric(f)
    p = np.asarray(predicted)
    dg = np.sqrt(np.abs(np.diagonal(p, axis1=-2, axis2=-1)))
    r = np.max(np.abs(g - p) / (dg[..., :, None] * dg[..., None, :]), axis=(-1, -2))
    if mask is not None:
        r = np.where(mask, r, np.nan)
    return _summary("metric_prediction", r, tolerance(f.grid, C), _meta(f.grid, C))


def check_gauss_map(f: ImmersedGrid, N: ImmersedGrid, C: float = DEFAULT_C) -> InvariantReport:
    """|N| = 1 and <f_* X, N> / |f_* X| = 0."""
    J = geo.jacobian(f)
    Nv = N.values
    dots = np.abs(np.einsum("...mi,...m->...i", J, Nv)) / np.linalg.norm(J, axis=-2)
    tol = tolerance(f.grid, C)
    parts = [_summary("gauss_normality", np.max(dots, axis=-1), tol, _meta(f.grid, C)),
             _summary("gauss_unit", np.abs(np.linalg.norm(Nv, axis=-1) - 1.0), tol, _meta(f.grid, C))]
    return _combine("gauss_map", parts, tol, _meta(f.grid, C))


def check_planar_leaves(f: ImmersedGrid, which_factor: int = 0, C: float = DEFAULT_C) -> InvariantReport:
    """Per-leaf total-least-squares plane fits, rms relative to the leaf extent.

    A leaf of dimension l in R^m is planar when it lies in an affine subspace
    of dimension l + 1; for hypersurface leaves that is a hyperplane."""
    grid = f.grid
    l = len(grid.factors[which_factor])
    vals = []
    for idx, _ in _leaves(grid, which_factor):
        p = f.values[idx].reshape(-1, f.m)
        p = p[np.all(np.isfinite(p), axis=1)]
        if len(p) < l + 2:
            continue
        mid = p.mean(axis=0)
        ext = float(np.max(np.linalg.norm(p - mid, axis=1)))
        sv = np.linalg.svd(p - mid, compute_uv=False)
        extra = sv[l + 1:] if len(sv) > l + 1 else np.zeros(1)
        vals.append(float(np.sqrt(np.sum(extra ** 2) / len(p))) / ext)
    return _summary("planar_leaves", vals, tolerance(grid, C), _meta(grid, C, leaves=len(vals)))


def check_shape_operator(f: ImmersedGrid, N, expected, C: float = DEFAULT_C, mask=None,
                         name: str = "shape_operator") -> InvariantReport:
    """FD shape operator g^-1 II (II_ij = <d_i d_j f, N>) against expected
    coordinate operators, relative to the largest entry of the expected one."""
    g = geo.induced_metric(f)
    II = np.einsum("...ijm,...m->...ij", geo.hessian_vectors(f), np.asarray(N))
    A = np.linalg.solve(g, II)
    E = np.asarray(expected)
    r = np.max(np.abs(A - E), axis=(-1, -2)) / np.maximum(np.max(np.abs(E), axis=(-1, -2)), 1e-300)
    if mask is not None:
        r = np.where(mask, r, np.nan)
    return _summary(name, r, tolerance(f.grid, C), _meta(f.grid, C))


# ---------------------------------------------------------------- suites

def suite_cor_rpt(f: ImmersedGrid, C: float = DEFAULT_C, which_factor: int = 0) -> list:
    """Orthogonal net, adapted second fundamental form and spherical leaves."""
    out = [check_orthogonal_net(f, C), check_adapted_second_fundamental_form(f, C),
           check_spherical_leaves(f, which_factor, C, mode="extrinsic")]
    return sorted(out, key=lambda r: r.name)


def suite_enneper(f: ImmersedGrid, C: float = DEFAULT_C, N=None, centers=None, radii=None,
                  expected_cos=None, which_factor: int = 0) -> list:
    """Orthogonal curvature net, leaves in spheres, constant angle and a simple
    principal curvature along the second factor."""
    J = geo.jacobian(f)
    if N is None:
        N = geo.hypersurface_normal(J)
    out = [check_orthogonal_net(f, C), check_adapted_second_fundamental_form(f, C),
           check_spherical_leaves(f, which_factor, C, mode="contained", centers=centers, radii=radii)]
    if centers is None:
        centers = contained_leaf_centers(f, which_factor)
    out.append(check_constant_angle(f, centers, N, which_factor, C, expected=expected_cos))
    if len(f.grid.factors) > 1 and len(f.grid.factors[1 - which_factor]) == 1:
        out.append(check_principal_structure(f, C, simple_factor=1 - which_factor, N=N))
    return sorted(out, key=lambda r: r.name)


def contained_leaf_centers(f: ImmersedGrid, which_factor: int = 0) -> np.ndarray:
    """Per-node centers of the hull sphere fits of each leaf (NaN when plane-like)."""
    out = np.full(f.values.shape, np.nan)
    for idx, _ in _leaves(f.grid, which_factor):
        pts = f.values[idx].reshape(-1, f.m)
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        if len(pts) < f.m + 2:
            continue
        fit = fit_leaf_sphere(pts)
        if "plane-like" not in fit.flags:
            out[idx] = fit.center
    return out


def suite_gauss_map(f: ImmersedGrid, N: ImmersedGrid, C: float = DEFAULT_C, P=None, mask=None,
                    which_factor: int = 0) -> list:
    out = [check_gauss_map(f, N, C), check_planar_leaves(f, which_factor, C)]
    if P is not None:
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(P)
        good = np.isfinite(cond) & (cond < 1e4)
        if mask is not None:
            good &= mask
        Pinv = np.linalg.inv(np.where(good[..., None, None], P, np.eye(P.shape[-1])))
        out.append(check_shape_operator(f, N.values, -Pinv, C, good, name="gauss_shape_operator"))
    return sorted(out, key=lambda r: r.name)


def suite_polar_metric(metric: SampledMetric, C: float = DEFAULT_C, lam=None) -> list:
    return [check_polar_conformal(metric, C, lam)]


def suite_conformal(fmap: ImmersedGrid, C: float = DEFAULT_C, domain_metric=None, expected_factor=None) -> list:
    return [check_conformality(fmap, C, domain_metric, expected_factor)]


def suite_joachimsthal(f: ImmersedGrid, C: float = DEFAULT_C, plane_factor: int = 0, axis=None) -> list:
    from .conformal_special import check_joachimsthal
    return sorted(check_joachimsthal(f, plane_factor, C, axis), key=lambda r: r.name)


def all_passed(reports) -> bool:
    return all(r.passed for rep in reports for r in rep.flatten())


def first_failure(reports):
    for rep in reports:
        for r in rep.flatten():
            if not r.passed:
                return r
    return None


def format_reports(reports) -> str:
    recs = sorted((r for rep in reports for r in rep.flatten()), key=lambda r: r.name)
    return "".join(r.record() + "\n" for r in recs)
