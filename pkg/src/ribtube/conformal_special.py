"""Constant-angle hypersurfaces of Q_eps^n x R and their conformal images.

    g_s = C_eps(s) g + S_eps(s) N,     F(x, s) = g_s(x) + a(s) d/dt,

with (C, S) = (cos, sin), (1, s), (cosh, sinh) for eps = 1, 0, -1.  Three
maps take Q_eps^n x R to Euclidean space:

    sphere      (x, t) -> e^t x                                   factor e^t
    flat        (x, t) -> (x, t)                                  factor 1
    hyperbolic  (x0 e0 + ... + xn en, t) -> (x1..x_{n-1}, cos t, sin t)/x0
                                                                  factor 1/x0

Lorentzian vectors use standard coordinates with the timelike one first,
signature (-1, 1, ..., 1).  Points of H^n are given either in those
coordinates or in the pseudo-orthonormal basis e0..en of MinkowskiModel.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import verify
from .curves import ScalarAlongCurve
from .numerics import ImmersedGrid, ParamGrid, fit_plane, grid_diff, pseudo_inner

log = logging.getLogger(__name__)


class ConstantAngleError(ValueError):
    pass


class ConformalMapError(ValueError):
    pass


class LorentzError(ValueError):
    pass


# ---------------------------------------------------------------- Minkowski model

def lorentz_signature(dim: int) -> tuple:
    return (-1.0,) + (1.0,) * (dim - 1)


def gram_table(n: int) -> np.ndarray:
    """<e0,e0> = <en,en> = 0, <e0,en> = -1/2, <ei,ej> = delta_ij otherwise."""
    G = np.eye(n + 1)
    G[0, 0] = G[n, n] = 0.0
    G[0, n] = G[n, 0] = -0.5
    return G


@dataclass
class MinkowskiModel:
    """Pseudo-orthonormal basis of R^{n+1}_1; ``basis`` columns are e0..en in
    standard Lorentzian coordinates."""
    n: int
    basis: np.ndarray = field(default=None)
    gram_residual: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise LorentzError("need n >= 1")
        target = gram_table(self.n)
        if self.basis is None:
            # congruence G = V diag(l) V^T, eigenvalues ascending so the single
            # negative one lands on the timelike slot: B = diag(sqrt|l|) V^T
            lam, V = np.linalg.eigh(target)
            if not (lam[0] < 0 < lam[1]):
                raise LorentzError("Gram table is not Lorentzian")
            B = np.sqrt(np.abs(lam))[:, None] * V.T
            # e0, en future pointing (they share a light cone since <e0,en> < 0)
            if B[0, 0] < 0:
                B[:, [0, self.n]] *= -1.0
            self.basis = B
        self.basis = np.asarray(self.basis, dtype=float)
        eta = np.diag(self.signature)
        self.gram_residual = float(np.max(np.abs(self.basis.T @ eta @ self.basis - target)))
        if self.gram_residual > 1e-12:
            raise LorentzError(f"basis misses the Gram table by {self.gram_residual:.3e}")

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def signature(self) -> tuple:
        return lorentz_signature(self.n + 1)

    @property
    def gram(self) -> np.ndarray:
        return gram_table(self.n)

    def coords(self, p) -> np.ndarray:
        """e-basis coordinates (x0..xn) of points in standard coordinates."""
        p = np.asarray(p, dtype=float)
        return np.linalg.solve(self.basis, p.reshape(-1, self.dim).T).T.reshape(p.shape)

    def point(self, x) -> np.ndarray:
        """Standard coordinates of x0 e0 + ... + xn en."""
        return np.asarray(x, dtype=float) @ self.basis.T

    def inner_coords(self, x, y) -> np.ndarray:
        """<x, y> for e-basis coordinates."""
        return np.einsum("...i,ij,...j->...", np.asarray(x, dtype=float), self.gram, np.asarray(y, dtype=float))


def lorentz_cross(*vectors, signature=None) -> np.ndarray:
    """Cross product of m-1 vectors of R^m_1: <u1 ^ ... ^ u_{m-1}, w> = det(u1, ..., u_{m-1}, w)."""
    U = np.stack([np.asarray(v, dtype=float) for v in vectors], axis=-1)       # (..., m, m-1)
    m = U.shape[-2]
    if U.shape[-1] != m - 1:
        raise LorentzError(f"need {m - 1} vectors in R^{m}")
    s = np.asarray(signature if signature is not None else lorentz_signature(m), dtype=float)
    comps = []
    for k in range(m):
        rows = [r for r in range(m) if r != k]
        comps.append((-1) ** (k + m - 1) * np.linalg.det(U[..., rows, :]))
    return np.stack(comps, axis=-1) * s


# ---------------------------------------------------------------- constant angle

def C_eps(eps: int, s):
    s = np.asarray(s, dtype=float)
    return {1: np.cos(s), 0: np.ones_like(s), -1: np.cosh(s)}[eps]


def S_eps(eps: int, s):
    s = np.asarray(s, dtype=float)
    return {1: np.sin(s), 0: s, -1: np.sinh(s)}[eps]


def space_form_signature(eps: int, n: int) -> tuple:
    """Signature of the flat space R_mu^{n+|eps|} that carries Q_eps^n."""
    if eps == -1:
        return lorentz_signature(n + 1)
    return (1.0,) * (n + abs(eps))


@dataclass
class ConstantAngleSpec:
    eps: int
    g: ImmersedGrid          # hypersurface of Q_eps^n on the fiber grid
    N: np.ndarray            # unit normal of g tangent to Q_eps^n
    a: ScalarAlongCurve      # increasing height function on the s grid

    def __post_init__(self):
        if self.eps not in (-1, 0, 1):
            raise ConstantAngleError("eps must be -1, 0 or 1")
        self.N = np.asarray(self.N, dtype=float)
        if self.N.shape != self.g.values.shape:
            raise ConstantAngleError("N must have the shape of the g samples")
        sig = self.signature
        if len(sig) != self.g.m:
            raise ConstantAngleError(f"g must take values in R^{len(sig)} for eps = {self.eps}, n = {self.n}")
        self.g = ImmersedGrid(self.g.grid, self.g.values, sig)
        gv = self.g.values
        if self.eps != 0:
            q = float(np.max(np.abs(pseudo_inner(gv, gv, sig) - self.eps)))
            if q > 1e-10:
                raise ConstantAngleError(f"g leaves the quadric of Q_{self.eps}: {q:.3e}")
            t = float(np.max(np.abs(pseudo_inner(self.N, gv, sig))))
            if t > 1e-10:
                raise ConstantAngleError(f"N not tangent to Q_{self.eps}: <N, g> = {t:.3e}")
        u = float(np.max(np.abs(pseudo_inner(self.N, self.N, sig) - 1.0)))
        if u > 1e-10:
            raise ConstantAngleError(f"N is not a unit field: {u:.3e}")
        av = self.a.values
        if not (np.all(np.diff(av) > 0) and np.all(self.a.d() > 0)):
            raise ConstantAngleError("a must have positive derivative on the grid")

    @property
    def n(self) -> int:
        """Dimension of the space form: g is a hypersurface of Q_eps^n."""
        return self.g.grid.ndim + 1

    @property
    def signature(self) -> tuple:
        return space_form_signature(self.eps, self.n)

    @property
    def s_grid(self) -> ParamGrid:
        return self.a.grid


def parallel_family(spec: ConstantAngleSpec, s) -> np.ndarray:
    """g_s = C_eps(s) g + S_eps(s) N; a scalar s gives fiber samples, an array
    of shape (k,) gives samples with a trailing s axis before the vector axis."""
    s = np.asarray(s, dtype=float)
    g, N = spec.g.values, spec.N
    if s.ndim == 0:
        return C_eps(spec.eps, s) * g + S_eps(spec.eps, s) * N
    c, sn = C_eps(spec.eps, s), S_eps(spec.eps, s)
    return c[:, None] * g[..., None, :] + sn[:, None] * N[..., None, :]


def constant_angle_map(spec: ConstantAngleSpec) -> ImmersedGrid:
    """F(x, s) = (g_s(x), a(s)) in R_mu^{n+|eps|} x R on the product grid
    (fiber axes first, s last)."""
    sg = spec.s_grid
    grid = ParamGrid.product(spec.g.grid, sg)
    gs = parallel_family(spec, sg.axis(0))
    a = np.broadcast_to(spec.a.values, gs.shape[:-1])[..., None]
    vals = np.concatenate([gs, a], axis=-1)
    return ImmersedGrid(grid, vals, spec.signature + (1.0,))


# ---------------------------------------------------------------- conformal maps

def conformal_map_sphere(x, t) -> np.ndarray:
    """(x, t) -> e^t x on S^{n-1} x R; conformal with factor e^t."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    off = float(np.max(np.abs(np.linalg.norm(x, axis=-1) - 1.0))) if x.size else 0.0
    if off > 1e-10:
        raise ConformalMapError(f"x must be a unit vector: | |x| - 1 | = {off:.3e}")
    return np.exp(t)[..., None] * x


def conformal_map_flat(x, t) -> np.ndarray:
    """The standard isometry R^n x R -> R^{n+1}."""
    x = np.asarray(x, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    return np.concatenate([x, t[..., None]], axis=-1)


def conformal_map_hyperbolic(model: MinkowskiModel, p, t, tol: float = 1e-8) -> np.ndarray:
    """(x0 e0 + ... + xn en, t) -> (x1, ..., x_{n-1}, cos t, sin t) / x0.

    ``p`` holds e-basis coordinates; <p, p> = -1 (x0 xn = 1 + sum x_i^2) and
    x0 > 0 are required.  Conformal with factor 1/x0 for the product metric of
    H^n x R.
    """
    x = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.shape[-1] != model.dim:
        raise ConformalMapError(f"points need {model.dim} e-basis coordinates")
    q = model.inner_coords(x, x)
    scale = np.maximum(1.0, np.sum(x * x, axis=-1))
    bad = float(np.max(np.abs(q + 1.0) / scale)) if x.size else 0.0
    if bad > tol:
        raise ConformalMapError(f"point not on H^{model.n}: |<p,p> + 1| = {bad:.3e}")
    if np.any(x[..., 0] <= 0):
        raise ConformalMapError("x0 must be positive")
    t = np.broadcast_to(t, x.shape[:-1])
    out = np.concatenate([x[..., 1:model.n], np.cos(t)[..., None], np.sin(t)[..., None]], axis=-1)
    return out / x[..., :1]


def conformal_image(F: ImmersedGrid, eps: int, model: MinkowskiModel | None = None) -> ImmersedGrid:
    """f = Phi o F for a constant-angle map F into Q_eps^n x R."""
    X, t = F.values[..., :-1], F.values[..., -1]
    if eps == 1:
        vals = conformal_map_sphere(X, t)
    elif eps == 0:
        vals = conformal_map_flat(X, t)
    elif eps == -1:
        if model is None:
            model = MinkowskiModel(X.shape[-1] - 1)
        vals = conformal_map_hyperbolic(model, model.coords(X), t)
    else:
        raise ConstantAngleError("eps must be -1, 0 or 1")
    return ImmersedGrid(F.grid, vals)


def enneper_from_constant_angle(spec: ConstantAngleSpec, model: MinkowskiModel | None = None) -> ImmersedGrid:
    """Enneper-type hypersurface whose E0 leaves lie in concentric spheres
    (eps = 1), parallel hyperplanes (eps = 0) or hyperplanes through a common
    codimension-two subspace (eps = -1)."""
    return conformal_image(constant_angle_map(spec), spec.eps, model)


# ---------------------------------------------------------------- Joachimsthal surfaces

def hyperbolic_geodesic(grid: ParamGrid):
    """gamma(t) = (cosh t, sinh t, 0) and gamma' in R^3_1."""
    t = grid.axis(0)
    z = np.zeros_like(t)
    return np.stack([np.cosh(t), np.sinh(t), z], 1), np.stack([np.sinh(t), np.cosh(t), z], 1)


def hyperbolic_circle(grid: ParamGrid, r: float):
    """Unit-speed geodesic circle of radius r about (1, 0, 0) in H^2."""
    t = grid.axis(0) / np.sinh(r)
    ch, sh = np.cosh(r), np.sinh(r)
    g = np.stack([np.full_like(t, ch), sh * np.cos(t), sh * np.sin(t)], 1)
    dg = np.stack([np.zeros_like(t), -np.sin(t), np.cos(t)], 1)
    return g, dg


@dataclass
class JoachimsthalSurface:
    f: ImmersedGrid
    F: ImmersedGrid
    model: MinkowskiModel
    regular_mask: np.ndarray
    curve_residual: dict


def joachimsthal_surface(grid_t: ParamGrid, gamma, a: ScalarAlongCurve, dgamma=None,
                         model: MinkowskiModel | None = None, tol: float = 1e-8) -> JoachimsthalSurface:
    """f = Phi o F with F(t, s) = (cosh s gamma + sinh s gamma ^ gamma', a(s)).

    ``gamma`` samples a unit-speed curve of H^2 in R^3_1.  Without a closed
    form ``dgamma`` the tangent comes from finite differences and the speed
    is checked at C h^2 instead of ``tol``.  Nodes where the FD Jacobian of f
    loses rank are masked (NaN).
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != grid_t.counts + (3,):
        raise LorentzError("gamma must be sampled on the t grid with 3 Lorentzian coordinates")
    sig = lorentz_signature(3)
    speed_tol = tol
    if dgamma is None:
        dgamma = grid_diff(gamma, grid_t, 0)
        speed_tol = verify.tolerance(grid_t)
    dgamma = np.asarray(dgamma, dtype=float)
    res = {"hyperboloid": float(np.max(np.abs(pseudo_inner(gamma, gamma, sig) + 1.0))),
           "unit_speed": float(np.max(np.abs(pseudo_inner(dgamma, dgamma, sig) - 1.0))),
           "tangency": float(np.max(np.abs(pseudo_inner(gamma, dgamma, sig))))}
    if res["hyperboloid"] > tol or res["tangency"] > max(tol, speed_tol):
        raise LorentzError(f"gamma is not a curve of H^2: {res}")
    if res["unit_speed"] > speed_tol:
        raise LorentzError(f"gamma is not unit speed: {res['unit_speed']:.3e}")
    if np.any(gamma[:, 0] <= 0):
        raise LorentzError("gamma must lie on the upper sheet")
    N = lorentz_cross(gamma, dgamma)
    spec = ConstantAngleSpec(-1, ImmersedGrid(grid_t, gamma), N, a)
    F = constant_angle_map(spec)
    if model is None:
        model = MinkowskiModel(2)
    f = conformal_image(F, -1, model)
    J = geo.jacobian(f)
    sv = np.linalg.svd(J, compute_uv=False)
    regular = np.all(np.isfinite(sv), axis=-1) & (sv[..., -1] > 1e-8 * np.nanmax(sv[..., 0]))
    if not regular.all():
        log.info("Joachimsthal surface: %d singular nodes masked", int((~regular).sum()))
        f.values[~regular] = np.nan
    return JoachimsthalSurface(f, F, model, regular, res)


# ---------------------------------------------------------------- leaf-family checks

def _leaf_points(f: ImmersedGrid, which_factor: int):
    for idx, _ in geo.leaf_index_sets(f.grid, which_factor):
        p = f.values[idx].reshape(-1, f.m)
        yield p[np.all(np.isfinite(p), axis=1)]


def leaf_planes(f: ImmersedGrid, which_factor: int = 0) -> list:
    """Plane fits of every leaf that spans a plane."""
    out = []
    for p in _leaf_points(f, which_factor):
        if len(p) < f.m + 1:
            continue
        fit = fit_plane(p)
        if not fit.degenerate:
            out.append(fit)
    return out


def common_axis(normals, offsets):
    """Total-least-squares line {p + t u} lying in the planes <n_L, x> = d_L:
    u spans the smallest right singular vector of the stacked normals, p the
    least-squares point orthogonal to u.  Returns (p, u, direction residuals,
    offset residuals)."""
    Nm = np.asarray(normals, dtype=float)
    d = np.asarray(offsets, dtype=float)
    _, _, vt = np.linalg.svd(Nm)
    u = vt[-1]
    P = np.eye(Nm.shape[1]) - np.outer(u, u)
    p, *_ = np.linalg.lstsq(Nm @ P, d, rcond=None)
    p = P @ p
    return p, u, np.abs(Nm @ u), np.abs(Nm @ p - d)


def _line_distance(x, p, u):
    v = np.asarray(x, dtype=float) - p
    return np.linalg.norm(v - np.outer(v @ u, u) if v.ndim > 1 else v - (v @ u) * u, axis=-1)


def _leaf_lines(f: ImmersedGrid, which_factor: int):
    """(point, unit direction) of leaves that are straight lines."""
    out = []
    for p in _leaf_points(f, which_factor):
        if len(p) < 3:
            continue
        mid = p.mean(axis=0)
        _, sv, vt = np.linalg.svd(p - mid, full_matrices=False)
        if sv[1] <= 1e-10 * max(sv[0], 1e-300):
            out.append((mid, vt[0]))
    return out


def _sphere_on_axis(pts, p, u):
    """(axis distance of the containing sphere's center / radius, fit rms / radius^2).

    A leaf spanning all of R^3 has one sphere.  A planar leaf lies on a sphere
    centered on the axis when it is a circle whose own axis meets the line, or
    in the limit of infinite radius when its plane is orthogonal to the line;
    the better of the two readings is reported."""
    mid = pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(pts - mid, full_matrices=False)
    m = pts.shape[1]
    if sv[1] <= 1e-10 * max(sv[0], 1e-300):
        return float("nan"), float("nan")
    fit = verify.fit_leaf_sphere(pts)
    full = len(sv) >= m and sv[m - 1] > 1e-10 * sv[0]
    if full and "plane-like" not in fit.flags:
        return float(_line_distance(fit.center, p, u)) / fit.radius, fit.rms / fit.radius ** 2
    nrm = vt[-1]
    plane = np.sqrt(max(0.0, 1.0 - float(nrm @ u) ** 2))
    if "plane-like" in fit.flags or not np.isfinite(fit.radius):
        return plane, 0.0
    w = np.cross(nrm, u)
    sw = np.linalg.norm(w)
    gap = abs(float((fit.center - p) @ w)) / sw if sw > 1e-12 else float(_line_distance(fit.center, p, u))
    circle = (gap / fit.radius, fit.rms / fit.radius ** 2)
    return (plane, 0.0) if plane <= max(circle) else circle


def check_joachimsthal(f: ImmersedGrid, plane_factor: int = 0, C: float = verify.DEFAULT_C,
                       axis=None) -> list:
    """Leaves of ``plane_factor`` lie in planes through a common line; leaves of
    the other factor lie on spheres centered on that line.

    The line is recovered by total least squares from the leaf planes.  When
    ``axis = (point, direction)`` is given it is used instead and compared
    with the recovered one; straight-line leaves (which lie in a pencil of
    planes) are then tested for coplanarity with it.  Without an axis, leaf
    planes must determine one.
    """
    grid = f.grid
    tol = verify.tolerance(grid, C)
    meta = verify._meta(grid, C)
    vals = f.values[np.all(np.isfinite(f.values), axis=-1)]
    scale = max(float(np.max(np.linalg.norm(vals - vals.mean(axis=0), axis=1))), 1e-300)
    planes = leaf_planes(f, plane_factor)
    lines = _leaf_lines(f, plane_factor)
    out = [verify.check_planar_leaves(f, plane_factor, C)]
    rec = None
    if len(planes) >= 2:
        nrm = np.array([pl.normal for pl in planes])
        off = np.array([pl.offset for pl in planes])
        rec = common_axis(nrm, off)
        if f.m == 3 and np.linalg.svd(nrm, compute_uv=False)[1] < 1e-8:
            rec = None                      # all planes parallel: no line
    if axis is not None:
        p = np.asarray(axis[0], dtype=float)
        u = np.asarray(axis[1], dtype=float)
        u = u / np.linalg.norm(u)
    elif rec is not None:
        p, u = rec[0], rec[1]
    else:
        out.append(verify.InvariantReport("joach_common_axis", float("nan"), float("nan"), tol,
                                          dict(meta, planes=len(planes), lines=len(lines),
                                               reason="leaf planes do not determine a line")))
        return out
    parts = []
    if planes:
        nrm = np.array([pl.normal for pl in planes])
        off = np.array([pl.offset for pl in planes])
        parts += [verify._summary("axis_direction", np.abs(nrm @ u), tol, meta),
                  verify._summary("axis_offset", np.abs(nrm @ p - off) / scale, tol, meta)]
    if lines and f.m == 3:
        cop = [abs(float((q - p) @ np.cross(u, w))) / scale for q, w in lines]
        parts.append(verify._summary("axis_coplanar_lines", cop, tol, meta))
    if axis is not None and rec is not None:
        ang = np.sqrt(max(0.0, 1.0 - float(rec[1] @ u) ** 2))
        parts.append(verify._summary("axis_recovered", [max(ang, float(_line_distance(rec[0], p, u)) / scale)],
                                     tol, meta))
    out.append(verify._combine("joach_common_axis", parts, tol,
                               dict(meta, planes=len(planes), lines=len(lines),
                                    point=p.tolist(), direction=u.tolist())))
    # pairwise intersection lines against the axis
    scatter = []
    if f.m == 3:
        for i, j in itertools.combinations(range(len(planes)), 2):
            ni, nj = planes[i].normal, planes[j].normal
            w = np.cross(ni, nj)
            sw = np.linalg.norm(w)
            if sw < 1e-3:          # nearly parallel planes carry no line information
                continue
            w = w / sw
            q = np.linalg.solve(np.vstack([ni, nj, w]), np.array([planes[i].offset, planes[j].offset, 0.0]))
            ang = np.sqrt(max(0.0, 1.0 - float(w @ u) ** 2))
            scatter.append(max(ang, float(_line_distance(q, p, u)) / scale))
    if scatter or planes:
        out.append(verify._summary("joach_pairwise_lines", scatter, tol, dict(meta, pairs=len(scatter))))
    # spheres of the other factor
    dist, fitrms = [], []
    for pts in _leaf_points(f, 1 - plane_factor):
        if len(pts) < f.m + 2:
            continue
        d, r = _sphere_on_axis(pts, p, u)
        if np.isfinite(d):
            dist.append(d)
            fitrms.append(r)
    out.append(verify._summary("joach_sphere_fit", fitrms, tol, meta))
    out.append(verify._summary("joach_centers_on_axis", dist, tol, dict(meta, leaves=len(dist))))
    log.info("Joachimsthal axis through %s along %s", np.array2string(p, precision=4), np.array2string(u, precision=4))
    return out


def check_concentric_leaves(f: ImmersedGrid, which_factor: int = 0, C: float = verify.DEFAULT_C):
    """Sphere fits of the leaves share one center: max |c_L - c_mean| / mean radius."""
    tol = verify.tolerance(f.grid, C)
    fits = [verify.fit_leaf_sphere(p) for p in _leaf_points(f, which_factor) if len(p) >= f.m + 2]
    fits = [ft for ft in fits if "plane-like" not in ft.flags]
    if not fits:
        return verify.InvariantReport("concentric_leaves", float("nan"), float("nan"), tol, {"leaves": 0})
    cs = np.array([ft.center for ft in fits])
    r = float(np.mean([ft.radius for ft in fits]))
    c0 = cs.mean(axis=0)
    return verify._summary("concentric_leaves", np.linalg.norm(cs - c0, axis=1) / r, tol,
                           verify._meta(f.grid, C, leaves=len(fits), center=c0.tolist()))


def check_parallel_planes(f: ImmersedGrid, which_factor: int = 0, C: float = verify.DEFAULT_C):
    """Plane fits of the leaves are parallel: sine of the angle between each
    normal and the first one."""
    tol = verify.tolerance(f.grid, C)
    planes = leaf_planes(f, which_factor)
    if not planes:
        return verify.InvariantReport("parallel_planes", float("nan"), float("nan"), tol, {"leaves": 0})
    n0 = planes[0].normal
    sines = [np.sqrt(max(0.0, 1.0 - float(pl.normal @ n0) ** 2)) for pl in planes]
    return verify._summary("parallel_planes", sines, tol, verify._meta(f.grid, C, leaves=len(planes)))
