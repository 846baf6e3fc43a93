"""Shared numerical substrate: parameter grids, finite differences, RK4,
cumulative quadrature, algebraic sphere / total-least-squares plane fits and
bilinear forms of Euclidean or Lorentzian signature.

Grids are tensor products of uniform axes.  An axis may be flagged periodic,
in which case the last node sits one step before the period closes and
differences wrap around instead of switching to one-sided stencils.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson

log = logging.getLogger(__name__)


class GridError(ValueError):
    pass


class IntegrationDiverged(RuntimeError):
    """Raised when an integrator produces a non-finite state."""

    def __init__(self, last_valid: int, msg: str = ""):
        self.last_valid = last_valid
        super().__init__(msg or f"integration diverged after node {last_valid}")


@dataclass(frozen=True)
class ParamGrid:
    counts: tuple
    lo: tuple
    hi: tuple
    periodic: tuple = ()
    factors: tuple = ()

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        d = len(counts)
        if not (len(lo) == len(hi) == d):
            raise GridError("counts, lo and hi must have equal length")
        periodic = tuple(bool(p) for p in self.periodic) or (False,) * d
        if len(periodic) != d:
            raise GridError("periodic flags must match the number of axes")
        factors = tuple(tuple(int(a) for a in blk) for blk in self.factors) or (tuple(range(d)),)
        flat = sorted(a for blk in factors for a in blk)
        if flat != list(range(d)):
            raise GridError(f"factor partition {factors} does not cover axes 0..{d - 1} exactly once")
        for c, a, b in zip(counts, lo, hi):
            if c < 2:
                raise GridError("each axis needs at least 2 samples")
            if not b > a:
                raise GridError("axis ranges must satisfy hi > lo")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "periodic", periodic)
        object.__setattr__(self, "factors", factors)

    @classmethod
    def uniform(cls, spans: Sequence, counts: Sequence, periodic=(), factors=()):
        """Grid from ``[(lo, hi), ...]``; a periodic axis gets ``hi`` moved one step
        inside so that ``hi + h`` closes the period."""
        periodic = tuple(periodic) or (False,) * len(counts)
        lo, hi = [], []
        for (a, b), c, p in zip(spans, counts, periodic):
            lo.append(a)
            hi.append(b - (b - a) / c if p else b)
        return cls(tuple(counts), tuple(lo), tuple(hi), periodic, factors)

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def h(self) -> tuple:
        return tuple((b - a) / (c - 1) for a, b, c in zip(self.lo, self.hi, self.counts))

    @property
    def hmax(self) -> float:
        return max(self.h)

    @property
    def shape(self) -> tuple:
        return self.counts

    def axis(self, i: int) -> np.ndarray:
        return np.linspace(self.lo[i], self.hi[i], self.counts[i])

    def axes(self) -> list:
        return [self.axis(i) for i in range(self.ndim)]

    def mesh(self) -> list:
        return np.meshgrid(*self.axes(), indexing="ij")

    def factor_of(self, axis: int) -> int:
        for k, blk in enumerate(self.factors):
            if axis in blk:
                return k
        raise GridError(f"axis {axis} not in any factor")

    def sub(self, axes: Sequence) -> "ParamGrid":
        """Grid restricted to the given axes (one factor holding all of them)."""
        axes = list(axes)
        return ParamGrid(tuple(self.counts[a] for a in axes), tuple(self.lo[a] for a in axes),
                         tuple(self.hi[a] for a in axes), tuple(self.periodic[a] for a in axes))

    @staticmethod
    def product(*grids: "ParamGrid") -> "ParamGrid":
        """Cartesian product, one factor per input grid, axes in input order."""
        counts, lo, hi, per, factors = [], [], [], [], []
        k = 0
        for g in grids:
            counts += g.counts
            lo += g.lo
            hi += g.hi
            per += g.periodic
            factors.append(tuple(range(k, k + g.ndim)))
            k += g.ndim
        return ParamGrid(tuple(counts), tuple(lo), tuple(hi), tuple(per), tuple(factors))

    def refined(self, factor: int = 2) -> "ParamGrid":
        """Same ranges with the step divided by ``factor``."""
        counts = []
        hi = []
        for c, a, b, p in zip(self.counts, self.lo, self.hi, self.periodic):
            if p:
                period = (b - a) * c / (c - 1)
                counts.append(c * factor)
                hi.append(a + period - period / (c * factor))
            else:
                counts.append((c - 1) * factor + 1)
                hi.append(b)
        return ParamGrid(tuple(counts), self.lo, tuple(hi), self.periodic, self.factors)

    def with_counts(self, counts: Sequence) -> "ParamGrid":
        spans = []
        for c, a, b, p in zip(self.counts, self.lo, self.hi, self.periodic):
            spans.append((a, a + (b - a) * c / (c - 1)) if p else (a, b))
        return ParamGrid.uniform(spans, counts, self.periodic, self.factors)


def _check_signature(signature) -> tuple:
    sig = tuple(int(s) for s in signature)
    if any(s not in (-1, 1) for s in sig):
        raise GridError("signature entries must be +1 or -1")
    if sig.count(-1) > 1:
        raise GridError("at most one timelike direction is supported")
    return sig


@dataclass
class ImmersedGrid:
    grid: ParamGrid
    values: np.ndarray
    signature: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[:-1] != self.grid.counts:
            raise GridError(f"value array shape {self.values.shape} does not match grid counts {self.grid.counts}")
        self.signature = _check_signature(self.signature or (1,) * self.values.shape[-1])
        if len(self.signature) != self.values.shape[-1]:
            raise GridError("signature length must equal the ambient dimension")

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    @property
    def ndim(self) -> int:
        return self.grid.ndim

    @property
    def mask(self) -> np.ndarray:
        """True on nodes carrying finite values."""
        return np.all(np.isfinite(self.values), axis=-1)

    def with_values(self, values) -> "ImmersedGrid":
        return ImmersedGrid(self.grid, values, self.signature)


@dataclass
class FitResult:
    model: str
    center: np.ndarray  # sphere center, or plane unit normal
    radius: float       # sphere radius, or plane offset
    rms: float
    flags: tuple = field(default_factory=tuple)

    @property
    def normal(self) -> np.ndarray:
        return self.center

    @property
    def offset(self) -> float:
        return self.radius

    @property
    def degenerate(self) -> bool:
        return "degenerate" in self.flags or "plane-like" in self.flags


# ---------------------------------------------------------------- differences

def diff(values, h: float, axis: int, periodic: bool = False) -> np.ndarray:
    """First derivative along ``axis`` of an array sampled with step ``h``.

    Second-order central in the interior; on open axes the end nodes use the
    one-sided three-point formula (numpy's ``edge_order=2``).
    """
    v = np.asarray(values, dtype=float)
    if v.shape[axis] < 3:
        raise GridError("finite differences need at least 3 samples along the axis")
    if periodic:
        return (np.roll(v, -1, axis) - np.roll(v, 1, axis)) / (2.0 * h)
    return np.gradient(v, h, axis=axis, edge_order=2)


def diff2(values, h: float, axis: int, periodic: bool = False) -> np.ndarray:
    """Second derivative along ``axis``, second order everywhere.

    Interior nodes use the three-point stencil, open ends the four-point
    one-sided stencil (2, -5, 4, -1)/h^2.
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = v.shape[0]
    if periodic:
        if n < 3:
            raise GridError("need at least 3 samples")
        out = (np.roll(v, -1, 0) - 2.0 * v + np.roll(v, 1, 0)) / h ** 2
        return np.moveaxis(out, 0, axis)
    if n < 4:
        raise GridError("second differences need at least 4 samples along the axis")
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / h ** 2
    out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h ** 2
    out[-1] = (2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]) / h ** 2
    return np.moveaxis(out, 0, axis)


def grid_diff(values, grid: ParamGrid, axis: int) -> np.ndarray:
    return diff(values, grid.h[axis], axis, grid.periodic[axis])


def grid_diff2(values, grid: ParamGrid, axis: int) -> np.ndarray:
    return diff2(values, grid.h[axis], axis, grid.periodic[axis])


def central_diff(grid_values: ImmersedGrid, axis: int) -> ImmersedGrid:
    """Partial derivative of a sampled map along one grid axis."""
    g = grid_values.grid
    if not 0 <= axis < g.ndim:
        raise GridError(f"axis {axis} out of range for a {g.ndim}-D grid")
    if g.counts[axis] < 3:
        raise GridError("central_diff needs at least 3 samples along the axis")
    return ImmersedGrid(g, grid_diff(grid_values.values, g, axis), grid_values.signature)


# ---------------------------------------------------------------- integration

def rk4_integrate(rhs: Callable, y0, s_range, steps: int,
                  project: Callable | None = None, project_every: int = 50) -> np.ndarray:
    """Classical RK4 on a uniform grid of ``steps + 1`` nodes.

    ``rhs(s, y)`` returns dy/ds.  ``project`` (optional) is applied to the state
    every ``project_every`` steps; it is how frame integrators re-orthonormalize.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    a, b = float(s_range[0]), float(s_range[1])
    h = (b - a) / steps
    y = np.array(y0, dtype=float)
    out = np.empty((steps + 1,) + y.shape)
    out[0] = y
    for i in range(steps):
        s = a + i * h
        k1 = rhs(s, y)
        k2 = rhs(s + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(s + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(s + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(i)
        if project is not None and (i + 1) % project_every == 0:
            y = project(y)
        out[i + 1] = y
    return out


def quadrature(samples, h: float, axis: int = 0) -> np.ndarray:
    """Running integral from the first sample; Simpson for >= 3 samples."""
    y = np.asarray(samples, dtype=float)
    if y.shape[axis] < 2:
        raise ValueError("quadrature needs at least 2 samples")
    if y.shape[axis] == 2:
        y = np.moveaxis(y, axis, 0)
        out = np.stack([np.zeros_like(y[0]), 0.5 * h * (y[0] + y[1])])
        return np.moveaxis(out, 0, axis)
    return cumulative_simpson(y, dx=h, axis=axis, initial=0.0)


# ---------------------------------------------------------------- fitting

def fit_sphere(points) -> FitResult:
    """Algebraic sphere fit: ||p||^2 = 2 c.p + k with k = R^2 - ||c||^2.

    Points are centred and scaled before the solve for conditioning.  A nearly
    singular design matrix (points affinely flat) is flagged ``plane-like``.
    """
    p = np.asarray(points, dtype=float).reshape(-1, np.shape(points)[-1])
    p = p[np.all(np.isfinite(p), axis=1)]
    npts, m = p.shape
    if npts < m + 2:
        raise ValueError(f"fit_sphere needs at least {m + 2} points, got {npts}")
    mid = p.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((p - mid) ** 2, axis=1)))
    if scale == 0.0:
        raise ValueError("all points coincide")
    q = (p - mid) / scale
    A = np.hstack([2.0 * q, np.ones((npts, 1))])
    b = np.sum(q * q, axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    flags = ()
    if sv[-1] < 1e-9 * sv[0]:
        flags = ("plane-like",)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = mid + scale * sol[:m]
    r2 = scale ** 2 * (sol[m] + sol[:m] @ sol[:m])
    if not r2 > 0.0 or flags:
        flags = ("plane-like",)
        r2 = abs(r2)
    res = np.sum((p - c) ** 2, axis=1) - r2
    return FitResult("sphere", c, float(np.sqrt(r2)), float(np.sqrt(np.mean(res ** 2))), flags)


def fit_plane(points) -> FitResult:
    """Total-least-squares hyperplane <n, p> = offset via SVD of centred points."""
    p = np.asarray(points, dtype=float).reshape(-1, np.shape(points)[-1])
    p = p[np.all(np.isfinite(p), axis=1)]
    npts, m = p.shape
    if npts < m + 1:
        raise ValueError(f"fit_plane needs at least {m + 1} points, got {npts}")
    mid = p.mean(axis=0)
    _, sv, vt = np.linalg.svd(p - mid, full_matrices=False)
    n = vt[-1]
    off = float(n @ mid)
    # fixed orientation: non-negative offset, else first significant entry positive
    if off < -1e-14 or (abs(off) <= 1e-14 and n[np.argmax(np.abs(n) > 1e-12)] < 0):
        n, off = -n, -off
    flags = ()
    if len(sv) < m or sv[m - 2] <= 1e-10 * max(sv[0], 1e-300):
        flags = ("degenerate",)
    rms = 0.0 if flags else float(np.sqrt(np.mean((p @ n - off) ** 2)))
    return FitResult("plane", n, off, rms, flags)


def pseudo_inner(u, v, signature) -> np.ndarray:
    """sum_i s_i u_i v_i, broadcast over leading axes."""
    s = np.asarray(signature, dtype=float)
    return np.einsum("...i,i,...i->...", np.asarray(u, dtype=float), s, np.asarray(v, dtype=float))
