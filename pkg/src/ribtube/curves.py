"""Unit-speed curves with parallel orthonormal normal frames, built by
integrating the frame system

    gamma' = T,   T' = sum_i k_i xi_i,   xi_i' = -k_i T,

(with T' = -gamma + sum_i k_i xi_i for curves on the unit sphere) and the
Combescure ODE beta_i' + phi' k_i = 0 along them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import ParamGrid, diff, diff2, quadrature, rk4_integrate

log = logging.getLogger(__name__)


class FrameError(ValueError):
    pass


@dataclass
class ScalarAlongCurve:
    """Samples of a real function on a 1-D grid.

    ``fn``/``dfn``/``d2fn`` are optional closed forms; when present they are
    used for off-grid evaluation (RK4 half steps), otherwise samples are
    interpolated linearly and derivatives come from finite differences.
    """
    grid: ParamGrid
    values: np.ndarray
    deriv: np.ndarray | None = None
    fn: Callable | None = None
    dfn: Callable | None = None
    d2fn: Callable | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.counts:
            raise FrameError("samples do not match the grid")
        if self.deriv is not None:
            self.deriv = np.asarray(self.deriv, dtype=float)

    @classmethod
    def from_function(cls, grid: ParamGrid, fn, dfn=None, d2fn=None):
        s = grid.axis(0)
        vals = np.broadcast_to(np.asarray(fn(s), dtype=float), s.shape).copy()
        der = None if dfn is None else np.broadcast_to(np.asarray(dfn(s), dtype=float), s.shape).copy()
        return cls(grid, vals, der, fn, dfn, d2fn)

    @classmethod
    def constant(cls, grid: ParamGrid, c: float):
        return cls.from_function(grid, lambda s: np.full_like(np.asarray(s, dtype=float), c),
                                 lambda s: np.zeros_like(np.asarray(s, dtype=float)),
                                 lambda s: np.zeros_like(np.asarray(s, dtype=float)))

    @property
    def s(self) -> np.ndarray:
        return self.grid.axis(0)

    def at(self, s):
        if self.fn is not None:
            return np.asarray(self.fn(s), dtype=float)
        return np.interp(s, self.s, self.values)

    def d(self) -> np.ndarray:
        """Derivative samples (supplied, closed form, or FD)."""
        if self.deriv is not None:
            return self.deriv
        return diff(self.values, self.grid.h[0], 0)

    def d_at(self, s):
        if self.dfn is not None:
            return np.asarray(self.dfn(s), dtype=float)
        return np.interp(s, self.s, self.d())

    def d2(self) -> np.ndarray:
        if self.d2fn is not None:
            return np.broadcast_to(np.asarray(self.d2fn(self.s), dtype=float), self.values.shape).copy()
        if self.deriv is not None:
            return diff(self.deriv, self.grid.h[0], 0)
        return diff2(self.values, self.grid.h[0], 0)

    def derivative_residual(self) -> float:
        """max |supplied derivative - FD of values|."""
        if self.deriv is None:
            return 0.0
        return float(np.max(np.abs(self.deriv - diff(self.values, self.grid.h[0], 0))))


@dataclass
class SampledCurveFrame:
    grid: ParamGrid
    gamma: np.ndarray   # (N, m)
    T: np.ndarray       # (N, m)
    xi: np.ndarray      # (N, m-1, m)
    k: np.ndarray       # (N, m-1)
    kfuncs: list = field(default_factory=list)
    drift_log: list = field(default_factory=list)
    c: float = 0.0      # 1 for curves on the unit sphere (xi tangent to it)

    @property
    def m(self) -> int:
        return self.gamma.shape[1]

    @property
    def s(self) -> np.ndarray:
        return self.grid.axis(0)

    @property
    def h(self) -> float:
        return self.grid.h[0]

    def acceleration(self) -> np.ndarray:
        """Closed-form gamma'' = sum k_i xi_i - c gamma at the nodes."""
        return np.einsum("ni,nim->nm", self.k, self.xi) - self.c * self.gamma

    def residuals(self) -> dict:
        """Numerical checks of the frame invariants (max norms)."""
        h = self.h
        n = len(self.s)
        E = np.concatenate([self.T[:, None, :], self.xi], axis=1)
        if self.c != 0.0:
            E = np.concatenate([self.gamma[:, None, :], E], axis=1)
        G = np.einsum("nim,njm->nij", E, E)
        return {
            "unit_tangent": float(np.max(np.abs(np.linalg.norm(self.T, axis=1) - 1.0))),
            "orthonormality": float(np.max(np.abs(G - np.eye(E.shape[1])[None]))),
            "parallel_frame": float(np.max(np.linalg.norm(
                diff(self.xi, h, 0) + self.k[:, :, None] * self.T[:, None, :], axis=2))),
            "tangent": float(np.max(np.linalg.norm(diff(self.gamma, h, 0) - self.T, axis=1))),
            "acceleration": float(np.max(np.linalg.norm(diff2(self.gamma, h, 0) - self.acceleration(), axis=1)))
            if n >= 4 else 0.0,
        }


def _as_curvature(k, grid: ParamGrid) -> ScalarAlongCurve:
    if isinstance(k, ScalarAlongCurve):
        return k
    if callable(k):
        return ScalarAlongCurve.from_function(grid, k)
    return ScalarAlongCurve.constant(grid, float(k))


def _gram_schmidt(E: np.ndarray) -> np.ndarray:
    """Orthonormalize rows of E in order."""
    Q, R = np.linalg.qr(E.T)
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0] = 1.0
    return (Q * sgn).T


def integrate_frame(k: Sequence, init_point, init_frame, grid: ParamGrid | None = None,
                    correct_every: int = 50) -> SampledCurveFrame:
    """RK4 integration of the parallel-frame system on the curvature grid.

    ``init_frame`` rows are (T, xi_1, ..., xi_{m-1}).  Every ``correct_every``
    steps the frame is re-orthonormalized; the size of each correction is kept
    in ``drift_log`` and logged at debug level.
    """
    E0 = np.asarray(init_frame, dtype=float)
    m = E0.shape[1]
    if E0.shape != (m, m):
        raise FrameError("initial frame must be m x m (T followed by m-1 normals)")
    if np.max(np.abs(E0 @ E0.T - np.eye(m))) > 1e-10:
        raise FrameError("initial frame is not orthonormal within 1e-10")
    if len(k) != m - 1:
        raise FrameError(f"need {m - 1} curvature functions for ambient dimension {m}")
    if grid is None:
        grid = next(kk.grid for kk in k if isinstance(kk, ScalarAlongCurve))
    ks = [_as_curvature(kk, grid) for kk in k]
    for kk in ks:
        if not np.all(np.isfinite(kk.values)):
            raise FrameError("curvature samples must be finite")
    p0 = np.asarray(init_point, dtype=float)

    def rhs(s, y):
        Y = y.reshape(m + 1, m)
        kv = np.array([kk.at(s) for kk in ks])
        out = np.empty_like(Y)
        out[0] = Y[1]
        out[1] = kv @ Y[2:]
        out[2:] = -kv[:, None] * Y[1][None, :]
        return out.ravel()

    drift = []

    def project(y):
        Y = y.reshape(m + 1, m).copy()
        E = _gram_schmidt(Y[1:])
        mag = float(np.max(np.abs(E - Y[1:])))
        drift.append(mag)
        log.debug("frame drift correction %.3e", mag)
        Y[1:] = E
        return Y.ravel()

    y0 = np.concatenate([p0, E0.ravel()])
    steps = grid.counts[0] - 1
    ys = rk4_integrate(rhs, y0, (grid.lo[0], grid.hi[0]), steps, project=project,
                       project_every=correct_every).reshape(-1, m + 1, m)
    kv = np.stack([kk.values for kk in ks], axis=1)
    return SampledCurveFrame(grid, ys[:, 0], ys[:, 1], ys[:, 2:], kv, ks, drift)


def integrate_sphere_frame(k: Sequence, init_point, init_frame, grid: ParamGrid | None = None,
                           correct_every: int = 50) -> SampledCurveFrame:
    """Frame of a unit-speed curve on the unit sphere S^{m-1} in R^m:

        gamma' = T,   T' = -gamma + sum_i k_i xi_i,   xi_i' = -k_i T,

    ``init_frame`` rows (T, xi_1, ..., xi_{m-2}) must be orthonormal and
    orthogonal to the unit vector ``init_point``.
    """
    p0 = np.asarray(init_point, dtype=float)
    E0 = np.asarray(init_frame, dtype=float)
    m = p0.shape[0]
    if E0.shape != (m - 1, m):
        raise FrameError("initial frame must be (m-1) x m: T then m-2 normals tangent to the sphere")
    full = np.vstack([p0, E0])
    if np.max(np.abs(full @ full.T - np.eye(m))) > 1e-10:
        raise FrameError("initial point and frame must be orthonormal within 1e-10")
    if len(k) != m - 2:
        raise FrameError(f"need {m - 2} curvature functions on S^{m - 1}")
    if grid is None:
        grid = next(kk.grid for kk in k if isinstance(kk, ScalarAlongCurve))
    ks = [_as_curvature(kk, grid) for kk in k]

    def rhs(s, y):
        Y = y.reshape(m, m)
        kv = np.array([kk.at(s) for kk in ks])
        out = np.empty_like(Y)
        out[0] = Y[1]
        out[1] = -Y[0] + kv @ Y[2:]
        out[2:] = -kv[:, None] * Y[1][None, :]
        return out.ravel()

    drift = []

    def project(y):
        Y = y.reshape(m, m)
        E = _gram_schmidt(Y)
        mag = float(np.max(np.abs(E - Y)))
        drift.append(mag)
        log.debug("sphere frame drift correction %.3e", mag)
        return E.ravel()

    steps = grid.counts[0] - 1
    ys = rk4_integrate(rhs, full.ravel(), (grid.lo[0], grid.hi[0]), steps, project=project,
                       project_every=correct_every).reshape(-1, m, m)
    # samples are put back on the sphere exactly; the space-form transforms
    # downstream rely on <gamma, T> = <gamma, xi> = 0 to rounding
    ys = np.stack([_gram_schmidt(Y) for Y in ys])
    kv = np.stack([kk.values for kk in ks], axis=1) if ks else np.zeros((steps + 1, 0))
    return SampledCurveFrame(grid, ys[:, 0], ys[:, 1], ys[:, 2:], kv, ks, drift, c=1.0)


def solve_combescure_along_curve(curve: SampledCurveFrame, phi: ScalarAlongCurve,
                                 beta_init) -> list:
    """beta_i(s) = beta_i(0) - int_0^s phi'(t) k_i(t) dt for each normal index."""
    b0 = np.asarray(beta_init, dtype=float)
    nn = curve.xi.shape[1]
    if b0.shape != (nn,):
        raise FrameError(f"beta_init must have {nn} entries")
    dphi = phi.d()
    h = curve.h
    out = []
    for i in range(nn):
        integrand = -dphi * curve.k[:, i]
        vals = b0[i] + quadrature(integrand, h)
        out.append(ScalarAlongCurve(curve.grid, vals, integrand))
    res = combescure_curve_residual(curve, phi, out)
    log.info("Combescure ODE residual along curve: %.3e", res)
    return out


def combescure_curve_residual(curve: SampledCurveFrame, phi: ScalarAlongCurve, betas) -> float:
    """max_i max_s |FD(beta_i)' + phi' k_i|."""
    dphi = phi.d()
    r = 0.0
    for i, b in enumerate(betas):
        fd = diff(b.values if isinstance(b, ScalarAlongCurve) else np.asarray(b, dtype=float), curve.h, 0)
        r = max(r, float(np.max(np.abs(fd + dphi * curve.k[:, i]))))
    return r


def normal_field(curve: SampledCurveFrame, coeffs) -> np.ndarray:
    """sum_i c_i xi_i as ambient samples; coeffs are arrays or ScalarAlongCurve."""
    c = np.stack([b.values if isinstance(b, ScalarAlongCurve) else np.broadcast_to(b, curve.s.shape)
                  for b in coeffs], axis=1)
    return np.einsum("ni,nim->nm", c, curve.xi[:, :c.shape[1]])
