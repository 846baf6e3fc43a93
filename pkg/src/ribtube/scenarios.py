"""Scenario configs and builders behind the command-line front end.

A config is a YAML mapping::

    scenario: partial-tube        # one of SCENARIOS
    label: cyclide                # file stem for outputs (default: scenario)
    resolution: 64                # samples per axis, or a list in grid-axis order
    tolerance: {C: 10}            # residual tolerance C h^2
    seed: 0                       # for randomized parameter blocks
    output: {dir: out, obj: true}
    params: {...}                 # scenario-specific, see the README

Each builder returns a ScenarioResult holding the emitted grids, the
construction checks and the inputs the verification suites need.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sympy as sp
import yaml

from . import conformal_special as cs
from . import enneper as en
from . import expressions as ex
from . import geometry as geo
from . import partial_tube as pt
from . import ribaucour as rb
from . import verify
from .curves import (FrameError, ScalarAlongCurve, integrate_frame, integrate_sphere_frame,
                     solve_combescure_along_curve)
from .numerics import GridError, ImmersedGrid, ParamGrid

log = logging.getLogger(__name__)

SCENARIOS = ("ribaucour-transform", "partial-tube", "surface-family", "hypersurface-foliation", "channel",
             "gauss-tube", "enneper-planar", "enneper-general", "enneper-family", "enneper-normalize",
             "joachimsthal", "constant-angle", "metric-check")
SUITES = ("cor-rpt", "enneper", "joachimsthal", "gauss-map", "polar-metric", "conformal")
TUBE_SCENARIOS = ("partial-tube", "surface-family", "hypersurface-foliation", "channel")
MIN_RESOLUTION = 8


class ConfigError(ValueError):
    """Invalid or incomplete scenario config."""


class ConstructionError(RuntimeError):
    """A construction precondition failed (degenerate data, every node irregular, ...)."""


# errors raised by the geometry modules that mean "this data cannot be built"
CONSTRUCTION_ERRORS = (pt.TubeError, rb.EmptyResultError, rb.QuadricError, en.GaussTubeError, en.TripleError,
                       en.InversionPreconditionError, cs.ConstantAngleError, cs.ConformalMapError,
                       cs.LorentzError, FrameError, GridError, verify.MetricError, ConstructionError)


# ---------------------------------------------------------------- config

@dataclass
class ScenarioConfig:
    scenario: str
    label: str
    params: dict
    resolution: object = 64
    C: float = verify.DEFAULT_C
    seed: int = 0
    out_dir: str | None = None
    obj: bool = True
    base_dir: Path = field(default_factory=Path)
    digest: str = ""

    def counts(self, n_axes: int, where: str = "resolution") -> tuple:
        r = self.resolution
        if isinstance(r, (list, tuple)):
            if len(r) != n_axes:
                raise ConfigError(f"{where}: this scenario has {n_axes} grid axes, resolution lists {len(r)}")
            out = tuple(r)
        else:
            out = (r,) * n_axes
        for c in out:
            if isinstance(c, bool) or not isinstance(c, int):
                raise ConfigError(f"{where}: resolutions must be integers, got {c!r}")
            if c < MIN_RESOLUTION:
                raise ConfigError(f"{where}: resolution {c} is below the minimum of {MIN_RESOLUTION} per axis")
        return out


def parse_config(data, base_dir=".", digest: str = "") -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - {"scenario", "label", "resolution", "tolerance", "seed", "output", "params"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    name = data.get("scenario")
    if name not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}; got {name!r}")
    tol = data.get("tolerance") or {}
    if not isinstance(tol, dict):
        raise ConfigError("tolerance must be a mapping like {C: 10}")
    C = _num(tol.get("C", verify.DEFAULT_C), "tolerance.C")
    if not C > 0:
        raise ConfigError("tolerance.C must be positive")
    out = data.get("output") or {}
    if not isinstance(out, dict):
        raise ConfigError("output must be a mapping")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    params = data.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("params must be a mapping")
    label = str(data.get("label", name))
    if not label or any(ch in label for ch in "/\\ \t"):
        raise ConfigError("label must be a non-empty name without spaces or path separators")
    cfg = ScenarioConfig(name, label, params, data.get("resolution", 64), C, seed,
                         out.get("dir"), bool(out.get("obj", True)), Path(base_dir), digest)
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(data, path.parent, hashlib.sha256(raw).hexdigest())


# ---------------------------------------------------------------- config helpers

def _num(v, where: str) -> float:
    if isinstance(v, bool):
        raise ConfigError(f"{where}: expected a number")
    if isinstance(v, (int, float)):
        return float(v)
    try:
        e = ex.parse(v, ())
        return float(e)
    except (ex.ExpressionError, TypeError) as exc:
        raise ConfigError(f"{where}: expected a number or constant expression ({exc})") from None


def _vec(v, where: str, n: int | None = None) -> np.ndarray:
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{where}: expected a list of numbers")
    out = np.array([_num(x, f"{where}[{i}]") for i, x in enumerate(v)])
    if n is not None and len(out) != n:
        raise ConfigError(f"{where}: expected {n} entries, got {len(out)}")
    return out


def _req(block: dict, key: str, where: str):
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected a mapping")
    if key not in block:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return block[key]


def _span(v, where: str) -> tuple:
    s = _vec(v, where, 2)
    if not s[1] > s[0]:
        raise ConfigError(f"{where}: range must satisfy hi > lo")
    return float(s[0]), float(s[1])


def _fn(spec, variables, where: str, cfg: ScenarioConfig):
    try:
        return ex.function(spec, variables, cfg.base_dir)
    except ex.ExpressionError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _along(spec, grid: ParamGrid, where: str, cfg: ScenarioConfig, var: str = "s") -> ScalarAlongCurve:
    """ScalarAlongCurve from a function spec, or from a {random: ...} block."""
    if isinstance(spec, dict) and "random" in spec:
        return _random_along(spec["random"], grid, where, cfg)
    f = _fn(spec, (var,), where, cfg)
    try:
        return ScalarAlongCurve.from_function(grid, f, f.d(), f.d2())
    except ex.ExpressionError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _random_along(block, grid: ParamGrid, where: str, cfg: ScenarioConfig) -> ScalarAlongCurve:
    """mean + sum_k amp_k sin(k s + phase_k), amplitudes amplitude * U(-1, 1) / k,
    drawn from the config seed."""
    if not isinstance(block, dict):
        raise ConfigError(f"{where}.random: expected a mapping")
    mean = _num(block.get("mean", 0.0), f"{where}.random.mean")
    amp = _num(block.get("amplitude", 0.3), f"{where}.random.amplitude")
    modes = int(block.get("modes", 3))
    rng = np.random.default_rng(cfg.seed)
    a = amp * rng.uniform(-1.0, 1.0, modes) / np.arange(1, modes + 1)
    ph = rng.uniform(0.0, 2.0 * np.pi, modes)
    k = np.arange(1, modes + 1)

    def fn(s):
        s = np.asarray(s, dtype=float)
        return mean + np.sum(a * np.sin(np.multiply.outer(s, k) + ph), axis=-1)

    def dfn(s):
        s = np.asarray(s, dtype=float)
        return np.sum(a * k * np.cos(np.multiply.outer(s, k) + ph), axis=-1)

    def d2fn(s):
        s = np.asarray(s, dtype=float)
        return -np.sum(a * k * k * np.sin(np.multiply.outer(s, k) + ph), axis=-1)
    return ScalarAlongCurve.from_function(grid, fn, dfn, d2fn)


@dataclass
class Patch:
    grid: ParamGrid
    variables: tuple
    exprs: sp.Matrix | None = None
    values: np.ndarray | None = None

    def immersion(self) -> ImmersedGrid:
        return ImmersedGrid(self.grid, self.values)

    def partials(self) -> np.ndarray:
        """Exact partials, shape counts + (m, d)."""
        cols = []
        mesh = self.grid.mesh()
        for v in self.variables:
            d = self.exprs.diff(sp.Symbol(v, real=True))
            cols.append(ex.lambdify_vector(d, self.variables)(*mesh))
        return np.stack(cols, axis=-1)


def _patch(block, counts: tuple, where: str, default_vars=("t",), need_map: bool = True) -> Patch:
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected a mapping")
    variables = tuple(block.get("variables", default_vars))
    if len(counts) != len(variables):
        raise ConfigError(f"{where}: {len(variables)} variables but {len(counts)} resolutions")
    ranges = _req(block, "ranges", where)
    if not isinstance(ranges, list) or len(ranges) != len(variables):
        raise ConfigError(f"{where}.ranges: need one [lo, hi] per variable")
    spans = [_span(r, f"{where}.ranges[{i}]") for i, r in enumerate(ranges)]
    per = block.get("periodic", False)
    per = tuple(bool(p) for p in per) if isinstance(per, list) else (bool(per),) * len(variables)
    if len(per) != len(variables):
        raise ConfigError(f"{where}.periodic: need one flag per variable")
    grid = ParamGrid.uniform(spans, counts, periodic=per)
    if not need_map:
        return Patch(grid, variables)
    try:
        exprs = ex.vector_expr(_req(block, "map", where), variables)
        vals = ex.lambdify_vector(exprs, variables)(*grid.mesh())
    except ex.ExpressionError as exc:
        raise ConfigError(f"{where}.map: {exc}") from None
    return Patch(grid, variables, exprs, vals)


def _curve(block, n: int, cfg: ScenarioConfig, where: str = "params.curve"):
    """Arc-length curve from curvature functions: in R^m (m-1 curvatures) or,
    with ``sphere: true``, on S^{m-1} (m-2 curvatures)."""
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected a mapping")
    lo, hi = _span(_req(block, "s", where), f"{where}.s")
    per = bool(block.get("periodic", False))
    grid = ParamGrid.uniform([(lo, hi)], (n,), periodic=(per,))
    ks_spec = _req(block, "curvatures", where)
    if not isinstance(ks_spec, list):
        raise ConfigError(f"{where}.curvatures: expected a list of function specs")
    ks = [_along(k, grid, f"{where}.curvatures[{i}]", cfg) for i, k in enumerate(ks_spec)]
    sphere = bool(block.get("sphere", False))
    m = len(ks) + (2 if sphere else 1)
    if m < 2 or (sphere and m < 3):
        raise ConfigError(f"{where}.curvatures: too few curvature functions")
    if sphere:
        p0 = _vec(block.get("point", [1.0] + [0.0] * (m - 1)), f"{where}.point", m)
        E0 = block.get("frame", np.eye(m)[1:].tolist())
        E0 = np.array([_vec(r, f"{where}.frame", m) for r in E0])
        return integrate_sphere_frame(ks, p0, E0, grid)
    p0 = _vec(block.get("point", [0.0] * m), f"{where}.point", m)
    E0 = block.get("frame", np.eye(m).tolist())
    E0 = np.array([_vec(r, f"{where}.frame", m) for r in E0])
    return integrate_frame(ks, p0, E0, grid)


def _combescure(params, curve, cfg: ScenarioConfig):
    phi = _along(_req(params, "phi", "params"), curve.grid, "params.phi", cfg)
    nn = curve.xi.shape[1]
    b0 = _vec(params.get("beta0", [0.0] * nn), "params.beta0", nn)
    return phi, solve_combescure_along_curve(curve, phi, b0)


def _resolution_split(cfg: ScenarioConfig, n_fiber: int) -> tuple:
    counts = cfg.counts(n_fiber + 1)
    return counts[:n_fiber], counts[n_fiber]


# ---------------------------------------------------------------- results

@dataclass
class ScenarioResult:
    config: ScenarioConfig
    grids: dict                      # name -> (ImmersedGrid, kind); first entry is the primary output
    checks: list                     # InvariantReports of the construction
    suites: dict                     # suite name -> kwargs for run_suite
    timings: dict
    tube: pt.TubeEvaluation | None = None
    default_suite: str | None = None

    @property
    def primary(self) -> ImmersedGrid:
        return next(iter(self.grids.values()))[0]


class _Timer:
    def __init__(self):
        self.timings = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = round(time.perf_counter() - self.t, 6)
        return _Stage()


def _report(name, value, tol, meta=None) -> verify.InvariantReport:
    v = float(value)
    return verify.InvariantReport(name, v, v, float(tol), dict(meta or {}))


# ---------------------------------------------------------------- tube scenarios

def _tube_checks(ev: pt.TubeEvaluation, C: float) -> list:
    return [verify.check_metric_prediction(ev.f, pt.predicted_metric(ev), C, ev.regular_mask),
            *verify.suite_cor_rpt(ev.f, C)]


def _require_regular(ev):
    if not np.any(ev.regular_mask):
        raise ConstructionError("every node irregular: phi, F or D degenerate")


def build_partial_tube(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    fb = _req(p, "fiber", "params")
    nvar = len(fb.get("variables", ("t",))) if isinstance(fb, dict) else 1
    cf, cs_ = _resolution_split(cfg, nvar)
    with T("curve"):
        curve = _curve(_req(p, "curve", "params"), cs_, cfg)
        phi, betas = _combescure(p, curve, cfg)
    fiber = _patch(fb, cf, "params.fiber").immersion()
    with T("tube"):
        spec = pt.PartialTubeSpec.from_curve(curve, phi, betas, fiber)
        ev = pt.build_partial_tube(spec)
        _require_regular(ev)
    with T("checks"):
        checks = _tube_checks(ev, cfg.C)
    return ScenarioResult(cfg, {"tube": (ev.f, "immersion")}, checks, {"cor-rpt": {"f": ev.f}},
                          T.timings, ev, "cor-rpt")


def build_surface_family(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    cf, cs_ = _resolution_split(cfg, 1)
    with T("curve"):
        curve = _curve(_req(p, "curve", "params"), cs_, cfg)
        phi, betas = _combescure(p, curve, cfg)
    fiber = _patch(_req(p, "fiber", "params"), cf, "params.fiber").immersion()
    with T("surface"):
        ev = pt.surface_family(curve, phi, betas, fiber, tol=cfg.C * max(fiber.grid.hmax, curve.h) ** 2)
        _require_regular(ev)
    with T("checks"):
        checks = _tube_checks(ev, cfg.C)
        checks.append(verify.check_geodesic_curvature_constancy(ev.f, 0, cfg.C))
        if ev.f.m == 3:
            checks.append(verify.check_curvature_lines(ev.f, cfg.C))
    return ScenarioResult(cfg, {"surface": (ev.f, "immersion")}, checks, {"cor-rpt": {"f": ev.f}},
                          T.timings, ev, "cor-rpt")


def _foliation_checks(ev, C):
    checks = _tube_checks(ev, C)
    checks.append(verify.check_orthogonal_leaf_spheres(ev.f, 0, C))
    return checks


def build_hypersurface_foliation(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    gb = _req(p, "g", "params")
    nvar = len(gb.get("variables", ("u", "v"))) if isinstance(gb, dict) else 2
    cf, cs_ = _resolution_split(cfg, nvar)
    with T("curve"):
        curve = _curve(_req(p, "curve", "params"), cs_, cfg)
        phi, betas = _combescure(p, curve, cfg)
    g = _patch(gb, cf, "params.g", default_vars=("u", "v")).immersion()
    with T("hypersurface"):
        ev = pt.hypersurface_foliation(curve, phi, betas, g)
        _require_regular(ev)
    with T("checks"):
        checks = _foliation_checks(ev, cfg.C)
    return ScenarioResult(cfg, {"hypersurface": (ev.f, "immersion")}, checks, {"cor-rpt": {"f": ev.f}},
                          T.timings, ev, "cor-rpt")


def build_channel(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    pb = _req(p, "patch", "params")
    nvar = len(pb.get("variables", ("u", "v"))) if isinstance(pb, dict) else 2
    cf, cs_ = _resolution_split(cfg, nvar)
    with T("curve"):
        curve = _curve(_req(p, "curve", "params"), cs_, cfg)
        phi, betas = _combescure(p, curve, cfg)
    patch = _patch(pb, cf, "params.patch", default_vars=("u", "v"), need_map=False)
    height = _num(p.get("height", 0.0), "params.height")
    with T("hypersurface"):
        ev = pt.channel_hypersurface(curve, phi, betas, patch.grid, height)
        _require_regular(ev)
    with T("checks"):
        checks = _foliation_checks(ev, cfg.C)
        checks.append(verify.check_principal_structure(ev.f, cfg.C, cluster_factor=0))
    return ScenarioResult(cfg, {"channel": (ev.f, "immersion")}, checks, {"cor-rpt": {"f": ev.f}},
                          T.timings, ev, "cor-rpt")


# ---------------------------------------------------------------- Ribaucour transforms

def _unit_normal(patch: Patch) -> np.ndarray:
    J = patch.partials()
    if J.shape[-2:] != (3, 2):
        raise ConfigError("params.surface: expected a two-parameter surface in R^3")
    n = np.cross(J[..., 0], J[..., 1])
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def build_ribaucour_transform(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    counts = cfg.counts(2)
    sf = _patch(_req(p, "surface", "params"), counts, "params.surface", default_vars=("u", "v"))
    f = sf.immersion()
    N = _unit_normal(sf)
    data_b = _req(p, "data", "params")
    kind = _req(data_b, "type", "params.data")
    tol = verify.tolerance(f.grid, cfg.C)
    oracle = None
    with T("data"):
        if kind == "inversion":
            c = _vec(data_b.get("center", [0, 0, 0]), "params.data.center", 3)
            r = _num(data_b.get("radius", 1.0), "params.data.radius")
            data = rb.inversion_data(f, c, r)
            v = f.values - c
            oracle = ("inversion_oracle", c + r * r * v / np.sum(v * v, axis=-1, keepdims=True), 1e-10)
        elif kind == "parallel":
            d = _num(data_b.get("distance", 1.0), "params.data.distance")
            data = rb.parallel_data(f, d * N)
            oracle = ("parallel_oracle", f.values + d * N, 1e-12)
        elif kind == "general":
            a = _num(data_b.get("a", 1.0), "params.data.a")
            P0 = _vec(data_b.get("center", [0, 0, 0]), "params.data.center", 3)
            w = _vec(data_b.get("w", [0, 0, 0]), "params.data.w", 3)
            c0 = _num(data_b.get("c", 1.0), "params.data.c")
            b = _num(data_b.get("b", 0.0), "params.data.b")
            # phi = a|f - P0|^2/2 + <f, w> + c, beta = <a(f - P0) + w, N> N + b N
            # solves the Combescure condition on any surface
            vv = a * (f.values - P0) + w
            phi = a * np.sum((f.values - P0) ** 2, axis=-1) / 2.0 + f.values @ w + c0
            vn = np.sum(vv * N, axis=-1)[..., None] * N
            beta = vn + b * N
            # f_* grad phi is the tangent part of vv
            data = rb.build_combescure(f, phi, beta, grad_phi=vv - vn)
        else:
            raise ConfigError("params.data.type must be inversion, parallel or general")
    with T("transform"):
        res = rb.ribaucour_transform(data)
    meta = verify._meta(f.grid, cfg.C)
    checks = [_report("combescure_condition", data.combescure_residual, tol, meta),
              _report("ribaucour_condition_i", res.residual_i, tol, meta),
              _report("ribaucour_condition_ii", res.residual_ii, tol, meta)]
    if oracle is not None:
        name, exact, otol = oracle
        ok = res.regular_mask
        err = np.where(ok, np.linalg.norm(res.f_tilde.values - exact, axis=-1), np.nan)
        checks.append(verify._summary(name, err, otol, dict(meta, tol_kind="absolute")))
    grids = {"transform": (res.f_tilde, "immersion"), "surface": (f, "immersion")}
    return ScenarioResult(cfg, grids, checks, {}, T.timings)


# ---------------------------------------------------------------- Gauss tubes and Enneper hypersurfaces

def _round_net(block, cfg: ScenarioConfig, where: str = "params.net"):
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected a mapping")
    n = int(block.get("n", 2))
    if n not in (2, 3):
        raise ConfigError(f"{where}.n must be 2 or 3")
    counts = cfg.counts(n)
    xr = block.get("x", [0, "2*pi"]) if n == 2 else block.get("x", [[0.3, 2.8], [0, "2*pi"]])
    spans = [_span(xr, f"{where}.x")] if n == 2 else [_span(r, f"{where}.x[{i}]") for i, r in enumerate(xr)]
    spans.append(_span(_req(block, "s", where), f"{where}.s"))
    if not (-np.pi / 2 < spans[-1][0] and spans[-1][1] < np.pi / 2):
        raise ConfigError(f"{where}.s is a latitude and must lie inside (-pi/2, pi/2)")
    per = bool(block.get("periodic", n == 2))
    if n == 3:
        per = (False, per, False)
    N, g0 = en.round_sphere_net(counts, spans, n=n, periodic=per)
    S = N.grid.mesh()[-1]
    tube = en.gauss_tube_from_grid(N, g0, C=cfg.C, v0=np.cos(S), rho=np.ones_like(S))
    return tube


def _tube_reports(tube: en.GaussTube, C: float) -> list:
    tol = verify.tolerance(tube.grid, C)
    meta = verify._meta(tube.grid, C)
    out = []
    for k, v in sorted(tube.residuals.items()):
        if k in ("unit", "quadric"):
            out.append(_report(f"gauss_tube_{k}", v, 1e-10, dict(meta, tol_kind="absolute")))
        elif k == "phi_slice_variation" and not tube.spherical:
            continue
        else:
            out.append(_report(f"gauss_tube_{k}", v, tol, meta))
    return out


def _polar_metric_of(N: ImmersedGrid) -> verify.SampledMetric:
    return verify.SampledMetric(N.grid, geo.induced_metric(N))


def build_gauss_tube(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    with T("tube"):
        if "net" in p:
            tube = _round_net(p["net"], cfg)
        else:
            fb = _req(p, "fiber", "params")
            nvar = len(fb.get("variables", ("y",))) if isinstance(fb, dict) else 1
            cf, cs_ = _resolution_split(cfg, nvar)
            cb = dict(_req(p, "curve", "params"))
            cb["sphere"] = True
            curve = _curve(cb, cs_, cfg)
            phi, betas = _combescure(p, curve, cfg)
            fiber = _patch(fb, cf, "params.fiber", default_vars=("y",)).immersion()
            tube = en.build_gauss_tube(curve, phi, betas, fiber, cfg.C)
    with T("checks"):
        metric = _polar_metric_of(tube.N)
        checks = _tube_reports(tube, cfg.C) + verify.suite_polar_metric(metric, cfg.C)
    return ScenarioResult(cfg, {"gauss": (tube.N, "gauss-map")}, checks,
                          {"polar-metric": {"metric": metric}}, T.timings, None, "polar-metric")


def _fiber_fn(spec, tube: en.GaussTube, where, cfg):
    names = ("x",) if tube.d0 == 1 else ("x1", "x2")
    return _fn(spec, names, where, cfg)


def _planar_pipeline(p, cfg: ScenarioConfig, T: _Timer, where="params"):
    with T("tube"):
        tube = _round_net(_req(p, "net", where), cfg, f"{where}.net")
    U = _fiber_fn(_req(p, "U", where), tube, f"{where}.U", cfg)
    V = _fn(_req(p, "V", where), ("s",), f"{where}.V", cfg)
    with T("support"):
        sup = en.support_function(tube, U, V, _num(p.get("s_anchor", 0.0), f"{where}.s_anchor"))
    with T("parametrization"):
        gp = en.gauss_parametrization(tube, sup, cfg.C)
    return tube, sup, gp


def build_enneper_planar(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    tube, sup, gp = _planar_pipeline(cfg.params, cfg, T)
    tol = verify.tolerance(tube.grid, cfg.C)
    meta = verify._meta(tube.grid, cfg.C, masked=gp.masked_nodes)
    with T("checks"):
        checks = [_report("support_mixed_hessian", sup.mixed_residual, tol, meta),
                  _report("gauss_differential", gp.differential_residual, tol, meta)]
        suite_kw = {"f": gp.f, "N": gp.N, "P": gp.P, "mask": gp.regular_mask}
        checks += verify.suite_gauss_map(gp.f, gp.N, cfg.C, P=gp.P, mask=gp.regular_mask)
    grids = {"surface": (gp.f, "immersion"), "gauss": (gp.N, "gauss-map")}
    return ScenarioResult(cfg, grids, checks, {"gauss-map": suite_kw}, T.timings, None, "gauss-map")


def _triple_source(p, cfg: ScenarioConfig, T: _Timer):
    """(GaussTube, EnneperTriple) from an explicit triple on a round net, or
    by inverting a Gauss-parametrized hypersurface with planar leaves."""
    src = p.get("source", "triple")
    if src == "triple":
        tb = _req(p, "triple", "params")
        with T("tube"):
            tube = _round_net(_req(p, "net", "params"), cfg)
        sg = tube.s_grid
        s = sp.Symbol("s", real=True)
        try:
            gexpr = ex.vector_expr(_req(tb, "gamma", "params.triple"), ("s",))
        except ex.ExpressionError as exc:
            raise ConfigError(f"params.triple.gamma: {exc}") from None
        if len(gexpr) != tube.N.m:
            raise ConfigError(f"params.triple.gamma needs {tube.N.m} components")
        gfn = ex.lambdify_vector(gexpr, ("s",))
        dgfn = ex.lambdify_vector(gexpr.diff(s), ("s",))
        al = _along(_req(tb, "alpha", "params.triple"), sg, "params.triple.alpha", cfg)
        be = _along(_req(tb, "beta", "params.triple"), sg, "params.triple.beta", cfg)
        sv = sg.axis(0)
        triple = en.EnneperTriple(sg, gfn(sv), al, be, dgfn(sv), gfn, dgfn)
        return tube, triple, None
    if src == "inversion":
        ib = _req(p, "inversion", "params")
        _, _, gp = _planar_pipeline(p, cfg, T)
        c = _vec(_req(ib, "center", "params.inversion"), "params.inversion.center", gp.f.m)
        r = _num(ib.get("radius", 1.0), "params.inversion.radius")
        with T("inversion"):
            v = gp.f.values - c
            d2 = np.sum(v * v, axis=-1, keepdims=True)
            if np.nanmin(d2) < 1e-12:
                raise ConstructionError("the planar-leaf hypersurface passes through the inversion center")
            # translate so the inversion center sits at the origin
            ft = ImmersedGrid(gp.f.grid, r * r * v / d2)
            Nt = en.inverted_gauss_map(gp.f, gp.N, c)
            tube = en.gauss_tube_from_grid(Nt, C=cfg.C, require_spherical=False)
            triple, lres = en.extract_triple(ft, tube)
        return tube, triple, lres
    raise ConfigError("params.source must be 'triple' or 'inversion'")


def _enneper_checks(es: en.EnneperSurface, tube: en.GaussTube, C: float):
    tol = verify.tolerance(tube.grid, C)
    meta = verify._meta(tube.grid, C)
    kw = {"f": es.f, "N": tube.N.values, "centers": es.centers, "radii": es.radii,
          "expected_cos": es.cos_theta}
    checks = [_report("enneper_constraint", es.constraint_residual, tol, meta),
              _report("enneper_leaf_distance", es.distance_residual, tol, meta),
              _report("enneper_angle_spread", es.angle_spread, tol, meta)]
    checks += verify.suite_enneper(es.f, C, **{k: v for k, v in kw.items() if k != "f"})
    return checks, kw


def _lambda(p, grid, cfg, required=False):
    if "lambda" not in p:
        if required:
            raise ConfigError("params: missing required key 'lambda'")
        return None
    return _along(p["lambda"], grid, "params.lambda", cfg)


def build_enneper_general(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    tube, triple, lres = _triple_source(cfg.params, cfg, T)
    lam = _lambda(cfg.params, triple.grid, cfg)
    if lam is not None:
        triple = en.deform_family(triple, lam)
    with T("enneper"):
        es = en.enneper_parametrization(tube, triple, cfg.C)
    with T("checks"):
        checks, kw = _enneper_checks(es, tube, cfg.C)
        if lres is not None:
            checks.append(_report("triple_extraction", lres, verify.tolerance(tube.grid, cfg.C)))
    grids = {"hypersurface": (es.f, "immersion"), "gauss": (tube.N, "gauss-map")}
    return ScenarioResult(cfg, grids, checks, {"enneper": kw}, T.timings, None, "enneper")


def build_enneper_family(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    tube, triple, _ = _triple_source(cfg.params, cfg, T)
    lam = _lambda(cfg.params, triple.grid, cfg, required=True)
    with T("deform"):
        base = en.enneper_parametrization(tube, triple, cfg.C)
        deformed = en.deform_family(triple, lam)
        es = en.enneper_parametrization(tube, deformed, cfg.C)
    with T("checks"):
        checks, kw = _enneper_checks(es, tube, cfg.C)
        tol = verify.tolerance(tube.grid, cfg.C)
        checks.append(_report("family_base_constraint", base.constraint_residual, tol))
    grids = {"deformed": (es.f, "immersion"), "base": (base.f, "immersion"), "gauss": (tube.N, "gauss-map")}
    return ScenarioResult(cfg, grids, checks, {"enneper": kw}, T.timings, None, "enneper")


def build_enneper_normalize(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    tube, triple, _ = _triple_source(p, cfg, T)
    lam = _lambda(p, triple.grid, cfg)
    if lam is not None:
        triple = en.deform_family(triple, lam)
    e = _vec(p["e"], "params.e", triple.m) if "e" in p else None
    radius = _num(p.get("radius", 1.0), "params.radius")
    with T("normalize"):
        nz = en.normalize_through_point(triple, e)
        es = en.enneper_parametrization(tube, nz.triple, cfg.C)
    with T("planarize"):
        inv = en.planarize_by_inversion(es, radius=radius, C=cfg.C)
    tol = verify.tolerance(tube.grid, cfg.C)
    meta = verify._meta(tube.grid, cfg.C)
    with T("checks"):
        checks, kw = _enneper_checks(es, tube, cfg.C)
        checks.append(_report("through_point", nz.through_point_residual, tol, meta))
        for k, v in sorted(inv.precondition.items()):
            checks.append(_report(f"leaf_sphere_{k}", v, tol, meta))
        checks.append(inv.planar)
    t = nz.triple
    tvals = np.concatenate([t.gamma, t.alpha.values[:, None], t.beta.values[:, None],
                            nz.lam.values[:, None]], axis=1)
    grids = {"hypersurface": (es.f, "immersion"),
             "triple": (ImmersedGrid(t.grid, tvals), "triple gamma alpha beta lambda"),
             "planar": (inv.f, "immersion"), "gauss": (tube.N, "gauss-map")}
    return ScenarioResult(cfg, grids, checks, {"enneper": kw}, T.timings, None, "enneper")


# ---------------------------------------------------------------- Joachimsthal and constant-angle surfaces

def _lorentz_normal(g, dg):
    n = cs.lorentz_cross(g, dg)
    q = np.sum(cs.lorentz_signature(3) * n * n, axis=-1)
    return n / np.sqrt(q)[..., None]


def build_joachimsthal(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    nt, ns = cfg.counts(2)
    cb = _req(p, "curve", "params")
    gt = ParamGrid.uniform([_span(_req(cb, "t", "params.curve"), "params.curve.t")], (nt,))
    gs = ParamGrid.uniform([_span(_req(p, "s", "params"), "params.s")], (ns,))
    kind = cb.get("type", "geodesic")
    axis = None
    if kind == "geodesic":
        gam, dg = cs.hyperbolic_geodesic(gt)
        axis = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    elif kind == "circle":
        gam, dg = cs.hyperbolic_circle(gt, _num(_req(cb, "radius", "params.curve"), "params.curve.radius"))
    elif kind == "expression":
        try:
            ge = ex.vector_expr(_req(cb, "gamma", "params.curve"), ("t",))
        except ex.ExpressionError as exc:
            raise ConfigError(f"params.curve.gamma: {exc}") from None
        if len(ge) != 3:
            raise ConfigError("params.curve.gamma needs 3 Lorentzian coordinates (timelike first)")
        tv = gt.axis(0)
        gam = ex.lambdify_vector(ge, ("t",))(tv)
        dg = ex.lambdify_vector(ge.diff(sp.Symbol("t", real=True)), ("t",))(tv)
    else:
        raise ConfigError("params.curve.type must be geodesic, circle or expression")
    if "axis" in p:
        ab = p["axis"]
        axis = (_vec(_req(ab, "point", "params.axis"), "params.axis.point", 3),
                _vec(_req(ab, "direction", "params.axis"), "params.axis.direction", 3))
    a = _along(_req(p, "a", "params"), gs, "params.a", cfg)
    with T("surface"):
        J = cs.joachimsthal_surface(gt, gam, a, dg)
        if not J.regular_mask.any():
            raise ConstructionError("every node irregular")
    kw = {"f": J.f, "axis": axis}
    with T("checks"):
        checks = cs.check_joachimsthal(J.f, 0, cfg.C, axis)
    return ScenarioResult(cfg, {"surface": (J.f, "immersion")}, checks, {"joachimsthal": kw},
                          T.timings, None, "joachimsthal")


def _conformal_patch(eps: int, n: int):
    """A chart of Q_eps^2 x R with its embedding (for the induced domain
    metric), the image under Phi and the expected conformal factor."""
    if eps == 1:
        g = ParamGrid.uniform([(0.3, 2.8), (0.0, 2.0 * np.pi), (-1.0, 1.0)], (n, n, n))
        A, B, Tt = g.mesh()
        x = np.stack([np.sin(A) * np.cos(B), np.sin(A) * np.sin(B), np.cos(A)], -1)
        dom = ImmersedGrid(g, np.concatenate([x, Tt[..., None]], -1))
        return ImmersedGrid(g, cs.conformal_map_sphere(x, Tt)), dom, np.exp(Tt)
    if eps == 0:
        g = ParamGrid.uniform([(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)], (n, n, n))
        X, Y, Tt = g.mesh()
        x = np.stack([X, Y], -1)
        dom = ImmersedGrid(g, np.stack([X, Y, Tt], -1))
        return ImmersedGrid(g, cs.conformal_map_flat(x, Tt)), dom, np.ones_like(X)
    M = cs.MinkowskiModel(2)
    g = ParamGrid.uniform([(-1.0, 1.0), (0.5, 2.0), (0.0, 2.0 * np.pi)], (n, n, n), factors=((0, 1), (2,)))
    Y, X0, Tt = g.mesh()
    x = np.stack([X0, X0 * Y, (1.0 + (X0 * Y) ** 2) / X0], -1)
    dom = ImmersedGrid(g, np.concatenate([M.point(x), Tt[..., None]], -1), (-1.0, 1.0, 1.0, 1.0))
    return ImmersedGrid(g, cs.conformal_map_hyperbolic(M, x, Tt)), dom, 1.0 / X0


def build_constant_angle(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    eps = int(_num(_req(p, "eps", "params"), "params.eps"))
    if eps not in (-1, 0, 1):
        raise ConfigError("params.eps must be -1, 0 or 1")
    nx, ns = cfg.counts(2)
    gb = _req(p, "g", "params")
    patch = _patch(gb, (nx,), "params.g", default_vars=("x",))
    x = sp.Symbol(patch.variables[0], real=True)
    e = patch.exprs
    want = 3 if eps != 0 else 2
    if len(e) != want:
        raise ConfigError(f"params.g.map needs {want} components for eps = {eps}")
    if eps == 1:
        e = e / sp.sqrt(sum(c ** 2 for c in e))       # project onto the unit sphere
    xv = patch.grid.axis(0)
    gv = ex.lambdify_vector(e, patch.variables)(xv)
    dg = ex.lambdify_vector(e.diff(x), patch.variables)(xv)
    if eps == 1:
        N = np.cross(gv, dg)
        N = N / np.linalg.norm(N, axis=-1, keepdims=True)
    elif eps == 0:
        N = np.stack([dg[:, 1], -dg[:, 0]], -1)
        N = N / np.linalg.norm(N, axis=-1, keepdims=True)
    else:
        N = _lorentz_normal(gv, dg)
    gs = ParamGrid.uniform([_span(_req(p, "s", "params"), "params.s")], (ns,))
    a = _along(_req(p, "a", "params"), gs, "params.a", cfg)
    with T("surface"):
        spec = cs.ConstantAngleSpec(eps, ImmersedGrid(patch.grid, gv, cs.space_form_signature(eps, 2)), N, a)
        F = cs.constant_angle_map(spec)
        f = cs.conformal_image(F, eps)
    nc = int(p.get("conformal_resolution", 24))
    if nc < MIN_RESOLUTION:
        raise ConfigError(f"params.conformal_resolution must be at least {MIN_RESOLUTION}")
    with T("conformal"):
        fmap, dom, factor = _conformal_patch(eps, nc)
        dmetric = geo.induced_metric(dom)
    with T("checks"):
        checks = verify.suite_conformal(fmap, cfg.C, dmetric, factor)
        if eps == 1:
            checks.append(cs.check_concentric_leaves(f, 0, cfg.C))
        elif eps == 0:
            checks.append(cs.check_parallel_planes(f, 0, cfg.C))
            checks.append(verify.check_planar_leaves(f, 0, cfg.C))
        else:
            checks += cs.check_joachimsthal(f, 0, cfg.C)
    grids = {"surface": (f, "immersion"), "conformal_map": (fmap, "conformal-map"),
             "conformal_domain": (dom, "conformal-domain")}
    suites = {"conformal": {"fmap": fmap, "domain_metric": dmetric, "expected_factor": factor}}
    if eps == -1:
        suites["joachimsthal"] = {"f": f, "axis": None}
    return ScenarioResult(cfg, grids, checks, suites, T.timings, None, "conformal")


# ---------------------------------------------------------------- metrics

def build_metric_check(cfg: ScenarioConfig, T: _Timer) -> ScenarioResult:
    p = cfg.params
    mb = _req(p, "metric", "params")
    variables = tuple(_req(mb, "variables", "params.metric"))
    d = len(variables)
    patch = _patch(mb, cfg.counts(d), "params.metric", default_vars=variables, need_map=False)
    fac = mb.get("factors", [[i] for i in range(d)])
    try:
        factors = tuple(tuple(int(a) for a in blk) for blk in fac)
        grid = ParamGrid(patch.grid.counts, patch.grid.lo, patch.grid.hi, patch.grid.periodic, factors)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params.metric.factors: {exc}") from None
    rows = _req(mb, "g", "params.metric")
    if not isinstance(rows, list) or len(rows) != d or any(not isinstance(r, list) or len(r) != d for r in rows):
        raise ConfigError(f"params.metric.g must be a {d} x {d} list of expressions")
    mesh = grid.mesh()
    g = np.stack([np.stack([_fn(e, variables, f"params.metric.g[{i}][{j}]", cfg)(*mesh)
                            for j, e in enumerate(r)], -1) for i, r in enumerate(rows)], -2)
    metric = verify.SampledMetric(grid, g)
    lam = None
    if "lambda" in p:
        lam = _fn(p["lambda"], variables, "params.lambda", cfg)(*mesh)
    with T("checks"):
        checks = verify.suite_polar_metric(metric, cfg.C, lam)
    mg = ImmersedGrid(grid, g.reshape(grid.counts + (d * d,)))
    return ScenarioResult(cfg, {"metric": (mg, "metric")}, checks,
                          {"polar-metric": {"metric": metric, "lam": lam}}, T.timings, None, "polar-metric")


BUILDERS = {
    "ribaucour-transform": build_ribaucour_transform,
    "partial-tube": build_partial_tube,
    "surface-family": build_surface_family,
    "hypersurface-foliation": build_hypersurface_foliation,
    "channel": build_channel,
    "gauss-tube": build_gauss_tube,
    "enneper-planar": build_enneper_planar,
    "enneper-general": build_enneper_general,
    "enneper-family": build_enneper_family,
    "enneper-normalize": build_enneper_normalize,
    "joachimsthal": build_joachimsthal,
    "constant-angle": build_constant_angle,
    "metric-check": build_metric_check,
}


def build(cfg: ScenarioConfig) -> ScenarioResult:
    """Run a scenario.  Raises ConfigError for bad parameter blocks and
    ConstructionError (wrapping the geometry modules' errors) when the data
    cannot be built."""
    T = _Timer()
    try:
        with T("total"):
            return BUILDERS[cfg.scenario](cfg, T)
    except ConfigError:
        raise
    except CONSTRUCTION_ERRORS as exc:
        if isinstance(exc, ConstructionError):
            raise
        raise ConstructionError(f"{type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------- suites

def run_suite(name: str, C: float, **kw) -> list:
    if name == "cor-rpt":
        return verify.suite_cor_rpt(kw["f"], C)
    if name == "enneper":
        f = kw.pop("f")
        return verify.suite_enneper(f, C, **kw)
    if name == "joachimsthal":
        return verify.suite_joachimsthal(kw["f"], C, axis=kw.get("axis"))
    if name == "gauss-map":
        return verify.suite_gauss_map(kw["f"], kw["N"], C, P=kw.get("P"), mask=kw.get("mask"))
    if name == "polar-metric":
        return verify.suite_polar_metric(kw["metric"], C, kw.get("lam"))
    if name == "conformal":
        return verify.suite_conformal(kw["fmap"], C, kw.get("domain_metric"), kw.get("expected_factor"))
    raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")


def suite_inputs(result: ScenarioResult, name: str) -> dict:
    """Suite arguments for a built scenario; falls back to the primary grid
    for suites that need nothing else."""
    if name in result.suites:
        return dict(result.suites[name])
    f = result.primary
    if name in ("cor-rpt", "enneper", "joachimsthal"):
        return {"f": f}
    if name == "conformal":
        return {"fmap": f}
    if name == "polar-metric":
        return {"metric": verify.SampledMetric(f.grid, geo.induced_metric(f))}
    if name == "gauss-map" and "gauss" in result.grids:
        return {"f": f, "N": result.grids["gauss"][0]}
    raise ConfigError(f"suite {name!r} needs inputs the {result.config.scenario} scenario does not produce")


def suite_inputs_from_files(name: str, grids: list) -> dict:
    """Suite arguments from grid files: (primary, optional companion)."""
    f, kind = grids[0]
    extra = grids[1][0] if len(grids) > 1 else None
    if name in ("cor-rpt", "joachimsthal"):
        return {"f": f}
    if name == "enneper":
        return {"f": f, "N": None if extra is None else extra.values}
    if name == "gauss-map":
        if extra is None:
            raise ConfigError("the gauss-map suite needs two files: the hypersurface and its Gauss map")
        return {"f": f, "N": extra}
    if name == "polar-metric":
        if kind == "metric":
            d = f.grid.ndim
            if f.m != d * d:
                raise ConfigError("metric grid files need d*d components")
            return {"metric": verify.SampledMetric(f.grid, f.values.reshape(f.grid.counts + (d, d)))}
        return {"metric": verify.SampledMetric(f.grid, geo.induced_metric(f))}
    if name == "conformal":
        return {"fmap": f, "domain_metric": None if extra is None else geo.induced_metric(extra)}
    raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
