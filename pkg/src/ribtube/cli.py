"""Command-line front end.

    ribtube generate CONFIG            build a scenario, write grids, meshes, report, manifest
    ribtube verify INPUT... --suite S  run a verification suite on a config or on grid files
    ribtube roundtrip INPUT            reconstruct a tube, rebuild it and compare

Exit statuses: 0 success, 2 config or input error, 3 construction failure,
4 failing check (the first failing check is named on stderr), 5 round-trip
deviation above tolerance.  The output directory is --out-dir, else the
RIBTUBE_OUT_DIR environment variable, else the config's output.dir (relative
to the config file), else ./ribtube-out.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import gridio
from . import partial_tube as pt
from . import scenarios as sc
from . import verify

log = logging.getLogger("ribtube")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONSTRUCTION = 3
EXIT_CHECK = 4
EXIT_ROUNDTRIP = 5


class CliError(Exception):
    def __init__(self, status: int, msg: str):
        self.status = status
        super().__init__(msg)


# ---------------------------------------------------------------- shared plumbing

def _is_config(path: str) -> bool:
    return Path(path).suffix.lower() in (".yaml", ".yml")


def _load(path: str, args) -> sc.ScenarioConfig:
    try:
        cfg = sc.load_config(path)
    except sc.ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.C *= args.tol_scale
    return cfg


def _build(cfg: sc.ScenarioConfig) -> sc.ScenarioResult:
    try:
        return sc.build(cfg)
    except sc.ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    except sc.ConstructionError as exc:
        raise CliError(EXIT_CONSTRUCTION, f"construction failed: {exc}") from None


def _out_dir(args, cfg: sc.ScenarioConfig | None) -> Path:
    if args.out_dir:
        d = Path(args.out_dir)
    elif os.environ.get("RIBTUBE_OUT_DIR"):
        d = Path(os.environ["RIBTUBE_OUT_DIR"])
    elif cfg is not None and cfg.out_dir:
        d = Path(cfg.out_dir)
        if not d.is_absolute():
            d = cfg.base_dir / d
    else:
        d = Path("ribtube-out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def format_report(header: dict, reports) -> str:
    """Header comment lines (sorted keys) followed by one record per check."""
    lines = ["# ribtube report"]
    lines += [f"# {k} {header[k]}" for k in sorted(header)]
    return "\n".join(lines) + "\n" + verify.format_reports(reports)


def _write_report(path: Path, header: dict, reports) -> Path:
    path.write_text(format_report(header, reports))
    return path


def _failing(reports):
    r = verify.first_failure(reports)
    if r is None:
        return None
    return f"first failing check: {r.name} (max {r.max:.3e}, tol {r.tol:.3e})"


def _write_manifest(out: Path, label: str, cfg, command: str, timings: dict, files: list, masked: dict,
                    extra=None) -> Path:
    man = {
        "tool": "ribtube",
        "version": __version__,
        "command": command,
        "config_sha256": cfg.digest if cfg is not None else None,
        "scenario": cfg.scenario if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "C": cfg.C if cfg is not None else None,
        "timings_s": timings,
        "files": [{"path": p.name, "sha256": _sha(p)} for p in files],
        "masked_nodes": masked,
    }
    if extra:
        man.update(extra)
    path = out / f"{label}.{command}.manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _summarize(reports, report_path: Path):
    flat = [r for rep in reports for r in rep.flatten()]
    bad = sum(not r.passed for r in flat)
    print(f"{len(flat)} checks, {bad} failed; report {report_path}")


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = _load(args.config, args)
    res = _build(cfg)
    out = _out_dir(args, cfg)
    files, masked = [], {}
    t0 = time.perf_counter()
    for name, (grid, kind) in res.grids.items():
        p = gridio.write_grid(out / f"{cfg.label}.{name}.grid", grid, kind)
        files.append(p)
        mk = gridio.masked_nodes(grid)
        masked[p.name] = mk
        if cfg.obj and gridio.can_export_obj(grid) and all(s > 0 for s in grid.signature) and kind == "immersion":
            q = gridio.write_obj(out / f"{cfg.label}.{name}.obj", grid)
            files.append(q)
            masked[q.name] = mk
    header = {"command": "generate", "scenario": cfg.scenario, "label": cfg.label, "C": f"{cfg.C:g}",
              "seed": cfg.seed}
    rp = _write_report(out / f"{cfg.label}.generate.report", header, res.checks)
    files.append(rp)
    timings = dict(res.timings, write=round(time.perf_counter() - t0, 6))
    mp = _write_manifest(out, cfg.label, cfg, "generate", timings, files, masked)
    print(f"wrote {len(files)} files and {mp}")
    _summarize(res.checks, rp)
    msg = _failing(res.checks)
    if msg:
        raise CliError(EXIT_CHECK, msg)
    return EXIT_OK


def _read_grids(paths) -> list:
    out = []
    for p in paths:
        try:
            out.append(gridio.read_grid(p))
        except gridio.GridFormatError as exc:
            raise CliError(EXIT_CONFIG, f"input error: {exc}") from None
    return out


def cmd_verify(args) -> int:
    inputs = args.inputs
    cfg = None
    if len(inputs) == 1 and _is_config(inputs[0]):
        cfg = _load(inputs[0], args)
        res = _build(cfg)
        suite = args.suite or res.default_suite
        if suite is None:
            raise CliError(EXIT_CONFIG, f"config error: scenario {cfg.scenario} has no default suite; pass --suite")
        try:
            kw = sc.suite_inputs(res, suite)
        except sc.ConfigError as exc:
            raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
        C, label, timings = cfg.C, cfg.label, dict(res.timings)
        header = {"scenario": cfg.scenario}
    else:
        if any(_is_config(p) for p in inputs):
            raise CliError(EXIT_CONFIG, "input error: pass either one config file or grid files")
        if args.suite is None:
            raise CliError(EXIT_CONFIG, "input error: --suite is required with grid files")
        suite = args.suite
        grids = _read_grids(inputs)
        try:
            kw = sc.suite_inputs_from_files(suite, grids)
        except sc.ConfigError as exc:
            raise CliError(EXIT_CONFIG, f"input error: {exc}") from None
        C = verify.DEFAULT_C * args.tol_scale
        label = Path(inputs[0]).name.split(".")[0]
        timings = {}
        header = {"inputs": " ".join(Path(p).name for p in inputs)}
    t0 = time.perf_counter()
    try:
        reports = sc.run_suite(suite, C, **kw)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise CliError(EXIT_CONFIG, f"input error: suite {suite} cannot run on this input: {exc}") from None
    timings["suite"] = round(time.perf_counter() - t0, 6)
    out = _out_dir(args, cfg)
    header.update(command="verify", suite=suite, label=label, C=f"{C:g}")
    rp = _write_report(out / f"{label}.{suite}.report", header, reports)
    _write_manifest(out, f"{label}.{suite}", cfg, "verify", timings, [rp], {})
    _summarize(reports, rp)
    msg = _failing(reports)
    if msg:
        raise CliError(EXIT_CHECK, msg)
    return EXIT_OK


def _alternate_indices(counts) -> dict:
    return {"base_slice": tuple(c // 4 for c in counts),
            "reference_fiber_point": tuple((3 * c) // 4 for c in counts),
            "reference_x0": tuple(c // 2 + 1 for c in counts)}


def cmd_roundtrip(args) -> int:
    src = args.input
    cfg = None
    input_phi = None
    timings = {}
    if _is_config(src):
        cfg = _load(src, args)
        res = _build(cfg)
        f = res.primary
        C, label = cfg.C, cfg.label
        timings.update(res.timings)
        if res.tube is not None:
            input_phi = res.tube.spec.phi
    else:
        f, _ = _read_grids([src])[0]
        C = verify.DEFAULT_C * args.tol_scale
        label = Path(src).name.split(".")[0]
    t0 = time.perf_counter()
    try:
        rec = pt.reconstruct_tube(f, check=True, tol_scale=C)
        d0 = len(f.grid.factors[0])
        alt = pt.reconstruct_tube(f, check=False, **_alternate_indices(f.grid.counts[:d0]))
    except pt.PreconditionError as exc:
        raise CliError(EXIT_CHECK, f"precondition failed: {exc}") from None
    except pt.TubeError as exc:
        raise CliError(EXIT_CONSTRUCTION, f"reconstruction failed: {exc}") from None
    timings["reconstruct"] = round(time.perf_counter() - t0, 6)
    tol = verify.tolerance(f.grid, C)
    meta = verify._meta(f.grid, C)
    scale = max(float(np.nanmax(np.linalg.norm(f.values - np.nanmean(f.values.reshape(-1, f.m), axis=0),
                                               axis=-1))), 1e-300)
    gauge = float(np.nanmax(np.linalg.norm(rec.rebuilt.f.values - alt.rebuilt.f.values, axis=-1))) / scale
    deviation = verify.InvariantReport("roundtrip_deviation", rec.deviation, rec.deviation, tol,
                                       dict(meta, k=rec.spec.k))
    reports = [deviation,
               verify.InvariantReport("roundtrip_gauge_invariance", gauge, gauge, tol, dict(meta)),
               verify.InvariantReport("roundtrip_mu_consistency", rec.mu_residual, rec.mu_residual, tol, dict(meta))]
    if input_phi is not None and np.ptp(input_phi) == 0.0:
        # a constant phi (classical tube) must be recovered as a constant
        ph = rec.spec.phi
        v = float(np.ptp(ph) / np.mean(np.abs(ph)))
        reports.append(verify.InvariantReport("recovered_phi_constancy", v, v, tol, dict(meta)))
    out = _out_dir(args, cfg)
    header = {"command": "roundtrip", "label": label, "C": f"{C:g}",
              "recovered_rank": rec.spec.k}
    if cfg is not None:
        header["scenario"] = cfg.scenario
    rp = _write_report(out / f"{label}.roundtrip.report", header, reports)
    gp = gridio.write_grid(out / f"{label}.rebuilt.grid", rec.rebuilt.f)
    _write_manifest(out, label, cfg, "roundtrip", timings, [rp, gp], {gp.name: gridio.masked_nodes(rec.rebuilt.f)})
    _summarize(reports, rp)
    if not deviation.passed:
        raise CliError(EXIT_ROUNDTRIP, f"rebuild deviation {rec.deviation:.3e} exceeds {tol:.3e}")
    msg = _failing(reports)
    if msg:
        raise CliError(EXIT_CHECK, msg)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="output directory (overrides RIBTUBE_OUT_DIR and the config)")
    common.add_argument("--tol-scale", type=float, default=1.0,
                        help="multiply the tolerance constant C by this factor")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug)")
    p = argparse.ArgumentParser(prog="ribtube", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"ribtube {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="build a scenario and write its outputs")
    g.add_argument("config")
    g.set_defaults(func=cmd_generate)
    v = sub.add_parser("verify", parents=[common], help="run a verification suite")
    v.add_argument("inputs", nargs="+", help="one config file, or grid files (primary first)")
    v.add_argument("--suite", choices=sc.SUITES)
    v.set_defaults(func=cmd_verify)
    r = sub.add_parser("roundtrip", parents=[common], help="reconstruct and rebuild a tube")
    r.add_argument("input", help="config file or tube grid file")
    r.set_defaults(func=cmd_roundtrip)
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.tol_scale <= 0:
        print("error: --tol-scale must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with np.errstate(all="ignore"):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
