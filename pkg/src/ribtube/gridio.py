"""Grid data files and OBJ meshes.

Grid file layout (text, one header field per line, then the samples)::

    ribtube-grid 1
    kind immersion
    dims 2
    counts 64 64
    ranges 0 6.1850105367549055 0 6.1850105367549055
    periodic 1 0
    factors 0 | 1
    ambient 3
    signature 1 1 1
    data
    <one node per line, row-major, ambient-dim values with 17 significant digits>

``ranges`` lists lo/hi per axis; periodic axes store the last node (one step
before the period closes), as ParamGrid does.  Masked nodes are written as
``nan`` tokens.  ``kind`` is free text (immersion, triple, metric, ...).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .numerics import ImmersedGrid, ParamGrid

MAGIC = "ribtube-grid 1"


class GridFormatError(ValueError):
    pass


def _num(x: float) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    out = format(x, ".17g")
    return "0" if out == "-0" else out


def format_grid(f: ImmersedGrid, kind: str = "immersion") -> str:
    g = f.grid
    lines = [MAGIC, f"kind {kind}", f"dims {g.ndim}",
             "counts " + " ".join(str(c) for c in g.counts),
             "ranges " + " ".join(f"{_num(a)} {_num(b)}" for a, b in zip(g.lo, g.hi)),
             "periodic " + " ".join("1" if p else "0" for p in g.periodic),
             "factors " + " | ".join(" ".join(str(a) for a in blk) for blk in g.factors),
             f"ambient {f.m}",
             "signature " + " ".join(_num(s) for s in f.signature),
             "data"]
    rows = f.values.reshape(-1, f.m)
    lines += [" ".join(_num(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_grid(path, f: ImmersedGrid, kind: str = "immersion") -> Path:
    path = Path(path)
    path.write_text(format_grid(f, kind))
    return path


def _field(line: str, key: str) -> list:
    parts = line.split()
    if not parts or parts[0] != key:
        raise GridFormatError(f"expected header field {key!r}, found {line[:40]!r}")
    return parts[1:]


def parse_grid(text: str):
    """Returns (ImmersedGrid, kind)."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise GridFormatError("not a ribtube grid file (bad magic line)")
    try:
        kind = " ".join(_field(lines[1], "kind"))
        d = int(_field(lines[2], "dims")[0])
        counts = tuple(int(c) for c in _field(lines[3], "counts"))
        rng = [float(v) for v in _field(lines[4], "ranges")]
        per = tuple(v == "1" for v in _field(lines[5], "periodic"))
        fac = " ".join(_field(lines[6], "factors"))
        factors = tuple(tuple(int(a) for a in blk.split()) for blk in fac.split("|"))
        m = int(_field(lines[7], "ambient")[0])
        sig = tuple(float(v) for v in _field(lines[8], "signature"))
        _field(lines[9], "data")
    except (IndexError, ValueError) as exc:
        raise GridFormatError(f"malformed grid header: {exc}") from None
    if len(counts) != d or len(rng) != 2 * d or len(per) != d:
        raise GridFormatError("header fields disagree on the number of axes")
    grid = ParamGrid(counts, tuple(rng[0::2]), tuple(rng[1::2]), per, factors)
    body = "\n".join(lines[10:])
    try:
        vals = np.array(body.split(), dtype=float)
    except ValueError as exc:
        raise GridFormatError(f"bad sample token: {exc}") from None
    expect = int(np.prod(counts)) * m
    if vals.size != expect:
        raise GridFormatError(f"expected {expect} samples, found {vals.size}")
    return ImmersedGrid(grid, vals.reshape(counts + (m,)), sig), kind


def read_grid(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise GridFormatError(f"cannot read {path}: {exc.strerror or exc}") from None
    return parse_grid(text)


def masked_nodes(f: ImmersedGrid) -> list:
    """Row-major multi-indices of nodes carrying non-finite values."""
    return [list(map(int, ix)) for ix in np.argwhere(~f.mask)]


def format_obj(f: ImmersedGrid) -> str:
    """Triangle mesh of a 2-D grid in R^3.

    Vertices are the finite nodes in row-major order (masked nodes omitted,
    the rest renumbered); each grid quad (i, j), (i+1, j), (i+1, j+1), (i, j+1)
    is split along the (i, j)-(i+1, j+1) diagonal and a triangle is kept when
    its three corners are finite.  Periodic axes close up.
    """
    if f.grid.ndim != 2 or f.m != 3:
        raise GridFormatError("OBJ export needs a two-parameter grid in a three-dimensional ambient space")
    n0, n1 = f.grid.counts
    ok = f.mask
    index = -np.ones((n0, n1), dtype=int)
    index[ok] = np.arange(1, int(ok.sum()) + 1)
    out = ["# ribtube mesh", f"# grid {n0} x {n1}, {int((~ok).sum())} masked nodes omitted"]
    for v in f.values[ok]:
        out.append("v " + " ".join(_num(x) for x in v))
    p0, p1 = f.grid.periodic
    for i in range(n0 if p0 else n0 - 1):
        for j in range(n1 if p1 else n1 - 1):
            a = index[i, j]
            b = index[(i + 1) % n0, j]
            c = index[(i + 1) % n0, (j + 1) % n1]
            d = index[i, (j + 1) % n1]
            for tri in ((a, b, c), (a, c, d)):
                if min(tri) > 0:
                    out.append("f " + " ".join(str(k) for k in tri))
    return "\n".join(out) + "\n"


def write_obj(path, f: ImmersedGrid) -> Path:
    path = Path(path)
    path.write_text(format_obj(f))
    return path


def can_export_obj(f: ImmersedGrid) -> bool:
    return f.grid.ndim == 2 and f.m == 3
