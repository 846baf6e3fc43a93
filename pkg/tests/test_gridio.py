import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ribtube.numerics import ParamGrid, ImmersedGrid
from ribtube import gridio
from ribtube.gridio import GridFormatError
from conftest import sphere_net


def test_round_trip_is_bit_exact(tmp_path):
    N = sphere_net(12)
    vals = N.values.copy()
    vals[3, 4] = np.nan
    f = ImmersedGrid(N.grid, vals)
    p = gridio.write_grid(tmp_path / "n.grid", f, kind="gauss map")
    g, kind = gridio.read_grid(p)
    assert kind == "gauss map"
    assert g.grid == f.grid
    assert np.array_equal(g.values, f.values, equal_nan=True)
    assert gridio.masked_nodes(g) == [[3, 4]]


@settings(max_examples=25, deadline=None)
@given(vals=arrays(np.float64, (3, 4, 2), elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_any_finite_float_survives(vals):
    g = ParamGrid.uniform([(0, 1), (-2, 2)], (3, 4))
    f = ImmersedGrid(g, vals, (1.0, -1.0))
    h, _ = gridio.parse_grid(gridio.format_grid(f))
    assert np.array_equal(h.values, vals) and h.signature == (1.0, -1.0)


def test_header_layout():
    g = ParamGrid.uniform([(0, 1), (0, 1), (0, 2)], (2, 2, 3), factors=((0, 1), (2,)))
    text = gridio.format_grid(ImmersedGrid(g, np.zeros((2, 2, 3, 4))))
    head = text.splitlines()[:10]
    assert head[0] == "ribtube-grid 1"
    assert head[3] == "counts 2 2 3"
    assert head[6] == "factors 0 1 | 2"
    assert head[9] == "data"
    assert len(text.splitlines()) == 10 + 12


@pytest.mark.parametrize("edit,match", [
    (lambda t: t.replace("ribtube-grid 1", "grid"), "magic"),
    (lambda t: t.replace("counts 4 3", "counts 4"), "axes"),
    (lambda t: t.rsplit("\n", 2)[0] + "\n", "samples"),
    (lambda t: t.replace("kind", "kin"), "header"),
    (lambda t: t + "zz\n", "token"),
])
def test_malformed_files_rejected(edit, match):
    g = ParamGrid.uniform([(0, 1), (0, 1)], (4, 3))
    text = gridio.format_grid(ImmersedGrid(g, np.ones((4, 3, 3))))
    with pytest.raises(GridFormatError, match=match):
        gridio.parse_grid(edit(text))


def test_obj_export_counts():
    g = ParamGrid.uniform([(0, 1), (0, 1)], (4, 3))
    U, V = g.mesh()
    vals = np.stack([U, V, 0 * U], -1)
    obj = gridio.format_obj(ImmersedGrid(g, vals)).splitlines()
    assert sum(l.startswith("v ") for l in obj) == 12
    assert sum(l.startswith("f ") for l in obj) == 2 * 3 * 2
    vals[1, 1] = np.nan
    obj = gridio.format_obj(ImmersedGrid(g, vals)).splitlines()
    faces = [list(map(int, l.split()[1:])) for l in obj if l.startswith("f ")]
    assert sum(l.startswith("v ") for l in obj) == 11
    assert max(max(f) for f in faces) == 11
    # the four quads around (1, 1) lose the triangles that touch it
    assert len(faces) == 12 - 6


def test_obj_closes_periodic_axes():
    N = sphere_net(8)
    obj = gridio.format_obj(N).splitlines()
    assert sum(l.startswith("f ") for l in obj) == 2 * 8 * 7


def test_obj_needs_surface_in_r3():
    g = ParamGrid.uniform([(0, 1)], (4,))
    assert not gridio.can_export_obj(ImmersedGrid(g, np.zeros((4, 3))))
    with pytest.raises(GridFormatError):
        gridio.format_obj(ImmersedGrid(g, np.zeros((4, 3))))
