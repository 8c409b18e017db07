import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyntube import scenarios
from dyntube.planner import ScenarioError
from dyntube.tables import TableFormatError, format_table, parse_table, read_table, write_table


def test_round_trip_examples(tmp_path):
    rows = [{"H": 1, "mode": "recursive", "mec": 0.1 + 0.2, "ok": True},
            {"H": 25, "mode": "one_shot", "mec": np.float64(1e-17), "ok": False}]
    path = write_table(tmp_path / "t.csv", ["H", "mode", "mec", "ok"], rows)
    cols, back = read_table(path)
    assert cols == ["H", "mode", "mec", "ok"]
    assert back[0] == {"H": 1, "mode": "recursive", "mec": 0.30000000000000004, "ok": True}
    assert back[1]["mec"] == 1e-17 and back[1]["ok"] is False
    assert path.read_text().startswith("# format-version: 1\n")


def test_inf_survives():
    _, rows = parse_table(format_table(["x"], [{"x": math.inf}]))
    assert rows[0]["x"] == math.inf


def test_format_errors():
    with pytest.raises(TableFormatError):
        parse_table("a,b\n1,2\n")
    with pytest.raises(TableFormatError):
        parse_table("# format-version: 2\na\n1\n")
    with pytest.raises(TableFormatError):
        parse_table("# format-version: 1\na,b\n1\n")
    with pytest.raises(TableFormatError):
        format_table(["a", "b"], [[1]])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(-10**9, 10**9),
                          st.floats(allow_nan=False),
                          st.text(alphabet="abcxyz_ ,\"", min_size=1, max_size=8)
                          .filter(lambda s: s not in ("true", "false") and s.strip() == s)
                          .filter(lambda s: not _numeric(s))),
                max_size=10))
def test_lossless_property(rows):
    cols, back = parse_table(format_table(["i", "f", "s"], rows))
    assert [(r["i"], r["f"], r["s"]) for r in back] == rows


def _numeric(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------- scenarios

def test_builtins_are_valid():
    for name in scenarios.BUILTIN:
        sc = scenarios.builtin(name)
        assert sc.validate() is sc
    with pytest.raises(ScenarioError):
        scenarios.builtin("maze")


def test_narrow_gap_geometry():
    sc = scenarios.narrow_gap(gap=0.08, radius=0.5)
    a, b = sc.obstacles
    slit = np.linalg.norm(a.center - b.center) - a.radius - b.radius
    assert slit == pytest.approx(0.08)
    # the world ends at the disc centres, so the slit is the only passage
    assert sc.bounds[1, 1] == pytest.approx(a.center[1])
    assert scenarios.gap_width(0.05, 1.0) == pytest.approx(0.1)
    with pytest.raises(ScenarioError):
        scenarios.narrow_gap(gap=0.0)


def test_clutter_is_seeded_and_keeps_endpoints_free():
    a, b = scenarios.clutter(seed=4), scenarios.clutter(seed=4)
    assert a.to_dict() == b.to_dict()
    assert a.clearance(a.start) > 0.25 and a.clearance(a.goal) > 0.25
