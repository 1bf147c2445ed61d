import math
import os

import pytest

from vbireport.normalize import (DuplicateRow, MissingBaseline, ResultSet,
                                 csv_to_table, geomean, load_results,
                                 normalize, table_to_csv)

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "results.csv")


def small_results():
    rs = ResultSet()
    rs.add("t1", "native", 100.0)
    rs.add("t1", "fancy", 50.0)
    rs.add("t2", "native", 100.0)
    rs.add("t2", "fancy", 200.0)
    return rs


def test_baseline_is_all_ones():
    table = normalize(small_results(), "native")
    for label, _, speeds in table.rows:
        assert speeds[table.scenarios.index("native")] == 1.0


def test_hand_computed_speedups_and_geomean():
    table = normalize(small_results(), "native")
    rows = {label: speeds for label, _, speeds in table.rows}
    fancy = table.scenarios.index("fancy")
    assert rows["t1"][fancy] == 2.0
    assert rows["t2"][fancy] == 0.5
    # speedups 2.0 and 0.5 average out to exactly 1.0
    assert rows["geomean"][fancy] == 1.0


def test_exclude_recomputes_geomean_by_hand():
    rs = small_results()
    rs.add("mcf", "native", 100.0)
    rs.add("mcf", "fancy", 10.0)  # a 10x outlier
    table = normalize(rs, "native", exclude=["mcf"])
    rows = {label: speeds for label, _, speeds in table.rows}
    fancy = table.scenarios.index("fancy")
    assert rows["geomean"][fancy] == pytest.approx((2.0 * 0.5 * 10.0) ** (1 / 3))
    assert rows["geomean_excluding_mcf"][fancy] == 1.0
    marks = {label: mark for label, mark, _ in table.rows}
    assert marks["mcf"] == "yes"
    assert marks["t1"] == ""


def test_missing_baseline_lists_pairs():
    rs = small_results()
    rs.add("t3", "fancy", 77.0)  # no native row for t3
    with pytest.raises(MissingBaseline) as e:
        normalize(rs, "native")
    assert "t3" in str(e.value)
    with pytest.raises(MissingBaseline):
        normalize(small_results(), "nonexistent")


def test_duplicate_rows_rejected():
    rs = small_results()
    with pytest.raises(DuplicateRow):
        rs.add("t1", "native", 1.0)


def test_unknown_exclude_rejected():
    with pytest.raises(ValueError):
        normalize(small_results(), "native", exclude=["who"])


def test_fixture_normalization_golden():
    """Against the committed sweep fixture: values recomputed by hand from
    the raw cycles column, frozen here."""
    rs = load_results(FIXTURE)
    assert rs.traces == ["flat", "skewy", "sweepy"]
    table = normalize(rs, "native", exclude=["skewy"])
    rows = {label: speeds for label, _, speeds in table.rows}
    s = {name: i for i, name in enumerate(table.scenarios)}
    # hand-derived from the fixture's cycles
    assert rows["flat"][s["native"]] == 1.0
    assert rows["flat"][s["vbi1"]] == 100831.75 / 22258.75
    assert rows["skewy"][s["vbi2"]] == 216708.5 / 17354.5
    expected_geo = geomean([100831.75 / 22258.75, 216708.5 / 21277.25,
                            107718.5 / 18917.0])
    assert rows["geomean"][s["vbi1"]] == pytest.approx(expected_geo, rel=1e-12)
    expected_excl = geomean([100831.75 / 22258.75, 107718.5 / 18917.0])
    assert rows["geomean_excluding_skewy"][s["vbi1"]] == pytest.approx(
        expected_excl, rel=1e-12)


def test_csv_round_trip_and_determinism():
    table = normalize(small_results(), "native", exclude=["t2"])
    text1 = table_to_csv(table)
    text2 = table_to_csv(normalize(small_results(), "native", exclude=["t2"]))
    assert text1 == text2  # pure function of the result set
    back = csv_to_table(text1)
    assert back.scenarios == table.scenarios
    assert [r[0] for r in back.rows] == [r[0] for r in table.rows]
    for (l1, m1, s1), (l2, m2, s2) in zip(back.rows, table.rows):
        assert s1 == s2
