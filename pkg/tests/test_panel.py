import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mosc.panel import (
    PanelDataset,
    PanelFormatError,
    load_covariates,
    load_panel,
    period_sort_key,
    validate_panel,
    write_covariates,
    write_panel,
)

QUARTERS = ["2019Q1", "2019Q2", "2019Q3", "2019Q4"]


def _write_rows(path, rows, header=("unit", "period", "outcome", "value")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _grid_rows():
    rows = []
    for u in ("u1", "u2", "u3"):
        for i, p in enumerate(QUARTERS):
            for k in ("gdp", "cpi"):
                rows.append((u, p, k, f"{i + len(u) * 0.5 + (k == 'cpi')}"))
    return rows


def test_complete_grid_loads_every_cell(tmp_path):
    f = tmp_path / "p.csv"
    _write_rows(f, _grid_rows())
    panel = load_panel(f, treated_unit="u1", cutoff="2019Q3")
    assert panel.values.shape == (3, 4, 2)
    assert panel.n_cells == 24
    assert panel.n_missing == 0
    assert panel.units == ("u1", "u2", "u3")
    assert panel.outcomes == ("gdp", "cpi")


def test_deleted_row_becomes_missing_cell(tmp_path):
    rows = _grid_rows()
    del rows[5]
    f = tmp_path / "p.csv"
    _write_rows(f, rows)
    panel = load_panel(f, treated_unit="u1", cutoff="2019Q3")
    assert panel.n_observed == 23
    assert panel.n_missing == 1


def test_empty_value_is_missing_not_zero(tmp_path):
    rows = _grid_rows()
    rows[0] = (*rows[0][:3], "")
    f = tmp_path / "p.csv"
    _write_rows(f, rows)
    panel = load_panel(f, treated_unit="u1", cutoff="2019Q3")
    assert np.isnan(panel.value("u1", "2019Q1", "gdp"))


def test_duplicate_row_names_key(tmp_path):
    rows = _grid_rows() + [("u1", "2019Q1", "gdp", "3.0")]
    f = tmp_path / "p.csv"
    _write_rows(f, rows)
    with pytest.raises(PanelFormatError, match=r"u1, 2019Q1, gdp"):
        load_panel(f, treated_unit="u1", cutoff="2019Q3")


def test_non_numeric_value_reports_line(tmp_path):
    rows = _grid_rows()
    rows[3] = (*rows[3][:3], "abc")
    f = tmp_path / "p.csv"
    _write_rows(f, rows)
    with pytest.raises(PanelFormatError, match=r":5: non-numeric"):
        load_panel(f, treated_unit="u1", cutoff="2019Q3")


def test_ragged_row_reports_line(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("unit,period,outcome,value\nu1,1,y,1.0\nu1,2,y\n")
    with pytest.raises(PanelFormatError, match=r":3: malformed"):
        load_panel(f, treated_unit="u1", cutoff="1")


def test_missing_column_and_empty_file(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("unit,period,value\nu1,1,2\n")
    with pytest.raises(PanelFormatError, match="outcome"):
        load_panel(f, treated_unit="u1", cutoff="1")
    f.write_text("")
    with pytest.raises(PanelFormatError, match="header"):
        load_panel(f, treated_unit="u1", cutoff="1")


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_panel(tmp_path / "nope.csv", treated_unit="a", cutoff="1")


def test_custom_schema(tmp_path):
    f = tmp_path / "p.csv"
    _write_rows(f, [(p, u, k, v) for u, p, k, v in _grid_rows()], header=("quarter", "region", "series", "obs"))
    schema = {"unit": "region", "period": "quarter", "outcome": "series", "value": "obs"}
    panel = load_panel(f, schema, treated_unit="u2", cutoff="2019Q2")
    assert panel.units == ("u1", "u2", "u3")
    assert panel.treated_index == 1


def test_integer_periods_sort_numerically():
    key = period_sort_key(["10", "9", "100"])
    assert sorted(["10", "9", "100"], key=key) == ["9", "10", "100"]
    assert sorted(["2019Q2", "2019Q1"], key=period_sort_key(["2019Q2", "2019Q1"])) == ["2019Q1", "2019Q2"]


def test_shuffled_rows_give_same_panel(tmp_path):
    rows = _grid_rows()
    f1, f2 = tmp_path / "a.csv", tmp_path / "b.csv"
    _write_rows(f1, rows)
    shuffled = rows[:]
    random.Random(4).shuffle(shuffled)
    _write_rows(f2, shuffled)
    a = load_panel(f1, treated_unit="u1", cutoff="2019Q3")
    b = load_panel(f2, treated_unit="u1", cutoff="2019Q3")
    assert a.periods == b.periods
    assert a.equals(b, ordered=False)
    assert a.cells() == b.cells()


def test_round_trip_is_bit_exact(tmp_path, small_panel):
    f = tmp_path / "p.csv"
    write_panel(small_panel, f)
    again = load_panel(f, treated_unit=small_panel.treated_unit, cutoff=small_panel.cutoff)
    assert again.equals(small_panel)
    assert np.array_equal(again.values, small_panel.values)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.one_of(finite, st.just(float("nan"))), min_size=12, max_size=12))
def test_round_trip_property(tmp_path_factory, vals):
    values = np.array(vals).reshape(2, 3, 2)
    panel = PanelDataset(("a", "b"), ("1", "2", "3"), ("x", "y"), values, "a", "2")
    f = tmp_path_factory.mktemp("rt") / "p.csv"
    write_panel(panel, f)
    again = load_panel(f, treated_unit="a", cutoff="2")
    assert again.equals(panel)


def test_covariates_round_trip_and_unknown_unit(tmp_path, make_panel):
    panel = make_panel(covariates=2)
    pf, cf = tmp_path / "p.csv", tmp_path / "c.csv"
    write_panel(panel, pf)
    write_covariates(panel, cf)
    again = load_panel(pf, treated_unit=panel.treated_unit, cutoff=panel.cutoff, covariates_path=cf)
    assert again.covariate_names == ("z1", "z2")
    assert np.array_equal(again.covariates, panel.covariates)
    cf.write_text("unit,covariate,value\nghost,z1,1.0\n")
    with pytest.raises(PanelFormatError, match="ghost"):
        load_covariates(cf, units=panel.units)


def test_panel_is_immutable(small_panel):
    with pytest.raises(ValueError):
        small_panel.values[0, 0, 0] = 1.0


def test_constructor_rejects_inconsistent_input():
    with pytest.raises(PanelFormatError, match="duplicate unit"):
        PanelDataset(("a", "a"), ("1",), ("y",), np.zeros((2, 1, 1)), "a", "1")
    with pytest.raises(PanelFormatError, match="sorted"):
        PanelDataset(("a",), ("2", "1"), ("y",), np.zeros((1, 2, 1)), "a", "1")
    with pytest.raises(PanelFormatError, match="shape"):
        PanelDataset(("a",), ("1",), ("y",), np.zeros((2, 1, 1)), "a", "1")


def test_unknown_outcome_lookup_lists_known(small_panel):
    with pytest.raises(KeyError, match="known outcomes: y1, y2"):
        small_panel.outcome_index("gdp")


# -- validation -----------------------------------------------------------


def test_well_formed_panel_has_empty_report(make_panel):
    report = validate_panel(make_panel(n_units=6, n_periods=12, cutoff=8))
    assert not report
    assert report.ok


def test_single_donor_is_an_error(make_panel):
    report = validate_panel(make_panel(n_units=2))
    assert "insufficient-donors" in report.codes()
    assert not report.ok


def test_unknown_treated_and_cutoff(make_panel):
    p = make_panel()
    assert "treated-unit-missing" in validate_panel(p.with_treated("nobody")).codes()
    assert "cutoff-out-of-range" in validate_panel(p.with_cutoff("1999")).codes()
    assert "cutoff-out-of-range" in validate_panel(p.with_cutoff(p.periods[-1])).codes()


def test_few_matching_cells_warn_overfitting():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(27, 5, 1))
    panel = PanelDataset(tuple(f"u{i}" for i in range(27)), tuple("12345"), ("y",), values, "u0", "4")
    report = validate_panel(panel)
    assert report.ok
    assert report.codes() == ["overfitting-risk"]


def test_missing_and_constant_pre_cells_warn(make_panel):
    p = make_panel()
    v = p.values.copy()
    v[3, 1, 0] = np.nan
    v[:, 2, 1] = 4.0
    panel = PanelDataset(p.units, p.periods, p.outcomes, v, p.treated_unit, p.cutoff)
    report = validate_panel(panel)
    assert report.ok
    assert set(report.codes()) == {"missing-pre-cell", "zero-variance-cell"}
    assert "y1" in report.format()


def test_validation_restricted_to_match_outcomes(make_panel):
    p = make_panel()
    v = p.values.copy()
    v[3, 1, 1] = np.nan
    panel = PanelDataset(p.units, p.periods, p.outcomes, v, p.treated_unit, p.cutoff)
    assert not validate_panel(panel, ["y1"])
    assert validate_panel(panel, ["y3"]).codes() == ["unknown-outcome"]
