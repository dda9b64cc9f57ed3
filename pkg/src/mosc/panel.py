"""Multi-outcome panel container, long-format CSV I/O and structural checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "PanelDataset",
    "PanelFormatError",
    "Issue",
    "ValidationReport",
    "DEFAULT_SCHEMA",
    "load_panel",
    "load_covariates",
    "write_panel",
    "write_covariates",
    "validate_panel",
    "period_sort_key",
]

DEFAULT_SCHEMA = {
    "unit": "unit",
    "period": "period",
    "outcome": "outcome",
    "value": "value",
    "covariate": "covariate",
}


class PanelFormatError(ValueError):
    """Raised for unreadable or inconsistent panel input."""


def _is_int(label: str) -> bool:
    try:
        int(label)
    except ValueError:
        return False
    return True


def period_sort_key(labels: Iterable[str]):
    """Key function ordering period labels.

    Integer labels sort numerically when every label is an integer,
    otherwise labels sort as strings (ISO dates sort correctly this way).
    """
    labels = list(labels)
    if labels and all(_is_int(p) for p in labels):
        return lambda p: (int(p), p)
    return lambda p: p


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Units x periods x outcomes observations with one focal (treated) unit.

    ``values[i, t, k]`` is ``nan`` where the cell is missing. ``covariates``
    has shape ``(n_units, n_covariates)`` and may hold ``nan`` as well.
    Treated unit and cutoff are stored as given; :func:`validate_panel`
    reports when they do not refer to the panel.
    """

    units: tuple[str, ...]
    periods: tuple[str, ...]
    outcomes: tuple[str, ...]
    values: np.ndarray
    treated_unit: str
    cutoff: str
    covariate_names: tuple[str, ...] = ()
    covariates: np.ndarray | None = None
    _unit_index: dict = field(init=False, repr=False, compare=False)
    _period_index: dict = field(init=False, repr=False, compare=False)
    _outcome_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        units, periods, outcomes = (tuple(map(str, x)) for x in (self.units, self.periods, self.outcomes))
        for name, labels in (("unit", units), ("period", periods), ("outcome", outcomes)):
            if len(set(labels)) != len(labels):
                raise PanelFormatError(f"duplicate {name} identifiers")
        key = period_sort_key(periods)
        if list(periods) != sorted(periods, key=key):
            raise PanelFormatError("periods must be sorted")
        values = np.array(self.values, dtype=float)
        if values.shape != (len(units), len(periods), len(outcomes)):
            raise PanelFormatError(
                f"values shape {values.shape} does not match "
                f"({len(units)}, {len(periods)}, {len(outcomes)})"
            )
        values.setflags(write=False)
        cov_names = tuple(map(str, self.covariate_names))
        cov = self.covariates
        if cov is None:
            cov = np.empty((len(units), 0))
        cov = np.array(cov, dtype=float).reshape(len(units), -1)
        if cov.shape[1] != len(cov_names):
            raise PanelFormatError("covariate matrix does not match covariate names")
        cov.setflags(write=False)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "periods", periods)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "covariate_names", cov_names)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treated_unit", str(self.treated_unit))
        object.__setattr__(self, "cutoff", str(self.cutoff))
        object.__setattr__(self, "_unit_index", {u: i for i, u in enumerate(units)})
        object.__setattr__(self, "_period_index", {p: i for i, p in enumerate(periods)})
        object.__setattr__(self, "_outcome_index", {o: i for i, o in enumerate(outcomes)})

    # -- shape ---------------------------------------------------------
    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_donors(self) -> int:
        return len(self.units) - 1

    @property
    def n_cells(self) -> int:
        return self.values.size

    @property
    def n_observed(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.values)))

    @property
    def n_missing(self) -> int:
        return self.n_cells - self.n_observed

    # -- lookups -------------------------------------------------------
    def unit_index(self, unit: str) -> int:
        try:
            return self._unit_index[unit]
        except KeyError:
            raise KeyError(f"unknown unit {unit!r}") from None

    def period_index(self, period: str) -> int:
        try:
            return self._period_index[str(period)]
        except KeyError:
            raise KeyError(f"unknown period {period!r}") from None

    def outcome_index(self, outcome: str) -> int:
        try:
            return self._outcome_index[outcome]
        except KeyError:
            known = ", ".join(self.outcomes)
            raise KeyError(f"unknown outcome {outcome!r}; known outcomes: {known}") from None

    @property
    def treated_index(self) -> int:
        return self.unit_index(self.treated_unit)

    @property
    def cutoff_index(self) -> int:
        return self.period_index(self.cutoff)

    @property
    def donors(self) -> tuple[str, ...]:
        return tuple(u for u in self.units if u != self.treated_unit)

    def value(self, unit: str, period: str, outcome: str) -> float:
        return float(self.values[self.unit_index(unit), self.period_index(period), self.outcome_index(outcome)])

    def with_treated(self, unit: str) -> "PanelDataset":
        return self._replace(treated_unit=unit)

    def with_cutoff(self, cutoff: str) -> "PanelDataset":
        return self._replace(cutoff=cutoff)

    def _replace(self, **changes) -> "PanelDataset":
        kw = dict(
            units=self.units,
            periods=self.periods,
            outcomes=self.outcomes,
            values=self.values,
            treated_unit=self.treated_unit,
            cutoff=self.cutoff,
            covariate_names=self.covariate_names,
            covariates=self.covariates,
        )
        kw.update(changes)
        return PanelDataset(**kw)

    def cells(self) -> dict[tuple[str, str, str], float]:
        """Observed cells as a ``(unit, period, outcome) -> value`` mapping."""
        out = {}
        for i, t, k in zip(*np.nonzero(~np.isnan(self.values))):
            out[(self.units[i], self.periods[t], self.outcomes[k])] = float(self.values[i, t, k])
        return out

    def equals(self, other: "PanelDataset", *, ordered: bool = True) -> bool:
        """Bit-exact comparison.

        With ``ordered=False`` unit and outcome order is ignored and the two
        panels compare as sets of labelled cells.
        """
        if not isinstance(other, PanelDataset):
            return False
        if (self.treated_unit, self.cutoff, self.periods) != (other.treated_unit, other.cutoff, other.periods):
            return False
        if ordered:
            return (
                self.units == other.units
                and self.outcomes == other.outcomes
                and self.covariate_names == other.covariate_names
                and np.array_equal(self.values, other.values, equal_nan=True)
                and np.array_equal(self.covariates, other.covariates, equal_nan=True)
            )
        if set(self.units) != set(other.units) or set(self.outcomes) != set(other.outcomes):
            return False
        if set(self.covariate_names) != set(other.covariate_names):
            return False
        ui = [other.unit_index(u) for u in self.units]
        ki = [other.outcome_index(k) for k in self.outcomes]
        ci = [other.covariate_names.index(c) for c in self.covariate_names]
        return np.array_equal(self.values, other.values[np.ix_(ui, range(len(self.periods)), ki)], equal_nan=True) and (
            np.array_equal(self.covariates, other.covariates[np.ix_(ui, ci)], equal_nan=True)
        )


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_float(text: str, where: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise PanelFormatError(f"{where}: non-numeric value {text!r}") from None
    if math.isinf(value):
        raise PanelFormatError(f"{where}: infinite value {text!r}")
    return value


def _read_long(path: Path, key_cols: Sequence[str], value_col: str):
    """Yield ``(line_number, keys, value)`` for every data row of a long CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file, header row required") from None
        except csv.Error as exc:
            raise PanelFormatError(f"{path}:1: malformed CSV ({exc})") from None
        header = [h.strip() for h in header]
        missing = [c for c in (*key_cols, value_col) if c not in header]
        if missing:
            raise PanelFormatError(f"{path}:1: missing required column(s) {', '.join(missing)}")
        pos = [header.index(c) for c in key_cols]
        vpos = header.index(value_col)
        while True:
            try:
                row = next(reader)
            except StopIteration:
                return
            except csv.Error as exc:
                raise PanelFormatError(f"{path}:{reader.line_num}: malformed CSV ({exc})") from None
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelFormatError(
                    f"{path}:{line}: malformed CSV, expected {len(header)} fields, got {len(row)}"
                )
            keys = tuple(row[p].strip() for p in pos)
            if any(k == "" for k in keys):
                raise PanelFormatError(f"{path}:{line}: empty identifier in {keys}")
            yield line, keys, _parse_float(row[vpos], f"{path}:{line}")


def load_covariates(path, schema: Mapping[str, str] | None = None, units: Sequence[str] | None = None):
    """Read a long ``(unit, covariate, value)`` file.

    Returns ``(names, matrix)`` with rows in ``units`` order (or order of
    first appearance when ``units`` is None).
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    table: dict[tuple[str, str], float] = {}
    seen_units: dict[str, None] = {}
    names: dict[str, None] = {}
    for line, (unit, cov), value in _read_long(path, (schema["unit"], schema["covariate"]), schema["value"]):
        if (unit, cov) in table:
            raise PanelFormatError(f"{path}:{line}: duplicate row for key ({unit}, {cov})")
        table[(unit, cov)] = value
        seen_units.setdefault(unit)
        names.setdefault(cov)
    order = list(units) if units is not None else list(seen_units)
    unknown = [u for u in seen_units if u not in set(order)]
    if unknown:
        raise PanelFormatError(f"{path}: covariates given for unknown unit(s) {', '.join(unknown)}")
    names_t = tuple(names)
    mat = np.full((len(order), len(names_t)), np.nan)
    for (unit, cov), value in table.items():
        mat[order.index(unit), names_t.index(cov)] = value
    return names_t, mat


def load_panel(
    path,
    schema: Mapping[str, str] | None = None,
    *,
    treated_unit: str,
    cutoff: str,
    covariates_path=None,
) -> PanelDataset:
    """Load a long-format ``(unit, period, outcome, value)`` CSV.

    Units and outcomes keep their order of first appearance, periods are
    sorted (numerically when all labels are integers). Absent rows and
    empty values both become missing cells; nothing is imputed.

    Raises
    ------
    PanelFormatError
        On malformed CSV (message carries the line number), duplicated
        ``(unit, period, outcome)`` keys or non-numeric values.
    OSError
        If a file cannot be opened.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    cols = (schema["unit"], schema["period"], schema["outcome"])
    table: dict[tuple[str, str, str], float] = {}
    units: dict[str, None] = {}
    periods: dict[str, None] = {}
    outcomes: dict[str, None] = {}
    for line, key, value in _read_long(path, cols, schema["value"]):
        if key in table:
            raise PanelFormatError(f"{path}:{line}: duplicate row for key ({', '.join(key)})")
        table[key] = value
        units.setdefault(key[0])
        periods.setdefault(key[1])
        outcomes.setdefault(key[2])
    if not table:
        raise PanelFormatError(f"{path}: no data rows")
    unit_t, outcome_t = tuple(units), tuple(outcomes)
    period_t = tuple(sorted(periods, key=period_sort_key(periods)))
    ui = {u: i for i, u in enumerate(unit_t)}
    ti = {p: i for i, p in enumerate(period_t)}
    ki = {k: i for i, k in enumerate(outcome_t)}
    values = np.full((len(unit_t), len(period_t), len(outcome_t)), np.nan)
    for (u, p, k), v in table.items():
        values[ui[u], ti[p], ki[k]] = v
    cov_names: tuple[str, ...] = ()
    cov = None
    if covariates_path is not None:
        cov_names, cov = load_covariates(covariates_path, schema, unit_t)
    return PanelDataset(unit_t, period_t, outcome_t, values, treated_unit, cutoff, cov_names, cov)


def _fmt(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_panel(panel: PanelDataset, path, schema: Mapping[str, str] | None = None) -> None:
    """Write ``panel`` as long CSV; missing cells are written with an empty value.

    Rows are emitted unit-major in the panel's own order, so reloading
    reproduces unit/outcome order and bit-exact values.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema["unit"], schema["period"], schema["outcome"], schema["value"]])
        for i, u in enumerate(panel.units):
            for t, p in enumerate(panel.periods):
                for k, o in enumerate(panel.outcomes):
                    w.writerow([u, p, o, _fmt(panel.values[i, t, k])])


def write_covariates(panel: PanelDataset, path, schema: Mapping[str, str] | None = None) -> None:
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema["unit"], schema["covariate"], schema["value"]])
        for i, u in enumerate(panel.units):
            for r, name in enumerate(panel.covariate_names):
                w.writerow([u, name, _fmt(panel.covariates[i, r])])


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Issue:
    severity: str  # "error" | "warning"
    code: str
    message: str
    location: str = ""


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def warnings(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self) -> bool:
        return bool(self.issues)

    def codes(self) -> list[str]:
        return [i.code for i in self.issues]

    def add(self, severity: str, code: str, message: str, location: str = "") -> None:
        self.issues.append(Issue(severity, code, message, location))

    def format(self) -> str:
        lines = []
        for i in self.issues:
            loc = f" [{i.location}]" if i.location else ""
            lines.append(f"{i.severity}: {i.code}: {i.message}{loc}")
        return "\n".join(lines)


def validate_panel(panel: PanelDataset, match_outcomes: Sequence[str] | None = None) -> ValidationReport:
    """Structural checks; everything found goes into the report, nothing raises.

    ``match_outcomes`` restricts the pre-treatment checks (missing and
    zero-variance cells, matching-cell count) to the outcomes that will be
    matched on; by default all outcomes are checked.
    """
    report = ValidationReport()
    if panel.treated_unit not in panel.units:
        report.add("error", "treated-unit-missing", f"treated unit {panel.treated_unit!r} not in panel")
    if panel.cutoff not in panel.periods:
        report.add("error", "cutoff-out-of-range", f"cutoff {panel.cutoff!r} is not a panel period")
    elif panel.cutoff_index >= len(panel.periods) - 1:
        report.add("error", "cutoff-out-of-range", f"no period after cutoff {panel.cutoff!r}")
    if panel.n_donors < 2:
        report.add("error", "insufficient-donors", f"insufficient donors: {panel.n_donors} (need at least 2)")
    if report.errors:
        return report

    outcomes = list(match_outcomes) if match_outcomes is not None else list(panel.outcomes)
    unknown = [k for k in outcomes if k not in panel.outcomes]
    if unknown:
        report.add(
            "error",
            "unknown-outcome",
            f"unknown outcome(s) {', '.join(unknown)}; known outcomes: {', '.join(panel.outcomes)}",
        )
        return report
    t0 = panel.cutoff_index + 1
    usable = 0
    for name in outcomes:
        k = panel.outcome_index(name)
        pre = panel.values[:, :t0, k]
        for t in range(t0):
            col = pre[:, t]
            where = f"{name}@{panel.periods[t]}"
            missing = np.isnan(col)
            if missing.all():
                continue
            if missing.any():
                who = ", ".join(panel.units[i] for i in np.nonzero(missing)[0])
                report.add("warning", "missing-pre-cell", f"missing pre-treatment value for {who}", where)
                continue
            if np.ptp(col) == 0.0:
                report.add("warning", "zero-variance-cell", "pre-treatment cell constant across units", where)
                continue
            usable += 1
    if usable < panel.n_donors:
        report.add(
            "warning",
            "overfitting-risk",
            f"overfitting risk: {usable} matching cells for {panel.n_donors} donors",
        )
    if panel.covariates.size and np.isnan(panel.covariates).any():
        report.add("warning", "missing-covariate", "covariate table has missing values")
    return report
