"""Assembly of the stacked matching matrix.

Matching variables are the pre-treatment ``(outcome, period)`` cells of
the matched outcomes, optionally followed by covariate rows. Per unit
demeaning (over that unit's own pre-treatment periods) runs before per row
cross-unit standardization.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .panel import PanelDataset

__all__ = [
    "MatchSpec",
    "MatchSpecError",
    "MatchingMatrix",
    "MatchingWarning",
    "RowTransform",
    "demean_unit_series",
    "standardize_rows",
    "assemble_matching_matrix",
    "check_factor_condition",
    "transformed_outcome",
    "write_transform_log",
]

# relative spread below which a row counts as constant across units
ZERO_VARIANCE_TOL = 1e-12


class MatchSpecError(ValueError):
    """Raised when a MatchSpec cannot be applied to a panel."""


class MatchingWarning(UserWarning):
    pass


def _as_tuple(x) -> tuple[str, ...]:
    if x is None:
        return ()
    if isinstance(x, str):
        return (x,)
    return tuple(str(v) for v in x)


@dataclass(frozen=True)
class MatchSpec:
    """Which cells form the matching variables and how they are transformed.

    ``target_outcomes`` defaults to ``match_outcomes``.
    """

    match_outcomes: tuple[str, ...]
    cutoff: str
    use_covariates: bool = False
    demean: bool = True
    standardize: bool = True
    target_outcomes: tuple[str, ...] = ()

    def __post_init__(self):
        match = _as_tuple(self.match_outcomes)
        if not match:
            raise MatchSpecError("match_outcomes must not be empty")
        if len(set(match)) != len(match):
            raise MatchSpecError("match_outcomes contains duplicates")
        target = _as_tuple(self.target_outcomes) or match
        object.__setattr__(self, "match_outcomes", match)
        object.__setattr__(self, "target_outcomes", target)
        object.__setattr__(self, "cutoff", str(self.cutoff))

    def with_cutoff(self, cutoff: str) -> "MatchSpec":
        return replace(self, cutoff=str(cutoff))

    def restricted_to(self, outcome: str) -> "MatchSpec":
        return replace(self, match_outcomes=(outcome,), target_outcomes=(outcome,))


@dataclass(frozen=True)
class RowTransform:
    """Cross-unit centring/scaling applied to one matching row."""

    key: tuple
    center: float
    scale: float


@dataclass
class MatchingMatrix:
    """Matching variables for every unit, ``values`` is ``rows x units``.

    ``treated_col``/``donor_cols`` slice out the focal unit and the donor
    pool (panel unit order). ``row_outcome`` holds the outcome name of each
    row (``None`` for covariate rows) and ``transform_log`` the cross-unit
    centre/scale of each row; ``pre_means`` holds the per-unit
    pre-treatment mean subtracted from every matched outcome when demeaning.
    """

    rows: list[tuple]
    values: np.ndarray
    units: tuple[str, ...]
    treated_index: int
    transform_log: list[RowTransform]
    pre_means: dict[str, np.ndarray] = field(default_factory=dict)
    dropped: list[tuple[tuple, str]] = field(default_factory=list)
    row_outcome: list[str | None] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def donor_index(self) -> np.ndarray:
        idx = np.arange(len(self.units))
        return idx[idx != self.treated_index]

    @property
    def treated_col(self) -> np.ndarray:
        return self.values[:, self.treated_index]

    @property
    def donor_cols(self) -> np.ndarray:
        return self.values[:, self.donor_index]

    @property
    def scales(self) -> np.ndarray:
        return np.array([t.scale for t in self.transform_log])

    @property
    def centers(self) -> np.ndarray:
        return np.array([t.center for t in self.transform_log])

    def for_treated(self, index: int) -> "MatchingMatrix":
        """Same matrix with another unit in the focal role."""
        return replace(self, treated_index=int(index))

    def inverse_transform(self) -> np.ndarray:
        """Matching values mapped back to the original panel scale."""
        out = self.values * self.scales[:, None] + self.centers[:, None]
        for r, name in enumerate(self.row_outcome):
            if name is not None and name in self.pre_means:
                out[r] += self.pre_means[name]
        return out


def demean_unit_series(series, n_pre: int) -> np.ndarray:
    """Subtract the mean of the first ``n_pre`` (pre-treatment) entries.

    Missing (``nan``) entries are skipped in the mean and stay missing.

    >>> demean_unit_series([1.0, 2.0, 3.0], 2)
    array([-0.5,  0.5,  1.5])
    """
    y = np.asarray(series, dtype=float)
    pre = y[:n_pre]
    pre = pre[~np.isnan(pre)]
    if pre.size < 2:
        raise MatchSpecError("insufficient pre-treatment observations for demeaning")
    return y - pre.mean()


def _demean_block(block: np.ndarray, n_pre: int, outcome: str, units: Sequence[str]):
    """Row-wise :func:`demean_unit_series` over a ``units x periods`` block."""
    pre = block[:, :n_pre]
    counts = np.count_nonzero(~np.isnan(pre), axis=1)
    short = np.nonzero(counts < 2)[0]
    if short.size:
        who = ", ".join(units[i] for i in short)
        raise MatchSpecError(
            f"insufficient pre-treatment observations for demeaning outcome {outcome!r} (units: {who})"
        )
    means = np.nansum(pre, axis=1) / counts
    return block - means[:, None], means


def standardize_rows(rows) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Z-score each row across units (population sd, all units).

    Returns ``(transformed, means, sds, keep)``; rows that are constant
    across units cannot be standardized and are dropped with a
    :class:`MatchingWarning` (``keep`` marks the surviving input rows).
    """
    x = np.atleast_2d(np.asarray(rows, dtype=float))
    means = x.mean(axis=1)
    sds = x.std(axis=1)
    keep = sds > ZERO_VARIANCE_TOL * np.maximum(1.0, np.abs(means))
    if not keep.all():
        warnings.warn(
            f"dropped {int((~keep).sum())} zero-variance row(s) that cannot be standardized",
            MatchingWarning,
            stacklevel=2,
        )
    z = (x[keep] - means[keep, None]) / sds[keep, None]
    return z, means[keep], sds[keep], keep


def _check_spec(panel: PanelDataset, spec: MatchSpec) -> int:
    for name in (*spec.match_outcomes, *spec.target_outcomes):
        if name not in panel.outcomes:
            raise MatchSpecError(
                f"unknown outcome {name!r}; known outcomes: {', '.join(panel.outcomes)}"
            )
    if spec.cutoff not in panel.periods:
        raise MatchSpecError(f"cutoff {spec.cutoff!r} is not a panel period")
    c = panel.period_index(spec.cutoff)
    if panel.cutoff in panel.periods and c > panel.cutoff_index:
        raise MatchSpecError(f"match cutoff {spec.cutoff!r} is after the panel cutoff {panel.cutoff!r}")
    if c >= len(panel.periods) - 1:
        raise MatchSpecError(f"no period after cutoff {spec.cutoff!r}")
    if spec.use_covariates and not panel.covariate_names:
        raise MatchSpecError("use_covariates is set but the panel has no covariates")
    return c + 1


def transformed_outcome(panel: PanelDataset, spec: MatchSpec, outcome: str) -> tuple[np.ndarray, np.ndarray | None]:
    """``units x periods`` series of one outcome on the estimation scale.

    With ``spec.demean`` each unit's pre-cutoff mean is subtracted over all
    periods; returns ``(series, pre_means or None)``.
    """
    n_pre = _check_spec(panel, spec)
    block = panel.values[:, :, panel.outcome_index(outcome)]
    if not spec.demean:
        return block.copy(), None
    return _demean_block(block, n_pre, outcome, panel.units)


def assemble_matching_matrix(panel: PanelDataset, spec: MatchSpec) -> MatchingMatrix:
    """Stack the matching variables of all units into one matrix.

    Rows come in outcome order (``spec.match_outcomes``), then period
    order, with covariate rows last. Rows missing for any unit, and rows
    constant across units when standardizing, are dropped and logged in
    ``dropped``.

    Raises
    ------
    MatchSpecError
        Unknown outcomes, bad cutoff, too few pre-treatment observations
        for demeaning, or no usable rows.
    """
    n_pre = _check_spec(panel, spec)
    keys: list[tuple] = []
    owner: list[str | None] = []
    blocks: list[np.ndarray] = []
    pre_means: dict[str, np.ndarray] = {}
    dropped: list[tuple[tuple, str]] = []

    for name in spec.match_outcomes:
        block = panel.values[:, :n_pre, panel.outcome_index(name)]
        if spec.demean:
            full, means = _demean_block(panel.values[:, :, panel.outcome_index(name)], n_pre, name, panel.units)
            block = full[:, :n_pre]
            pre_means[name] = means
        complete = ~np.isnan(block).any(axis=0)
        for t in range(n_pre):
            key = (name, panel.periods[t])
            if complete[t]:
                keys.append(key)
                owner.append(name)
            else:
                who = ", ".join(panel.units[i] for i in np.nonzero(np.isnan(block[:, t]))[0])
                dropped.append((key, f"missing for {who}"))
        if not complete.any():
            raise MatchSpecError(f"cutoff {spec.cutoff!r} leaves no complete matching period for outcome {name!r}")
        blocks.append(block[:, complete].T)

    if spec.use_covariates:
        cov = panel.covariates
        complete = ~np.isnan(cov).any(axis=0)
        for r, cname in enumerate(panel.covariate_names):
            if complete[r]:
                keys.append((cname,))
                owner.append(None)
            else:
                dropped.append(((cname,), "missing covariate value"))
        blocks.append(cov[:, complete].T)

    raw = np.vstack(blocks) if blocks else np.empty((0, panel.n_units))
    if raw.shape[0] == 0:
        raise MatchSpecError("no usable matching rows")

    if spec.standardize:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            values, centers, scales, keep = standardize_rows(raw)
        for r in np.nonzero(~keep)[0]:
            dropped.append((keys[r], "zero variance across units"))
        if caught:
            warnings.warn(
                f"dropped {int((~keep).sum())} zero-variance matching row(s)", MatchingWarning, stacklevel=2
            )
        keys = [k for k, kp in zip(keys, keep) if kp]
        owner = [o for o, kp in zip(owner, keep) if kp]
        if not keys:
            raise MatchSpecError("no usable matching rows")
    else:
        values = raw
        centers = np.zeros(raw.shape[0])
        scales = np.ones(raw.shape[0])

    log = [RowTransform(k, float(c), float(s)) for k, c, s in zip(keys, centers, scales)]
    return MatchingMatrix(
        rows=keys,
        values=np.ascontiguousarray(values),
        units=panel.units,
        treated_index=panel.treated_index,
        transform_log=log,
        pre_means=pre_means,
        dropped=dropped,
        row_outcome=owner,
    )


def check_factor_condition(matrix: MatchingMatrix) -> float:
    """Smallest eigenvalue of ``A'A / rows`` for the donor columns ``A``.

    An observable stand-in for the full-rank requirement on the factor
    loadings: values near zero flag (near) collinear donors and hence
    non-unique weights.
    """
    a = matrix.donor_cols
    gram = a.T @ a / a.shape[0]
    return float(np.linalg.eigvalsh(gram)[0])


def write_transform_log(matrix: MatchingMatrix, path) -> None:
    """Audit CSV of every transformation applied to the matching variables."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "period", "unit", "quantity", "value"])
        for t in matrix.transform_log:
            var, period = (t.key[0], t.key[1]) if len(t.key) == 2 else (t.key[0], "")
            w.writerow([var, period, "", "cross_unit_mean", repr(t.center)])
            w.writerow([var, period, "", "cross_unit_sd", repr(t.scale)])
        for name, means in matrix.pre_means.items():
            for u, m in zip(matrix.units, means):
                w.writerow([name, "", u, "pre_treatment_mean", repr(float(m))])
        for key, reason in matrix.dropped:
            var, period = (key[0], key[1]) if len(key) == 2 else (key[0], "")
            w.writerow([var, period, "", "dropped", reason])
