"""Synthetic control fits and per-period, per-outcome effect estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import PanelDataset
from .prep import (
    MatchingMatrix,
    MatchSpec,
    MatchSpecError,
    assemble_matching_matrix,
    check_factor_condition,
    transformed_outcome,
)
from .solver import DEFAULT_MAX_ITER, DEFAULT_TOL, WeightVector, solve_simplex_gram

__all__ = [
    "SCFit",
    "EffectEstimate",
    "SolverOptions",
    "fit_synthetic_control",
    "fit_single_outcome",
    "estimate_effects",
    "estimate_effect_on_untreated",
    "backdate",
    "synthetic_series",
    "require_valid",
]

EFFECT_ON_TREATED = "effect_on_treated"
EFFECT_ON_UNTREATED = "effect_on_untreated"
# smallest Gram eigenvalue below which the weights are flagged non-unique
NON_UNIQUE_EIG = 1e-8


@dataclass(frozen=True)
class SolverOptions:
    method: str = "active_set"
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER


@dataclass
class SCFit:
    """Fitted synthetic control for the panel's focal unit.

    ``pre_rmspe`` maps each matched outcome to the RMSPE of its matching
    rows on the demeaned-but-unstandardized scale; ``pooled_pre_rmspe``
    pools every outcome row (covariate rows excluded).
    """

    spec: MatchSpec
    weights: WeightVector
    treated_unit: str
    donors: tuple[str, ...]
    pre_rmspe: dict[str, float]
    pooled_pre_rmspe: float
    matrix: MatchingMatrix
    min_eigenvalue: float

    @property
    def n_rows(self) -> int:
        return self.matrix.n_rows

    @property
    def dropped_rows(self):
        return self.matrix.dropped

    @property
    def non_unique(self) -> bool:
        """True when collinear donors make the optimal weights non-unique."""
        return self.min_eigenvalue < NON_UNIQUE_EIG

    def weight_of(self, donor: str) -> float:
        return float(self.weights.weights[self.donors.index(donor)])


@dataclass
class EffectEstimate:
    """Treated vs synthetic series for the target outcomes, all periods.

    Arrays are ``periods x outcomes`` on the estimation scale (demeaned
    when the spec demeans). ``window`` labels each period ``pre``,
    ``placebo`` (after a backdated cutoff but not after the real one) or
    ``post``. ``gap`` is treated minus synthetic for effects on the
    treated and synthetic minus focal unit for effects on the untreated;
    it is ``nan`` where the focal unit or a positively weighted donor is
    missing.
    """

    periods: tuple[str, ...]
    outcomes: tuple[str, ...]
    treated: np.ndarray
    synthetic: np.ndarray
    gap: np.ndarray
    window: tuple[str, ...]
    direction: str
    treated_pre_mean: np.ndarray | None = None

    @property
    def after_cutoff(self) -> np.ndarray:
        return np.array([w != "pre" for w in self.window])

    @property
    def gaps(self) -> np.ndarray:
        """Gaps for periods after the estimation cutoff."""
        return self.gap[self.after_cutoff]

    @property
    def post_periods(self) -> tuple[str, ...]:
        return tuple(p for p, w in zip(self.periods, self.window) if w != "pre")

    def gap_at(self, period: str, outcome: str) -> float:
        return float(self.gap[self.periods.index(period), self.outcomes.index(outcome)])

    def synthetic_level(self) -> np.ndarray:
        """Synthetic path shifted back to the focal unit's pre-treatment level."""
        if self.treated_pre_mean is None:
            return self.synthetic.copy()
        return self.synthetic + self.treated_pre_mean[None, :]

    def treated_level(self) -> np.ndarray:
        if self.treated_pre_mean is None:
            return self.treated.copy()
        return self.treated + self.treated_pre_mean[None, :]

    def rows(self):
        """Tidy records ``(period, outcome, treated, synthetic, gap, window)``."""
        for t, p in enumerate(self.periods):
            for k, o in enumerate(self.outcomes):
                yield p, o, self.treated[t, k], self.synthetic[t, k], self.gap[t, k], self.window[t]


def require_valid(panel: PanelDataset) -> None:
    """Raise :class:`MatchSpecError` on the errors validate_panel reports."""
    if panel.treated_unit not in panel.units:
        raise MatchSpecError(f"treated unit {panel.treated_unit!r} not in panel")
    if panel.cutoff not in panel.periods:
        raise MatchSpecError(f"cutoff {panel.cutoff!r} is not a panel period")
    if panel.cutoff_index >= len(panel.periods) - 1:
        raise MatchSpecError(f"no period after cutoff {panel.cutoff!r}")
    if panel.n_donors < 2:
        raise MatchSpecError(f"insufficient donors: {panel.n_donors} (need at least 2)")


def _others(n: int, unit: int) -> np.ndarray:
    idx = np.arange(n)
    return np.concatenate((idx[:unit], idx[unit + 1 :]))


def _solve_for(gram: np.ndarray, unit: int, options: SolverOptions) -> WeightVector:
    others = _others(gram.shape[0], unit)
    G = np.ascontiguousarray(gram[others][:, others])
    c = np.ascontiguousarray(gram[others, unit])
    return solve_simplex_gram(
        G, c, float(gram[unit, unit]), tol=options.tol, max_iter=options.max_iter, method=options.method
    )


def _rmspe_by_outcome(matrix: MatchingMatrix, resid: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-outcome and pooled RMSPE of standardized residual columns.

    ``resid`` is ``rows x m``; residuals are mapped back to the
    unstandardized scale and covariate rows are left out.
    """
    sq = np.square(resid * matrix.scales[:, None])
    names = matrix.row_outcome
    is_outcome = np.array([n is not None for n in names], dtype=bool)
    per = {}
    for name in dict.fromkeys(n for n in names if n is not None):
        rows = np.array([n == name for n in names], dtype=bool)
        per[name] = np.sqrt(sq[rows].mean(axis=0))
    if is_outcome.any():
        pooled = np.sqrt(sq[is_outcome].mean(axis=0))
    else:
        pooled = np.full(resid.shape[1], np.nan)
    return per, pooled


def _pre_fit(matrix: MatchingMatrix, unit: int, weights: np.ndarray) -> tuple[dict[str, float], float]:
    others = _others(len(matrix.units), unit)
    resid = matrix.values[:, unit] - matrix.values[:, others] @ weights
    per, pooled = _rmspe_by_outcome(matrix, resid[:, None])
    return {k: float(v[0]) for k, v in per.items()}, float(pooled[0])


def _fit_from_matrix(matrix: MatchingMatrix, gram: np.ndarray, spec: MatchSpec, options: SolverOptions) -> SCFit:
    unit = matrix.treated_index
    wv = _solve_for(gram, unit, options)
    others = _others(len(matrix.units), unit)
    b = matrix.values[:, unit]
    r = b - matrix.values[:, others] @ wv.weights
    wv.objective = float(r @ r)
    per, pooled = _pre_fit(matrix, unit, wv.weights)
    return SCFit(
        spec=spec,
        weights=wv,
        treated_unit=matrix.units[unit],
        donors=tuple(matrix.units[j] for j in others),
        pre_rmspe=per,
        pooled_pre_rmspe=pooled,
        matrix=matrix,
        min_eigenvalue=float("nan"),
    )


def fit_synthetic_control(
    panel: PanelDataset, spec: MatchSpec, options: SolverOptions | None = None
) -> SCFit:
    """Fit simplex weights for the panel's treated unit on the spec's matching rows.

    The donor Gram matrix is taken from the all-units Gram matrix, so the
    fit is bit-identical to the focal unit's refit inside a permutation
    test.
    """
    require_valid(panel)
    options = options or SolverOptions()
    matrix = assemble_matching_matrix(panel, spec)
    gram = matrix.values.T @ matrix.values
    fit = _fit_from_matrix(matrix, gram, spec, options)
    fit.min_eigenvalue = check_factor_condition(matrix)
    return fit


def fit_single_outcome(
    panel: PanelDataset, spec: MatchSpec, outcome: str, options: SolverOptions | None = None
) -> SCFit:
    """Fit matching on ``outcome`` alone (the conventional single-outcome weights)."""
    return fit_synthetic_control(panel, spec.restricted_to(outcome), options)


def synthetic_series(series: np.ndarray, focal: int, weights: np.ndarray) -> np.ndarray:
    """Weighted donor combination of a ``units x periods`` array.

    Periods where any positively weighted donor is missing come out
    ``nan``; weights are never renormalized.
    """
    donors = series[_others(series.shape[0], focal)]
    used = weights > 0
    vals = np.where(np.isnan(donors), 0.0, donors)
    out = weights @ vals
    miss = np.isnan(donors[used]).any(axis=0)
    out[miss] = np.nan
    return out


def _windows(panel: PanelDataset, cutoff: str, true_cutoff: str | None) -> tuple[str, ...]:
    c = panel.period_index(cutoff)
    tc = panel.period_index(true_cutoff) if true_cutoff is not None else c
    out = []
    for t in range(len(panel.periods)):
        if t <= c:
            out.append("pre")
        elif t <= tc:
            out.append("placebo")
        else:
            out.append("post")
    return tuple(out)


def _effects(panel: PanelDataset, fit: SCFit, direction: str, true_cutoff: str | None = None) -> EffectEstimate:
    spec = fit.spec
    focal = panel.unit_index(fit.treated_unit)
    if tuple(u for u in panel.units if u != fit.treated_unit) != fit.donors:
        raise MatchSpecError("fit was produced from a different panel")
    T, K = len(panel.periods), len(spec.target_outcomes)
    treated = np.empty((T, K))
    synth = np.empty((T, K))
    pre_mean = np.empty(K) if spec.demean else None
    for k, name in enumerate(spec.target_outcomes):
        series, means = transformed_outcome(panel, spec, name)
        treated[:, k] = series[focal]
        synth[:, k] = synthetic_series(series, focal, fit.weights.weights)
        if pre_mean is not None:
            pre_mean[k] = means[focal]
    gap = treated - synth if direction == EFFECT_ON_TREATED else synth - treated
    return EffectEstimate(
        periods=panel.periods,
        outcomes=spec.target_outcomes,
        treated=treated,
        synthetic=synth,
        gap=gap,
        window=_windows(panel, spec.cutoff, true_cutoff),
        direction=direction,
        treated_pre_mean=pre_mean,
    )


def estimate_effects(panel: PanelDataset, fit: SCFit) -> EffectEstimate:
    """Gaps ``Y_treated - sum_j w_j Y_j`` for every period and target outcome.

    Values are demeaned by each unit's own pre-cutoff mean when the fit's
    spec demeans, raw otherwise.
    """
    return _effects(panel, fit, EFFECT_ON_TREATED)


def estimate_effect_on_untreated(panel: PanelDataset, fit: SCFit) -> EffectEstimate:
    """Effect on a single untreated focal unit, using treated units as donors.

    The panel's ``treated_unit`` plays the untreated focal unit; gaps are
    synthetic minus focal, the exact negative of :func:`estimate_effects`.
    Valid only if treatment effects load on the same predictors as the
    untreated outcomes, which the data cannot confirm.
    """
    return _effects(panel, fit, EFFECT_ON_UNTREATED)


def backdate(
    panel: PanelDataset, spec: MatchSpec, placebo_cutoff: str, options: SolverOptions | None = None
) -> tuple[SCFit, EffectEstimate]:
    """Refit with the cutoff moved back to ``placebo_cutoff``.

    Periods in ``(placebo_cutoff, spec.cutoff]`` are labelled ``placebo``;
    gaps there should be near zero when the synthetic control reproduces
    the untreated path.
    """
    placebo_cutoff = str(placebo_cutoff)
    if placebo_cutoff not in panel.periods:
        raise MatchSpecError(f"placebo cutoff {placebo_cutoff!r} is not a panel period")
    if panel.period_index(placebo_cutoff) >= panel.period_index(spec.cutoff):
        raise MatchSpecError(f"placebo cutoff {placebo_cutoff!r} must be before the cutoff {spec.cutoff!r}")
    fit = fit_synthetic_control(panel, spec.with_cutoff(placebo_cutoff), options)
    return fit, _effects(panel, fit, EFFECT_ON_TREATED, true_cutoff=spec.cutoff)
