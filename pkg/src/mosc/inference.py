"""Placebo-in-space permutation inference on post/pre RMSPE ratios."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .estimator import SolverOptions, _others, _rmspe_by_outcome, _solve_for, require_valid
from .panel import PanelDataset
from .prep import MatchSpec, MatchSpecError, assemble_matching_matrix, transformed_outcome

__all__ = [
    "PermutationResult",
    "PermutationWarning",
    "SIDES",
    "rmspe",
    "permutation_test",
    "reject_at_alpha",
]

SIDES = ("two_sided", "lower", "upper")
# pre-treatment RMSPE below this makes the ratio undefined
DEGENERATE_PRE = 1e-12


class PermutationWarning(UserWarning):
    pass


def rmspe(gaps) -> float:
    """Root mean squared gap over the non-missing entries.

    >>> rmspe([3.0, 4.0])
    3.5355339059327378
    """
    g = np.asarray(gaps, dtype=float).ravel()
    g = g[~np.isnan(g)]
    if g.size == 0:
        raise ValueError("rmspe of an all-missing gap vector")
    return float(np.sqrt(np.mean(g * g)))


def _directional(gaps: np.ndarray, side: str) -> np.ndarray:
    # one-sided tests only count gaps in the hypothesised direction
    if side == "lower":
        return np.where(np.isnan(gaps), np.nan, np.maximum(-gaps, 0.0))
    if side == "upper":
        return np.where(np.isnan(gaps), np.nan, np.maximum(gaps, 0.0))
    return np.abs(gaps)


def _synthetic_all(series: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Synthetic series for every unit at once (row ``i`` of ``W`` fits unit ``i``)."""
    miss = np.isnan(series)
    out = W @ np.where(miss, 0.0, series)
    out[((W > 0).astype(float) @ miss) > 0] = np.nan
    return out


def _ranks(stat: np.ndarray) -> np.ndarray:
    """Descending competition ranks along axis 0: ``1 + #{j : stat_j > stat_i}``.

    Tied units share the best rank, so every unit with an undefined
    (infinite) ratio sits at rank 1; ``nan`` ranks below everything.
    """
    s = np.where(np.isnan(stat), -np.inf, stat)
    return 1 + (s[None, ...] > s[:, None, ...]).sum(axis=1)


@dataclass
class PermutationResult:
    """Per-unit RMSPE ratios and the focal unit's permutation p-values.

    Arrays are indexed ``[unit, outcome]`` or ``[unit, post period,
    outcome]`` in panel unit order. ``rank`` is each unit's descending
    rank among all units (1 = largest ratio, ties share the better
    rank). ``undefined`` marks units whose pre-treatment RMSPE is
    numerically zero; their ratio is ``inf`` and they rank first.
    """

    units: tuple[str, ...]
    treated_index: int
    outcomes: tuple[str, ...]
    post_periods: tuple[str, ...]
    side: str
    alpha: float
    pre_rmspe: np.ndarray
    post_rmspe: np.ndarray
    ratio: np.ndarray
    ratio_t: np.ndarray
    rank: np.ndarray
    rank_t: np.ndarray
    p_overall: np.ndarray
    p_per_period: np.ndarray
    undefined: np.ndarray
    gaps: np.ndarray
    pooled_pre_rmspe: np.ndarray
    weights: np.ndarray

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def treated_unit(self) -> str:
        return self.units[self.treated_index]

    def outcome_pos(self, outcome) -> int:
        if isinstance(outcome, (int, np.integer)):
            return int(outcome)
        return self.outcomes.index(outcome)

    def treated_rank(self, outcome) -> int:
        return int(self.rank[self.treated_index, self.outcome_pos(outcome)])


def permutation_test(
    panel: PanelDataset,
    spec: MatchSpec,
    side: str = "two_sided",
    *,
    alpha: float | None = None,
    options: SolverOptions | None = None,
    jobs: int = 1,
) -> PermutationResult:
    """Refit with every unit in turn as the pseudo-treated unit.

    For each unit and target outcome the statistic is post-RMSPE divided
    by pre-RMSPE; p-values are the focal unit's descending rank divided by
    the number of units. With ``side="lower"`` (alternative: negative
    effect) only negative gaps enter the post-RMSPE and the per-period
    statistics, positive gaps contribute zero; ``"upper"`` mirrors this.

    Pre-RMSPE of a matched outcome comes from its matching rows on the
    demeaned-but-unstandardized scale; for an unmatched target outcome it
    is the RMSPE of its pre-cutoff gaps.
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {', '.join(SIDES)}")
    require_valid(panel)
    options = options or SolverOptions()
    matrix = assemble_matching_matrix(panel, spec)
    gram = matrix.values.T @ matrix.values
    n = panel.n_units
    if alpha is None:
        alpha = 3.0 / n
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            fits = list(pool.map(lambda i: _solve_for(gram, i, options), range(n)))
    else:
        fits = [_solve_for(gram, i, options) for i in range(n)]

    c = panel.period_index(spec.cutoff)
    post = np.arange(c + 1, len(panel.periods))
    targets = spec.target_outcomes
    K = len(targets)
    series = [transformed_outcome(panel, spec, name)[0] for name in targets]

    W = np.zeros((n, n))
    for i, wv in enumerate(fits):
        W[i, _others(n, i)] = wv.weights
    M = matrix.values
    per, pooled = _rmspe_by_outcome(matrix, M - M @ W.T)

    pre = np.empty((n, K))
    gaps = np.empty((n, post.size, K))
    for k, name in enumerate(targets):
        g = series[k] - _synthetic_all(series[k], W)
        gaps[:, :, k] = g[:, post]
        if name in per:
            pre[:, k] = per[name]
            continue
        pre_g = g[:, : c + 1]
        for i in range(n):
            if np.isnan(pre_g[i]).all():
                raise MatchSpecError(f"no pre-treatment gaps for target outcome {name!r} of unit {panel.units[i]}")
            pre[i, k] = rmspe(pre_g[i])

    directed = _directional(gaps, side)
    sq = np.where(np.isnan(directed), np.nan, directed * directed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        post_rmspe = np.sqrt(np.nanmean(sq, axis=1))
    undefined = pre < DEGENERATE_PRE
    if undefined.any():
        who = sorted({panel.units[i] for i in np.nonzero(undefined)[0]})
        warnings.warn(
            f"numerically perfect pre-treatment fit for {', '.join(who)}; ratio undefined, ranked first",
            PermutationWarning,
            stacklevel=2,
        )
    safe_pre = np.where(undefined, 1.0, pre)
    ratio = np.where(undefined, np.inf, post_rmspe / safe_pre)
    ratio_t = np.where(undefined[:, None, :], np.inf, directed / safe_pre[:, None, :])
    ratio_t = np.where(np.isnan(directed), np.nan, ratio_t)

    rank = _ranks(ratio)
    rank_t = _ranks(ratio_t)
    ti = panel.treated_index
    return PermutationResult(
        units=panel.units,
        treated_index=ti,
        outcomes=targets,
        post_periods=tuple(panel.periods[t] for t in post),
        side=side,
        alpha=float(alpha),
        pre_rmspe=pre,
        post_rmspe=post_rmspe,
        ratio=ratio,
        ratio_t=ratio_t,
        rank=rank,
        rank_t=rank_t,
        p_overall=rank[ti] / n,
        p_per_period=rank_t[ti] / n,
        undefined=undefined,
        gaps=gaps,
        pooled_pre_rmspe=pooled,
        weights=W,
    )


def reject_at_alpha(result: PermutationResult, outcome=0, alpha: float | None = None) -> bool:
    """Reject when the focal unit ranks within the top ``ceil(alpha * units)``.

    >>> math.ceil(0.1 * 30 - 1e-9)
    3
    """
    alpha = result.alpha if alpha is None else alpha
    top = math.ceil(alpha * result.n_units - 1e-9)
    return result.treated_rank(outcome) <= top
