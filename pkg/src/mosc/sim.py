"""Interactive fixed effects Monte Carlo and the estimator comparison grid.

Outcomes follow

    Y[i, t, k] = delta[t, k] + Z[i] . theta[t, k] + mu[i] . lambda[t, k] + eps[i, t, k]

with observed predictors ``Z`` (``r`` of them) and unobserved loadings
``mu`` (``f`` of them) uniform on ``[-1, 1]`` for donors and on
``[-d, d]`` for the treated unit. Every coefficient of outcome ``k`` is
normal around an outcome-specific centre ``omega[k] ~ N(0, omega_sd^2)``.
The treatment effect is zero, so every estimated effect is pure error.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .estimator import SolverOptions
from .inference import PermutationWarning, permutation_test, reject_at_alpha
from .panel import PanelDataset
from .prep import MatchSpec

__all__ = [
    "DgpConfig",
    "DgpDraw",
    "EstimatorKind",
    "SimSummary",
    "generate_draw",
    "replicate_draw",
    "run_cell",
    "run_grid",
    "table1_cells",
    "TABLE1_ESTIMATORS",
    "format_table",
    "write_summary_csv",
    "summarize",
]

SIM_ALPHA = 0.10
N_RECORD = 4
TABLE1_D = (1.0, 0.5, 0.0)
TABLE1_T0 = (5, 10, 20)


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of one simulation design point."""

    T0: int
    d: float
    n_units: int = 30
    T_post: int = 1
    K: int = 10
    r: int = 2
    f: int = 4
    omega_sd: float = 10.0
    coef_sd: float = 1.0
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"d must lie in [0, 1], got {self.d}")
        for name in ("T0", "n_units", "T_post", "K", "r", "f"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_units < 3:
            raise ValueError("n_units must be at least 3 (treated unit plus two donors)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def J(self) -> int:
        return self.n_units - 1

    @property
    def T(self) -> int:
        return self.T0 + self.T_post


@dataclass
class DgpDraw:
    """One simulated panel with the latent quantities that produced it.

    Latent shapes: ``Z (N, r)``, ``mu (N, f)``, ``omega (K,)``,
    ``delta (T, K)``, ``theta (T, K, r)``, ``lam (T, K, f)``,
    ``eps (N, T, K)``. Unit 0 is treated.
    """

    config: DgpConfig
    panel: PanelDataset
    Z: np.ndarray
    mu: np.ndarray
    omega: np.ndarray
    delta: np.ndarray
    theta: np.ndarray
    lam: np.ndarray
    eps: np.ndarray

    def systematic(self) -> np.ndarray:
        """``delta + Z theta + mu lambda`` for every (unit, period, outcome)."""
        return _systematic(self.Z, self.mu, self.delta, self.theta, self.lam)


def _systematic(Z, mu, delta, theta, lam) -> np.ndarray:
    return delta[None, :, :] + np.einsum("ir,tkr->itk", Z, theta) + np.einsum("if,tkf->itk", mu, lam)


def _labels(prefix: str, n: int) -> tuple[str, ...]:
    width = len(str(n - 1))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(n))


def generate_draw(config: DgpConfig, rng: np.random.Generator | None = None) -> DgpDraw:
    """Draw one panel from the factor model.

    Draw order is fixed: ``Z``, ``mu``, ``omega``, the per-period
    coefficients ``(delta, theta, lambda)`` outcome by outcome, then the
    noise in unit-period-outcome order. ``rng`` defaults to a generator
    seeded with ``config.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    N, T, K, r, f = config.n_units, config.T, config.K, config.r, config.f
    support = np.ones((N, 1))
    support[0] = config.d
    Z = rng.uniform(-1.0, 1.0, (N, r)) * support
    mu = rng.uniform(-1.0, 1.0, (N, f)) * support
    omega = rng.normal(0.0, config.omega_sd, K)
    coefs = rng.normal(0.0, config.coef_sd, (K, T, 1 + r + f)) + omega[:, None, None]
    eps = rng.normal(0.0, config.noise_sd, (N, T, K))

    delta = coefs[:, :, 0].T.copy()
    theta = coefs[:, :, 1 : 1 + r].transpose(1, 0, 2).copy()
    lam = coefs[:, :, 1 + r :].transpose(1, 0, 2).copy()
    values = _systematic(Z, mu, delta, theta, lam) + eps

    units = _labels("u", N)
    panel = PanelDataset(
        units=units,
        periods=tuple(str(t) for t in range(1, T + 1)),
        outcomes=tuple(f"y{k + 1}" for k in range(K)),
        values=values,
        treated_unit=units[0],
        cutoff=str(config.T0),
        covariate_names=tuple(f"z{j + 1}" for j in range(r)),
        covariates=Z,
    )
    return DgpDraw(config, panel, Z, mu, omega, delta, theta, lam, eps)


def replicate_draw(config: DgpConfig, rep: int) -> DgpDraw:
    """Draw for replicate ``rep``; independent of how replicates are scheduled."""
    ss = np.random.SeedSequence(config.seed, spawn_key=(int(rep),))
    return generate_draw(config, np.random.default_rng(ss))


@dataclass(frozen=True)
class EstimatorKind:
    """``conventional_raw`` (outcome 1 in levels) or ``multi_demeaned`` on K outcomes.

    All arms standardize the matching rows and include the observed
    predictors ``Z``; the effect is always measured on outcome 1.
    """

    name: str
    k_match: int = 1

    def __post_init__(self):
        if self.name not in ("conventional_raw", "multi_demeaned"):
            raise ValueError(f"unknown estimator {self.name!r}")
        if self.k_match < 1 or (self.name == "conventional_raw" and self.k_match != 1):
            raise ValueError(f"invalid outcome count for {self.name}: {self.k_match}")

    @classmethod
    def parse(cls, text: str) -> "EstimatorKind":
        """Parse ``conventional_raw`` or ``multi_demeaned:K``.

        >>> EstimatorKind.parse("multi_demeaned:3").label
        'multi_demeaned:3'
        """
        text = text.strip()
        name, _, k = text.partition(":")
        if name == "conventional_raw" and not k:
            return cls(name)
        if name == "multi_demeaned" and k.isdigit():
            return cls(name, int(k))
        raise ValueError(f"cannot parse estimator {text!r}; use conventional_raw or multi_demeaned:K")

    @property
    def label(self) -> str:
        return self.name if self.name == "conventional_raw" else f"{self.name}:{self.k_match}"

    @property
    def demean(self) -> bool:
        return self.name == "multi_demeaned"

    def spec(self, config: DgpConfig) -> MatchSpec:
        if self.k_match > config.K:
            raise ValueError(f"{self.label} needs {self.k_match} outcomes, DGP has {config.K}")
        return MatchSpec(
            match_outcomes=tuple(f"y{k + 1}" for k in range(self.k_match)),
            cutoff=str(config.T0),
            use_covariates=True,
            demean=self.demean,
            standardize=True,
            target_outcomes=("y1",),
        )


TABLE1_ESTIMATORS = (
    EstimatorKind("conventional_raw"),
    EstimatorKind("multi_demeaned", 1),
    EstimatorKind("multi_demeaned", 3),
    EstimatorKind("multi_demeaned", 10),
)


@dataclass
class SimSummary:
    """Aggregates of one (design point, estimator) cell.

    ``bias`` is the mean absolute first-period effect on outcome 1 and
    ``sd`` its standard deviation across replicates (``ddof=1``); the true
    effect is zero. ``*_mcse`` are Monte Carlo standard errors and
    ``perfect_fit`` is the share of replicates in which the treated unit
    was interpolated exactly before the cutoff.
    """

    d: float
    T0: int
    estimator: str
    pre_fit: float
    bias: float
    sd: float
    rej: float
    n_reps: int
    seed: int
    pre_fit_mcse: float = float("nan")
    bias_mcse: float = float("nan")
    sd_mcse: float = float("nan")
    rej_mcse: float = float("nan")
    mean_effect: float = float("nan")
    perfect_fit: float = float("nan")

    def as_row(self) -> dict:
        return asdict(self)


SUMMARY_FIELDS = tuple(SimSummary.__dataclass_fields__)


def _replicate(config: DgpConfig, kinds: Sequence[EstimatorKind], rep: int, options: SolverOptions) -> np.ndarray:
    """``(len(kinds), 4)`` records (effect, pre-fit, reject, perfect fit) of one replicate."""
    panel = replicate_draw(config, rep).panel
    out = np.empty((len(kinds), N_RECORD))
    for e, kind in enumerate(kinds):
        with warnings.catch_warnings():
            # exact interpolation is routine when rows < donors; it is
            # counted in the perfect_fit column instead
            warnings.simplefilter("ignore", PermutationWarning)
            res = permutation_test(panel, kind.spec(config), "two_sided", alpha=SIM_ALPHA, options=options)
        ti = res.treated_index
        out[e] = (
            res.gaps[ti, 0, 0],
            res.pooled_pre_rmspe[ti],
            float(reject_at_alpha(res)),
            float(res.undefined[ti, 0]),
        )
    return out


def _run_chunk(args) -> np.ndarray:
    config, kinds, reps, options = args
    return np.stack([_replicate(config, kinds, rep, options) for rep in reps])


def summarize(config: DgpConfig, kind: EstimatorKind, records: np.ndarray) -> SimSummary:
    """Aggregate ``(n_reps, 4)`` replicate records (effect, pre-fit, reject, perfect fit)."""
    n = records.shape[0]
    if n == 0:
        raise ValueError("no replicates to summarize")
    tau, pre, rej = records[:, 0], records[:, 1], records[:, 2]
    a = np.abs(tau)
    sd = float(np.std(tau, ddof=1)) if n > 1 else float("nan")
    if n > 3:
        m2 = np.mean((tau - tau.mean()) ** 2)
        m4 = np.mean((tau - tau.mean()) ** 4)
        # delta method: var(s) ~ sigma^2 (kurtosis - 1) / (4 n)
        sd_mcse = float(sd * math.sqrt(max(m4 / (m2 * m2) - 1.0, 0.0) / (4 * n))) if m2 > 0 else 0.0
    else:
        sd_mcse = float("nan")
    p = float(np.mean(rej))
    return SimSummary(
        d=float(config.d),
        T0=int(config.T0),
        estimator=kind.label,
        pre_fit=float(np.mean(pre)),
        bias=float(np.mean(a)),
        sd=sd,
        rej=p,
        n_reps=int(n),
        seed=int(config.seed),
        pre_fit_mcse=float(np.std(pre, ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
        bias_mcse=float(np.std(a, ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
        sd_mcse=sd_mcse,
        rej_mcse=float(math.sqrt(p * (1 - p) / n)),
        mean_effect=float(np.mean(tau)),
        perfect_fit=float(np.mean(records[:, 3])),
    )


def _chunks(n_reps: int, jobs: int) -> list[range]:
    size = max(1, math.ceil(n_reps / max(1, jobs * 4)))
    return [range(s, min(s + size, n_reps)) for s in range(0, n_reps, size)]


def _simulate(
    config: DgpConfig, kinds: Sequence[EstimatorKind], n_reps: int, jobs: int, options: SolverOptions, pool=None
) -> np.ndarray:
    tasks = [(config, tuple(kinds), list(ch), options) for ch in _chunks(n_reps, jobs)]
    if pool is None:
        parts = [_run_chunk(t) for t in tasks]
    else:
        parts = list(pool.map(_run_chunk, tasks))
    return np.concatenate(parts, axis=0)


def run_cell(
    config: DgpConfig,
    kind: EstimatorKind | str,
    n_reps: int,
    *,
    jobs: int = 1,
    options: SolverOptions | None = None,
) -> SimSummary:
    """Simulate ``n_reps`` replicates of one estimator at one design point.

    Replicate ``i`` always sees the draw of :func:`replicate_draw` for
    ``i``, so results do not depend on ``jobs``.
    """
    if isinstance(kind, str):
        kind = EstimatorKind.parse(kind)
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    kind.spec(config)
    options = options or SolverOptions()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rec = _simulate(config, [kind], n_reps, jobs, options, pool)
    else:
        rec = _simulate(config, [kind], n_reps, 1, options)
    return summarize(config, kind, rec[:, 0])


def table1_cells() -> list[tuple[float, int, EstimatorKind]]:
    """The 9 design points x 4 estimators of the reference comparison."""
    return [(d, t0, k) for d in TABLE1_D for t0 in TABLE1_T0 for k in TABLE1_ESTIMATORS]


def run_grid(
    cells: Sequence[tuple[float, int, EstimatorKind | str]],
    n_reps: int,
    *,
    jobs: int = 1,
    seed: int = 0,
    base: DgpConfig | None = None,
    options: SolverOptions | None = None,
    progress=None,
) -> list[SimSummary]:
    """Run every cell; estimators sharing ``(d, T0)`` share the same draws.

    Output order follows the input cell order. ``base`` supplies the
    remaining DGP parameters (``K`` must cover the largest estimator).
    ``progress`` is called with each finished ``(d, T0)`` pair.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    options = options or SolverOptions()
    parsed = [(float(d), int(t0), EstimatorKind.parse(k) if isinstance(k, str) else k) for d, t0, k in cells]
    if not parsed:
        return []
    base = base or DgpConfig(T0=1, d=0.0)
    points = list(dict.fromkeys((d, t0) for d, t0, _ in parsed))
    results: dict[tuple, SimSummary] = {}
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for d, t0 in points:
            config = replace(base, d=d, T0=t0, seed=seed)
            kinds = list(dict.fromkeys(k for dd, tt, k in parsed if (dd, tt) == (d, t0)))
            for k in kinds:
                k.spec(config)
            rec = _simulate(config, kinds, n_reps, jobs, options, pool)
            for e, k in enumerate(kinds):
                results[(d, t0, k)] = summarize(config, k, rec[:, e])
            if progress is not None:
                progress(d, t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return [results[c] for c in parsed]


def _fmt_num(x: float, width: int = 7) -> str:
    return f"{x:{width}.2f}" if np.isfinite(x) else f"{'nan':>{width}}"


def _column_title(label: str) -> str:
    if label == "conventional_raw":
        return "Conventional SC"
    name, _, k = label.partition(":")
    return f"Multi-Outcome SC (K={k})" if name == "multi_demeaned" else label


def format_table(summaries: Sequence[SimSummary]) -> str:
    """Aligned text table: one row per (d, T0), one column group per estimator."""
    if not summaries:
        return ""
    estimators = list(dict.fromkeys(s.estimator for s in summaries))
    by_key = {(s.d, s.T0, s.estimator): s for s in summaries}
    rows = list(dict.fromkeys((s.d, s.T0) for s in summaries))
    stats = ("Pre-fit", "Bias", "SD", "Rej.")
    group_w = 8 * len(stats)
    head1 = f"{'':>5} {'':>4} |" + "|".join(f"{_column_title(e):^{group_w}}" for e in estimators) + "|"
    head2 = f"{'d':>5} {'T0':>4} |" + "|".join("".join(f"{s:>8}" for s in stats) for _ in estimators) + "|"
    rule = "-" * len(head2)
    lines = [head1, head2, rule]
    for d, t0 in rows:
        cells = []
        for e in estimators:
            s = by_key.get((d, t0, e))
            if s is None:
                cells.append(" " * group_w)
            else:
                cells.append("".join(" " + _fmt_num(v) for v in (s.pre_fit, s.bias, s.sd, s.rej)))
        lines.append(f"{d:>5g} {t0:>4d} |" + "|".join(cells) + "|")
    n = {s.n_reps for s in summaries}
    lines.append(rule)
    lines.append(f"replications per cell: {', '.join(str(v) for v in sorted(n))}; seed {summaries[0].seed}")
    return "\n".join(lines) + "\n"


def write_summary_csv(summaries: Sequence[SimSummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for s in summaries:
            w.writerow([repr(v) if isinstance(v, float) else v for v in s.as_row().values()])


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)
