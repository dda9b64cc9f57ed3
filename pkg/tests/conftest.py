import numpy as np
import pytest

from mosc.panel import PanelDataset


def factor_panel(
    seed=0,
    n_units=8,
    n_periods=12,
    n_outcomes=2,
    cutoff=8,
    n_factors=2,
    noise=0.3,
    covariates=0,
    treated=0,
):
    """Small low-rank panel with unit levels; periods are '2001', '2002', ..."""
    rng = np.random.default_rng(seed)
    load = rng.uniform(-1, 1, (n_units, n_factors))
    level = rng.normal(0, 3, (n_units, 1, n_outcomes))
    fac = rng.normal(0, 1, (n_periods, n_outcomes, n_factors))
    values = np.einsum("if,tkf->itk", load, fac) + level + noise * rng.normal(size=(n_units, n_periods, n_outcomes))
    units = tuple(f"u{i}" for i in range(n_units))
    periods = tuple(str(2001 + t) for t in range(n_periods))
    cov = rng.normal(size=(n_units, covariates)) if covariates else None
    return PanelDataset(
        units=units,
        periods=periods,
        outcomes=tuple(f"y{k + 1}" for k in range(n_outcomes)),
        values=values,
        treated_unit=units[treated],
        cutoff=periods[cutoff - 1],
        covariate_names=tuple(f"z{r + 1}" for r in range(covariates)),
        covariates=cov,
    )


@pytest.fixture
def make_panel():
    return factor_panel


@pytest.fixture
def small_panel():
    return factor_panel()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record a one-line PASS/FAIL verdict shown in the terminal summary."""
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
