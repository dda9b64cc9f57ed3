"""Command line front end.

Subcommands ``fit``, ``permute``, ``placebo``, ``simulate`` and
``validate`` read an optional INI-style spec file (``--spec``) whose
values are overridden by command line flags, write tidy CSV files into
``--out`` and finish with a ``manifest.json`` recording the resolved
configuration and SHA-256 hashes of inputs and outputs.

Exit codes: 0 success, 1 I/O failure, 2 invalid data or configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .estimator import SolverOptions, backdate, estimate_effects, fit_synthetic_control
from .inference import SIDES, permutation_test, reject_at_alpha
from .panel import DEFAULT_SCHEMA, PanelDataset, PanelFormatError, load_panel, validate_panel
from .prep import MatchSpec, MatchSpecError, write_transform_log
from .sim import TABLE1_D, TABLE1_ESTIMATORS, TABLE1_T0, DgpConfig, EstimatorKind, format_table, run_grid, write_summary_csv
from .solver import METHODS, SolverError

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2

COMMANDS = ("fit", "permute", "placebo", "simulate", "validate")

CONFIG_KEYS = {
    "panel": {
        "path",
        "covariates",
        "treated",
        "cutoff",
        "unit_column",
        "period_column",
        "outcome_column",
        "value_column",
        "covariate_column",
    },
    "match": {"outcomes", "targets", "use_covariates", "demean", "standardize"},
    "solver": {"method", "tol", "max_iter"},
    "inference": {"alpha", "side"},
    "placebo": {"cutoff"},
    "simulate": {"d", "t0", "estimators", "reps", "n_units", "k", "t_post", "r", "f", "omega_sd", "coef_sd", "noise_sd"},
    "run": {"out", "seed", "jobs"},
}
PATH_KEYS = {("panel", "path"), ("panel", "covariates"), ("run", "out")}
SCHEMA_KEYS = {"unit", "period", "outcome", "value", "covariate"}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


def read_spec_file(path) -> dict[tuple[str, str], str]:
    """Parse an INI spec file into ``{(section, key): value}``.

    Unknown sections or keys are rejected. Relative paths are resolved
    against the spec file's directory.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        try:
            parser.read_file(fh, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]; known: {', '.join(CONFIG_KEYS)}")
        for key, value in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                known = ", ".join(sorted(CONFIG_KEYS[section]))
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]; known: {known}")
            value = value.strip()
            if (section, key) in PATH_KEYS and value:
                value = str(path.parent / value)
            values[(section, key)] = value
    return values


def _bool(text: str, what: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{what}: expected a boolean, got {text!r}")


def _num(text: str, what: str, kind=float):
    try:
        return kind(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{what}: expected {kind.__name__}, got {text!r}") from None


def _list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _parse_schema(text: str) -> dict[str, str]:
    out = {}
    for item in _list(text):
        key, sep, col = item.partition("=")
        if not sep or key.strip() not in SCHEMA_KEYS or not col.strip():
            raise ConfigError(f"--schema: expected role=column pairs with role in {', '.join(sorted(SCHEMA_KEYS))}")
        out[key.strip()] = col.strip()
    return out


@dataclass
class RunConfig:
    """Fully resolved settings for one subcommand run."""

    command: str
    out: str
    seed: int = 0
    jobs: int = 1
    panel: str | None = None
    covariates: str | None = None
    treated: str | None = None
    cutoff: str | None = None
    schema: dict = field(default_factory=dict)
    outcomes: tuple[str, ...] = ()
    targets: tuple[str, ...] = ()
    use_covariates: bool | None = None
    demean: bool = True
    standardize: bool = True
    method: str = "active_set"
    tol: float = 1e-10
    max_iter: int = 100_000
    alpha: float | None = None
    side: str = "two_sided"
    placebo_cutoff: str | None = None
    sim_d: tuple[float, ...] = TABLE1_D
    sim_t0: tuple[int, ...] = TABLE1_T0
    estimators: tuple[str, ...] = tuple(k.label for k in TABLE1_ESTIMATORS)
    reps: int = 2000
    n_units: int = 30
    K: int = 10
    T_post: int = 1
    r: int = 2
    f: int = 4
    omega_sd: float = 10.0
    coef_sd: float = 1.0
    noise_sd: float = 1.0

    @property
    def solver(self) -> SolverOptions:
        return SolverOptions(self.method, self.tol, self.max_iter)

    def manifest_view(self) -> dict:
        """Settings that can change results; paths, ``out`` and ``jobs`` excluded."""
        if self.command == "simulate":
            keys = (
                "sim_d sim_t0 estimators reps n_units K T_post r f omega_sd coef_sd noise_sd method tol max_iter"
            ).split()
        else:
            keys = ["treated", "cutoff", "schema"]
            if self.command != "validate":
                keys += "outcomes targets use_covariates demean standardize method tol max_iter".split()
            if self.command == "permute":
                keys += ["alpha", "side"]
            if self.command == "placebo":
                keys += ["placebo_cutoff"]
        view = {}
        for k in keys:
            v = getattr(self, k)
            view[k] = list(v) if isinstance(v, tuple) else v
        return view


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the spec file and command line flags (flags win)."""
    file_values = read_spec_file(args.spec) if getattr(args, "spec", None) else {}

    def get(section, key, flag=None):
        value = getattr(args, flag, None) if flag else None
        if value is not None:
            return value
        return file_values.get((section, key))

    cfg = RunConfig(command=args.command, out=get("run", "out", "out") or "")
    if not cfg.out:
        raise ConfigError("no output directory: pass --out or set [run] out")
    seed = get("run", "seed", "seed")
    if seed is not None:
        cfg.seed = _num(seed, "seed", int)
        if cfg.seed < 0:
            raise ConfigError("seed must be non-negative")
    jobs = get("run", "jobs", "jobs")
    if jobs is not None:
        cfg.jobs = _num(jobs, "jobs", int)
        if cfg.jobs < 1:
            raise ConfigError("jobs must be at least 1")

    method = get("solver", "method")
    if method is not None:
        if method not in METHODS:
            raise ConfigError(f"solver method must be one of {', '.join(METHODS)}, got {method!r}")
        cfg.method = method
    if get("solver", "tol") is not None:
        cfg.tol = _num(get("solver", "tol"), "tol")
        if not cfg.tol > 0:
            raise ConfigError("tol must be positive")
    if get("solver", "max_iter") is not None:
        cfg.max_iter = _num(get("solver", "max_iter"), "max_iter", int)
        if cfg.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")

    if cfg.command == "simulate":
        _simulate_settings(cfg, get)
        return cfg

    cfg.panel = get("panel", "path", "panel")
    if not cfg.panel:
        raise ConfigError("no panel file: pass --panel or set [panel] path")
    cfg.covariates = get("panel", "covariates", "covariates")
    cfg.treated = get("panel", "treated", "treated")
    cfg.cutoff = get("panel", "cutoff", "cutoff")
    if not cfg.treated or not cfg.cutoff:
        raise ConfigError("treated unit and cutoff are required (--treated/--cutoff or [panel] treated/cutoff)")
    schema = {}
    for role in sorted(SCHEMA_KEYS):
        col = file_values.get(("panel", f"{role}_column"))
        if col:
            schema[role] = col
    if getattr(args, "schema", None):
        schema.update(_parse_schema(args.schema))
    cfg.schema = schema

    outcomes = get("match", "outcomes", "outcomes")
    cfg.outcomes = _list(outcomes) if outcomes else ()
    targets = get("match", "targets")
    cfg.targets = _list(targets) if targets else ()
    if get("match", "use_covariates") is not None:
        cfg.use_covariates = _bool(get("match", "use_covariates"), "use_covariates")
    if get("match", "demean") is not None:
        cfg.demean = _bool(get("match", "demean"), "demean")
    if get("match", "standardize") is not None:
        cfg.standardize = _bool(get("match", "standardize"), "standardize")

    if cfg.command == "permute":
        alpha = get("inference", "alpha", "alpha")
        if alpha is not None:
            cfg.alpha = _num(alpha, "alpha")
            if not 0.0 < cfg.alpha <= 1.0:
                raise ConfigError("alpha must be in (0, 1]")
        side = get("inference", "side", "side")
        if side is not None:
            if side not in SIDES:
                raise ConfigError(f"side must be one of {', '.join(SIDES)}, got {side!r}")
            cfg.side = side
    if cfg.command == "placebo":
        cfg.placebo_cutoff = get("placebo", "cutoff", "placebo_cutoff")
        if not cfg.placebo_cutoff:
            raise ConfigError("placebo needs a placebo cutoff (--placebo-cutoff or [placebo] cutoff)")
    return cfg


def _simulate_settings(cfg: RunConfig, get) -> None:
    d = get("simulate", "d")
    if d is not None:
        cfg.sim_d = tuple(_num(v, "d") for v in _list(d))
    t0 = get("simulate", "t0")
    if t0 is not None:
        cfg.sim_t0 = tuple(_num(v, "t0", int) for v in _list(t0))
    est = get("simulate", "estimators")
    if est is not None:
        cfg.estimators = _list(est)
    reps = get("simulate", "reps", "reps")
    if reps is not None:
        cfg.reps = _num(reps, "reps", int)
    if cfg.reps < 1:
        raise ConfigError(f"reps must be positive, got {cfg.reps}")
    for key, attr, kind in (
        ("n_units", "n_units", int),
        ("k", "K", int),
        ("t_post", "T_post", int),
        ("r", "r", int),
        ("f", "f", int),
        ("omega_sd", "omega_sd", float),
        ("coef_sd", "coef_sd", float),
        ("noise_sd", "noise_sd", float),
    ):
        value = get("simulate", key)
        if value is not None:
            setattr(cfg, attr, _num(value, key, kind))
    try:
        kinds = [EstimatorKind.parse(e) for e in cfg.estimators]
        for d in cfg.sim_d:
            for t0 in cfg.sim_t0:
                config = _dgp_config(cfg, d, t0)
                for k in kinds:
                    k.spec(config)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _dgp_config(cfg: RunConfig, d: float, t0: int) -> DgpConfig:
    return DgpConfig(
        T0=t0,
        d=d,
        n_units=cfg.n_units,
        T_post=cfg.T_post,
        K=cfg.K,
        r=cfg.r,
        f=cfg.f,
        omega_sd=cfg.omega_sd,
        coef_sd=cfg.coef_sd,
        noise_sd=cfg.noise_sd,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, str)):
        return str(x)
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _write_csv(path: Path, header, rows, preamble=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in preamble:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, cfg: RunConfig, inputs: dict, outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": cfg.command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.manifest_view(),
        "inputs": {role: {"file": Path(p).name, "sha256": _sha256(p)} for role, p in inputs.items()},
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# panel commands


def _load(cfg: RunConfig) -> PanelDataset:
    schema = {**DEFAULT_SCHEMA, **cfg.schema}
    return load_panel(
        cfg.panel, schema, treated_unit=cfg.treated, cutoff=cfg.cutoff, covariates_path=cfg.covariates
    )


def _inputs(cfg: RunConfig) -> dict:
    inputs = {"panel": cfg.panel}
    if cfg.covariates:
        inputs["covariates"] = cfg.covariates
    return inputs


def _spec(cfg: RunConfig, panel: PanelDataset) -> MatchSpec:
    use_cov = cfg.use_covariates if cfg.use_covariates is not None else bool(panel.covariate_names)
    return MatchSpec(
        match_outcomes=cfg.outcomes or panel.outcomes,
        cutoff=cfg.cutoff,
        use_covariates=use_cov,
        demean=cfg.demean,
        standardize=cfg.standardize,
        target_outcomes=cfg.targets,
    )


def _checked_panel(cfg: RunConfig) -> tuple[PanelDataset, MatchSpec]:
    panel = _load(cfg)
    report = validate_panel(panel, cfg.outcomes or None)
    if not report.ok:
        raise ConfigError(report.format())
    for issue in report.warnings:
        _warn(f"{issue.code}: {issue.message}")
    return panel, _spec(cfg, panel)


def _write_fit(out: Path, panel, fit, effects) -> list[str]:
    _write_csv(out / "weights.csv", ["donor", "weight"], zip(fit.donors, fit.weights.weights))
    prefit = [(name, fit.pre_rmspe[name]) for name in fit.spec.match_outcomes if name in fit.pre_rmspe]
    prefit.append(("pooled", fit.pooled_pre_rmspe))
    _write_csv(out / "prefit.csv", ["outcome", "pre_rmspe"], prefit)
    _write_csv(
        out / "gaps.csv",
        ["period", "outcome", "window", "gap"],
        ((p, o, win, g) for p, o, _, _, g, win in effects.rows()),
    )
    level_t, level_s = effects.treated_level(), effects.synthetic_level()
    rows = []
    for t, p in enumerate(effects.periods):
        for k, o in enumerate(effects.outcomes):
            rows.append(
                (p, o, effects.window[t], effects.treated[t, k], effects.synthetic[t, k], level_t[t, k], level_s[t, k])
            )
    _write_csv(
        out / "paths.csv",
        ["period", "outcome", "window", "treated", "synthetic", "treated_level", "synthetic_level"],
        rows,
    )
    write_transform_log(fit.matrix, out / "transform_log.csv")
    return ["weights.csv", "prefit.csv", "gaps.csv", "paths.csv", "transform_log.csv"]


def _fit_diagnostics(fit) -> dict:
    wv = fit.weights
    if fit.non_unique:
        _warn(f"near-collinear donors (smallest Gram eigenvalue {fit.min_eigenvalue:.3g}); weights may not be unique")
    if not wv.converged:
        _warn(f"solver stopped after {wv.iterations} iterations without meeting the tolerance")
    return {
        "diagnostics": {
            "converged": wv.converged,
            "dropped_rows": len(fit.dropped_rows),
            "iterations": wv.iterations,
            "matching_rows": fit.n_rows,
            "method": wv.method,
            "min_eigenvalue": fit.min_eigenvalue,
            "objective": wv.objective,
            "optimality_gap": wv.gap,
        }
    }


def cmd_fit(cfg: RunConfig) -> int:
    panel, spec = _checked_panel(cfg)
    fit = fit_synthetic_control(panel, spec, cfg.solver)
    effects = estimate_effects(panel, fit)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _write_fit(out, panel, fit, effects)
    write_manifest(out, cfg, _inputs(cfg), files, _fit_diagnostics(fit))
    return EXIT_OK


def cmd_placebo(cfg: RunConfig) -> int:
    panel, spec = _checked_panel(cfg)
    fit, effects = backdate(panel, spec, cfg.placebo_cutoff, cfg.solver)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _write_fit(out, panel, fit, effects)
    rows = []
    for k, o in enumerate(effects.outcomes):
        for window in ("pre", "placebo", "post"):
            sel = [t for t, w in enumerate(effects.window) if w == window]
            g = [effects.gap[t, k] for t in sel if not math.isnan(effects.gap[t, k])]
            mean_abs = sum(abs(v) for v in g) / len(g) if g else float("nan")
            rows.append((o, window, len(sel), mean_abs))
    _write_csv(out / "windows.csv", ["outcome", "window", "periods", "mean_abs_gap"], rows)
    files.append("windows.csv")
    write_manifest(out, cfg, _inputs(cfg), files, _fit_diagnostics(fit))
    return EXIT_OK


def cmd_permute(cfg: RunConfig) -> int:
    panel, spec = _checked_panel(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = permutation_test(panel, spec, cfg.side, alpha=cfg.alpha, options=cfg.solver, jobs=cfg.jobs)
    for w in caught:
        _warn(str(w.message))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, u in enumerate(res.units):
        for k, o in enumerate(res.outcomes):
            rows.append(
                (
                    u,
                    o,
                    i == res.treated_index,
                    res.pre_rmspe[i, k],
                    res.post_rmspe[i, k],
                    res.ratio[i, k],
                    int(res.rank[i, k]),
                    bool(res.undefined[i, k]),
                )
            )
    _write_csv(
        out / "ratios.csv",
        ["unit", "outcome", "treated", "pre_rmspe", "post_rmspe", "ratio", "rank", "undefined"],
        rows,
    )
    prows = []
    for k, o in enumerate(res.outcomes):
        prows.append(("overall", o, int(res.rank[res.treated_index, k]), res.p_overall[k], reject_at_alpha(res, k)))
        for t, p in enumerate(res.post_periods):
            r = int(res.rank_t[res.treated_index, t, k])
            prows.append((p, o, r, res.p_per_period[t, k], r <= math.ceil(res.alpha * res.n_units - 1e-9)))
    _write_csv(
        out / "pvalues.csv",
        ["period", "outcome", "rank", "p_value", "reject"],
        prows,
        preamble=(f"alpha={res.alpha!r}", f"side={res.side}", f"units={res.n_units}"),
    )
    write_manifest(out, cfg, _inputs(cfg), ["ratios.csv", "pvalues.csv"])
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    panel = _load(cfg)
    report = validate_panel(panel, cfg.outcomes or None)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "validation.csv",
        ["severity", "code", "message", "location"],
        ((i.severity, i.code, i.message, i.location) for i in report.issues),
    )
    write_manifest(
        out,
        cfg,
        _inputs(cfg),
        ["validation.csv"],
        {"summary": {"errors": len(report.errors), "warnings": len(report.warnings)}},
    )
    if report:
        print(report.format(), file=sys.stderr)
    print(
        f"{panel.n_units} units, {len(panel.periods)} periods, {len(panel.outcomes)} outcomes, "
        f"{panel.n_missing} missing cells: {len(report.errors)} error(s), {len(report.warnings)} warning(s)"
    )
    return EXIT_OK if report.ok else EXIT_CONFIG


def cmd_simulate(cfg: RunConfig) -> int:
    cells = [(d, t0, EstimatorKind.parse(e)) for d in cfg.sim_d for t0 in cfg.sim_t0 for e in cfg.estimators]
    base = _dgp_config(cfg, 0.0, 1)

    def progress(d, t0):
        print(f"done d={d:g} T0={t0}", file=sys.stderr, flush=True)

    summaries = run_grid(
        cells, cfg.reps, jobs=cfg.jobs, seed=cfg.seed, base=base, options=cfg.solver, progress=progress
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(summaries, out / "summary.csv")
    with open(out / "table1.txt", "w", encoding="utf-8") as fh:
        fh.write(format_table(summaries))
    write_manifest(out, cfg, {}, ["summary.csv", "table1.txt"])
    sys.stdout.write(format_table(summaries))
    return EXIT_OK


HANDLERS = {
    "fit": cmd_fit,
    "permute": cmd_permute,
    "placebo": cmd_placebo,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosc",
        description="Synthetic control with multiple outcomes.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="INI spec file; command line flags override its values")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", help="base random seed (recorded in the manifest)")
    common.add_argument("--jobs", help="worker threads/processes")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--panel", help="long-format CSV: unit, period, outcome, value")
    data.add_argument("--covariates", help="long-format CSV: unit, covariate, value")
    data.add_argument("--treated", help="treated (focal) unit")
    data.add_argument("--cutoff", help="last pre-treatment period")
    data.add_argument("--schema", help="column names, e.g. unit=region,period=quarter")
    data.add_argument("--outcomes", help="comma separated outcomes to match on (default: all)")

    helps = {
        "fit": "fit weights and write gaps and paths",
        "permute": "placebo-in-space permutation test",
        "placebo": "refit with a backdated cutoff",
        "simulate": "run the Monte Carlo grid",
        "validate": "check a panel and report issues",
    }
    for name in COMMANDS:
        parents = [common] if name == "simulate" else [common, data]
        p = sub.add_parser(name, parents=parents, help=helps[name], description=helps[name])
        if name == "permute":
            p.add_argument("--alpha", help="test level (default 3/(number of units))")
            p.add_argument("--side", choices=SIDES, help="alternative hypothesis (default two_sided)")
        if name == "placebo":
            p.add_argument("--placebo-cutoff", dest="placebo_cutoff", help="backdated cutoff, before --cutoff")
        if name == "simulate":
            p.add_argument("--reps", help="replications per cell")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return HANDLERS[cfg.command](cfg)
    except OSError as exc:
        where = exc.filename if exc.filename is not None else ""
        print(f"error: cannot access {where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, PanelFormatError, MatchSpecError, SolverError, ValueError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
