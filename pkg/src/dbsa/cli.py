"""Command-line front end.

A run is described by one JSON config; command-line flags override it.
The resolved config is written next to every output so a run can be
repeated exactly.

Exit codes: 0 success, 2 invalid input, 3 falsified model, 4 solver budget
exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import svg
from .bounds import Interval, RestrictionSet, bounds_curve, breakdown_point, k_bar, k_grid, lp_bounds, survey_bounds
from .comparators import METHODS, DbsaSettings, exact_coverage
from .covariates import CovariateModel, qclp_bounds
from .design import DesignError, DesignSpec, make_batch
from .iv import IvData, iv_problem, latt_bounds, wald
from .population import (
    DataError,
    ObservedData,
    Population,
    load_csv,
    make_data,
    science_tables_appendix,
    survey_example,
    survey_sample,
    toy_population,
)
from .worstcase import (
    FalsifiedError,
    SolverConfig,
    export_milp,
    k_alpha_flagged,
    pbar_curve,
    pbar_mod,
    CompletionProblem,
)

EXIT_OK, EXIT_INVALID, EXIT_FALSIFIED, EXIT_BUDGET = 0, 2, 3, 4
MODES = ("ate", "iv", "survey", "coverage", "milp")


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class DesignConfig:
    """Assignment batch: ``source`` is ``auto``, ``exhaustive``, or ``monte_carlo``."""

    source: str = "auto"
    batch_size: int = 1600
    seed: int = 0


@dataclass
class GridConfig:
    """``values`` wins over ``n_points``/``upper``; ``upper`` defaults to the outcome spread."""

    n_points: int = 201
    upper: float | None = None
    values: list | None = None


@dataclass
class RunConfig:
    mode: str = "ate"
    data: str | None = None
    bounds: list | None = None
    out: str = "dbsa_out"
    design: DesignConfig = field(default_factory=DesignConfig)
    k_grid: GridConfig = field(default_factory=GridConfig)
    alphas: list = field(default_factory=lambda: [0.5, 0.4, 0.3, 0.2, 0.1, 0.05])
    solver: dict = field(default_factory=dict)
    lam: float | None = None
    covariates: list | None = None
    variance: str = "observed"
    methods: list = field(default_factory=lambda: list(METHODS))
    inner_solver: str = "grid"
    threads: int = 1

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        try:
            doc["design"] = DesignConfig(**doc.get("design", {}))
            doc["k_grid"] = GridConfig(**doc.get("k_grid", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def solver_config(self) -> SolverConfig:
        opts = dict(self.solver)
        opts.setdefault("seed", self.design.seed)
        opts["n_jobs"] = self.threads
        try:
            return SolverConfig(**opts)
        except TypeError as exc:
            raise ConfigError(f"solver: {exc}") from None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.data is None:
            raise ConfigError("no data given (use --data or the config's 'data' key)")
        if self.design.source not in ("auto", "exhaustive", "monte_carlo"):
            raise ConfigError(f"unknown design source {self.design.source!r}")
        if self.design.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError("alphas must be a nonempty list of values in (0, 1)")
        if self.k_grid.values is not None:
            v = np.asarray(self.k_grid.values, dtype=float)
            if v.size == 0 or np.any(v < 0) or np.any(np.diff(v) <= 0):
                raise ConfigError("k grid values must be nonnegative and increasing")
        elif self.k_grid.n_points < 2:
            raise ConfigError("k grid needs at least two points")
        if self.lam is not None and not 0 <= self.lam <= 1:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.mode == "coverage":
            if not self.methods:
                raise ConfigError("coverage needs at least one method")
            bad = [m for m in self.methods if m not in METHODS]
            if bad:
                raise ConfigError(f"unknown methods {bad}")
        self.solver_config()


def parse_k_grid(text: str) -> GridConfig:
    """``"201"`` (points), ``"upper:points"``, or a comma list of values."""
    text = text.strip()
    try:
        if "," in text:
            return GridConfig(values=[float(v) for v in text.split(",") if v.strip()])
        if ":" in text:
            upper, n = text.split(":")
            return GridConfig(n_points=int(n), upper=float(upper))
        return GridConfig(n_points=int(text))
    except ValueError:
        raise ConfigError(f"cannot parse k grid {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbsa", description="Design-based sensitivity analysis")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--data", help="CSV/JSON path or fixture:NAME (toy, survey, dgp1, dgp2, dgp3)")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--k-grid", help="points, upper:points, or comma-separated K values")
    p.add_argument("--alphas", help="comma-separated alpha levels")
    p.add_argument("--batch", type=int, help="Monte Carlo batch size")
    p.add_argument("--seed", type=int, help="seed for the design batch and the solver")
    p.add_argument("--lambda", dest="lam", type=float, help="covariate predictive strength")
    p.add_argument("--design", choices=("auto", "exhaustive", "monte_carlo"))
    p.add_argument("--threads", type=int, help="worker threads")
    return p


def resolve_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    cfg = RunConfig.from_dict(doc)
    for name in ("mode", "data", "out", "lam", "threads"):
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, name, val)
    if args.k_grid is not None:
        cfg.k_grid = parse_k_grid(args.k_grid)
    if args.alphas is not None:
        try:
            cfg.alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse alphas {args.alphas!r}") from None
    if args.batch is not None:
        cfg.design.batch_size = args.batch
    if args.seed is not None:
        cfg.design.seed = args.seed
        cfg.solver["seed"] = args.seed
    if args.design is not None:
        cfg.design.source = args.design
    cfg.validate()
    return cfg


_FIXTURES = ("toy", "survey", "dgp1", "dgp2", "dgp3")


def _bounds(cfg: RunConfig):
    return tuple(cfg.bounds) if cfg.bounds is not None else None


def load_population(cfg: RunConfig) -> Population:
    name = cfg.data
    if name.startswith("fixture:"):
        key = name.split(":", 1)[1]
        if key == "toy":
            return toy_population()
        if key in ("dgp1", "dgp2", "dgp3"):
            return science_tables_appendix()[int(key[-1]) - 1]
        raise ConfigError(f"fixture {key!r} is not a science table; choose from toy, dgp1-3")
    if not name.endswith(".json"):
        raise ConfigError("coverage needs a science table (JSON) or a fixture")
    return Population.from_json(name)


def load_observed(cfg: RunConfig) -> ObservedData:
    name = cfg.data
    if name.startswith("fixture:") or name.endswith(".json"):
        return make_data(load_population(cfg))
    return load_csv(name, bounds=_bounds(cfg))


def load_iv(cfg: RunConfig) -> IvData:
    path = cfg.data
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no data rows")
    for col in ("y", "x", "z"):
        if col not in rows[0]:
            raise DataError(f"{path}: missing required column {col!r}")

    def num(row, i, col):
        try:
            return float(row[col])
        except (TypeError, ValueError):
            raise DataError(f"{path}: row {i} has non-numeric {col} = {row[col]!r}") from None

    y = np.array([num(r, i, "y") for i, r in enumerate(rows)])
    x = np.array([num(r, i, "x") for i, r in enumerate(rows)]).astype(int)
    z = np.array([num(r, i, "z") for i, r in enumerate(rows)]).astype(int)
    if "ymin" in rows[0] and "ymax" in rows[0]:
        b = np.array([[num(r, i, "ymin"), num(r, i, "ymax")] for i, r in enumerate(rows)])
    elif cfg.bounds is not None:
        b = tuple(cfg.bounds)
    else:
        raise DataError(f"{path}: no ymin/ymax columns and no global bounds configured")
    return IvData(y, x, z, b)


def load_survey(cfg: RunConfig):
    lo_hi = _bounds(cfg) or (0.0, 1.0)
    if cfg.data == "fixture:survey":
        w, s = survey_example()
        return survey_sample(w, s, lo_hi)
    with open(cfg.data, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "y" not in rows[0] or "s" not in rows[0]:
        raise DataError(f"{cfg.data}: survey files need columns y and s")
    s = np.array([int(float(r["s"])) for r in rows])
    w = np.array([float(r["y"]) if int(float(r["s"])) == 1 else math.nan for r in rows])
    return survey_sample(np.nan_to_num(w, nan=lo_hi[0]), s, lo_hi)


def _design(cfg: RunConfig, n: int, n1: int) -> DesignSpec:
    d = cfg.design
    if d.source == "auto":
        return DesignSpec.auto(n, n1, d.batch_size, d.seed)
    return DesignSpec(n, n1, source=d.source, batch_size=d.batch_size, seed=d.seed)


def _grid(cfg: RunConfig, upper: float, extra=()) -> np.ndarray:
    g = cfg.k_grid
    if g.values is not None:
        return np.asarray(g.values, dtype=float)
    return k_grid(g.upper if g.upper is not None else upper, g.n_points, extra)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    return out


def _iv_row(iv: Interval):
    return (iv.lo, iv.hi) if not iv.empty else (math.nan, math.nan)


def cmd_analyze(cfg: RunConfig) -> int:
    """Bounds curve, worst-case curve, calibrated sets, summary, and figures."""
    data = load_observed(cfg)
    out = _prepare_out(cfg)
    restrictions = RestrictionSet()
    model = None
    if cfg.lam is not None:
        model = CovariateModel.from_data(data, cfg.lam, cfg.covariates, cfg.variance)
    batch = make_batch(_design(cfg, data.n, data.n1))
    problem = CompletionProblem.from_data(data, batch, restrictions, model)
    kbp = breakdown_point(data, restrictions)
    grid = _grid(cfg, problem.spread, (kbp,))
    if model is None:
        bc = bounds_curve(data, grid, restrictions)

        def interval_at(k):
            return lp_bounds(data, k, restrictions)
    else:
        def interval_at(k):
            return qclp_bounds(data, model, k, restrictions)

        ivs = [interval_at(k) for k in grid]
        bc = None
    rows = []
    for i, k in enumerate(grid):
        iv = bc.intervals[i] if bc is not None else ivs[i]
        rows.append((float(k), *_iv_row(iv)))
    _write_rows(out / "bounds_curve.csv", ["k", "lb", "ub"], rows)

    cfg_solver = cfg.solver_config()
    curve = (pbar_curve(problem, grid, cfg_solver) if model is None
             else pbar_mod(problem, grid, cfg_solver))
    curve.to_csv(out / "pbar_curve.csv")
    (out / "pbar_diagnostics.json").write_text(curve.diagnostics_json() + "\n")
    consensus = interval_at(math.inf)
    summary = {
        "ate_hat": data.ate_hat,
        "k_bp": kbp,
        "k_bar": k_bar(data, restrictions),
        "consensus": list(_iv_row(consensus)),
        "n": data.n,
        "n_treated": data.n1,
        "batch_size": batch.size,
        "exhaustive": batch.exhaustive,
        "lambda": cfg.lam,
        "status": curve.status,
    }
    if curve.status == "falsified":
        summary["pbar_at_kbp"] = None
        summary["k_alpha"] = []
        _write_json(out / "summary.json", summary)
        print(f"covariate restriction with lambda = {cfg.lam} is falsified by the data", file=sys.stderr)
        return EXIT_FALSIFIED
    summary["pbar_at_kbp"] = curve.at(kbp) if math.isfinite(kbp) else 1.0
    cal = []
    for a in cfg.alphas:
        k, sat = k_alpha_flagged(curve, a)
        iv = interval_at(k)
        cal.append({"level": 1 - a, "alpha": a, "k": k, "lb": _iv_row(iv)[0],
                    "ub": _iv_row(iv)[1], "saturated": sat})
    cal.sort(key=lambda r: r["level"])
    _write_rows(out / "calibrated_sets.csv", ["level", "k", "lb", "ub", "saturated"],
                [(r["level"], r["k"], r["lb"], r["ub"], int(r["saturated"])) for r in cal])
    summary["k_alpha"] = cal
    _write_json(out / "summary.json", summary)
    _figures(out, rows, curve, cal)
    if curve.status == "budget":
        print("solver time budget exceeded at some K; values are conservative upper bounds",
              file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def _figures(out: Path, bound_rows, curve, cal) -> None:
    k = np.array([r[0] for r in bound_rows])
    top = svg.Panel("K", "identified set")
    top.add(k, [r[1] for r in bound_rows], "lower").add(k, [r[2] for r in bound_rows], "upper")
    bottom = svg.Panel("K", "worst-case balance probability", ylim=(0.0, 1.0))
    bottom.add(curve.k_grid, curve.p_tilde, "p_tilde", step=True)
    (out / "bounds_and_pbar.svg").write_text(svg.render([top, bottom]))
    lev = [r["level"] for r in cal]
    panel = svg.Panel("1 - alpha", "calibrated identified set")
    panel.add(lev, [r["lb"] for r in cal], "lower").add(lev, [r["ub"] for r in cal], "upper")
    (out / "calibrated_sets.svg").write_text(svg.render([panel]))


def cmd_iv(cfg: RunConfig) -> int:
    """Treated-complier effect bounds with instrument-design calibration."""
    data = load_iv(cfg)
    out = _prepare_out(cfg)
    batch = make_batch(_design(cfg, data.n, data.n1))
    problem = iv_problem(data, batch)
    grid = _grid(cfg, problem.spread)
    rows = [(float(k), *_iv_row(latt_bounds(data, k))) for k in grid]
    _write_rows(out / "latt_bounds_curve.csv", ["k", "lb", "ub"], rows)
    curve = pbar_curve(problem, grid, cfg.solver_config())
    curve.to_csv(out / "latt_pbar_curve.csv")
    cal = []
    for a in cfg.alphas:
        k, sat = k_alpha_flagged(curve, a)
        lo, hi = _iv_row(latt_bounds(data, k))
        cal.append({"level": 1 - a, "alpha": a, "k": k, "lb": lo, "ub": hi, "saturated": sat})
    cal.sort(key=lambda r: r["level"])
    _write_rows(out / "latt_calibrated_sets.csv", ["level", "k", "lb", "ub", "saturated"],
                [(r["level"], r["k"], r["lb"], r["ub"], int(r["saturated"])) for r in cal])
    _write_json(out / "summary.json", {"wald": wald(data), "first_stage": data.first_stage,
                                       "n": data.n, "n_instrument_on": data.n1,
                                       "status": curve.status, "k_alpha": cal})
    return EXIT_BUDGET if curve.status == "budget" else EXIT_OK


def cmd_survey(cfg: RunConfig) -> int:
    """Bounds on a finite-population mean from a sample."""
    sample = load_survey(cfg)
    out = _prepare_out(cfg)
    lo, hi = sample.bounds
    grid = _grid(cfg, hi - lo)
    rows = [(float(k), *_iv_row(survey_bounds(sample, k))) for k in grid]
    _write_rows(out / "survey_bounds.csv", ["k", "lb", "ub"], rows)
    cons = survey_bounds(sample, math.inf)
    _write_json(out / "summary.json", {"n": sample.n, "pop_size": sample.pop_size,
                                       "sample_mean": float(sample.y.mean()),
                                       "consensus": list(_iv_row(cons))})
    return EXIT_OK


def cmd_coverage(cfg: RunConfig) -> int:
    """Exact coverage of each method over the full design of a science table."""
    pop = load_population(cfg)
    out = _prepare_out(cfg)
    settings = DbsaSettings(solver=cfg.inner_solver,
                            ga=cfg.solver_config() if cfg.solver else DbsaSettings().ga)
    report = exact_coverage(pop, cfg.methods, cfg.alphas, settings=settings,
                            population_id=cfg.data, n_jobs=cfg.threads)
    report.to_csv(out / "coverage.csv")
    report.to_json(out / "coverage.json")
    panel = svg.Panel("nominal coverage", "exact coverage", ylim=(0.0, 1.0))
    alphas = sorted(cfg.alphas, reverse=True)
    lev = [1 - a for a in alphas]
    panel.add(lev, lev, "nominal")
    for m in cfg.methods:
        panel.add(lev, [report.coverage[m, float(a)] for a in alphas], m)
    (out / "coverage.svg").write_text(svg.render([panel]))
    return EXIT_OK


def cmd_export_milp(cfg: RunConfig) -> int:
    """Write the big-M program at each requested K (default: the breakdown point)."""
    data = load_observed(cfg)
    out = _prepare_out(cfg)
    batch = make_batch(_design(cfg, data.n, data.n1))
    problem = CompletionProblem.from_data(data, batch)
    ks = cfg.k_grid.values if cfg.k_grid.values is not None else [breakdown_point(data)]
    index = []
    for i, k in enumerate(ks):
        if not math.isfinite(k):
            raise ConfigError("cannot export a program at infinite K")
        name = f"milp_{i:03d}.lp"
        (out / name).write_text(export_milp(problem, float(k)))
        index.append({"file": name, "k": float(k)})
    _write_json(out / "milp_index.json", index)
    return EXIT_OK


_COMMANDS = {"ate": cmd_analyze, "iv": cmd_iv, "survey": cmd_survey,
             "coverage": cmd_coverage, "milp": cmd_export_milp}


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return _COMMANDS[cfg.mode](cfg)
    except FalsifiedError as exc:
        print(f"{cfg.mode}: {exc}", file=sys.stderr)
        return EXIT_FALSIFIED
    except (ConfigError, DataError, DesignError, ValueError, OSError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"{cfg.mode} [{module}]: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
