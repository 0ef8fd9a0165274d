"""Command-line interface: offline builds, online solves, studies, tables.

Four subcommands cover the pipeline: ``offline`` builds and stores a
reduced database, ``online`` solves at one parameter and reports errors
against a fresh fine reference, ``convergence`` sweeps coarse meshes
with a localization coupling rule and reports average convergence
orders, and ``richards`` runs the Newton driver for the nonlinear
problem.  Every command accepts the same flags plus an optional UTF-8
``key=value`` configuration file; explicit flags override file entries,
which override the built-in defaults.
"""

from __future__ import annotations

import math
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from .coeffs import get_problem
from .db import load_offline, save_offline, write_array
from .errors import InvalidArgumentError, NonconvergenceError, RBLODError
from .offline import build_offline_db
from .online import measure_errors, online_solve
from .richards import fine_newton_reference, newton_richards

__all__ = [
    "ExperimentConfig",
    "ErrorReport",
    "REPORT_COLUMNS",
    "average_eoc",
    "emit_tables",
    "read_config_file",
    "resolve_config",
    "coupled_k",
    "cmd_offline",
    "cmd_online",
    "cmd_convergence",
    "cmd_richards",
    "main",
]


# ----------------------------------------------------------------------
# configuration

# fine-grid target exponent: default fine levels refine the coarse mesh
# until h = 2^-exponent
_FINE_EXPONENT = {"mp1": 7, "mp2": 6}
_DEFAULT_TOL = {"mp1": 0.1, "mp2": 0.01}
_DEFAULT_MU = {"mp1": 2.012}

_CASTS = {
    "problem": str,
    "coarse_n": int,
    "fine_levels": int,
    "k": int,
    "tol": float,
    "seed": int,
    "train_size": int,
    "mu": float,
    "db": str,
    "out": str,
    "variant": str,
    "threads": int,
    "newton_tol": float,
    "max_iter": int,
    "h_exponents": lambda s: tuple(int(p) for p in s.split(",") if p.strip()),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings of one command invocation.

    ``explicit`` records which keys the user set (flag or file) as
    opposed to defaults; identity checks against a stored database only
    apply to explicit keys.
    """

    problem: str = "mp1"
    coarse_n: int = 8
    fine_levels: int = 4
    k: int = 2
    tol: float = 0.1
    seed: int = 0
    train_size: int = 100
    mu: float = 2.012
    db: str | None = None
    out: str | None = None
    variant: str = "full"
    threads: int = 1
    newton_tol: float = 1e-5
    max_iter: int = 25
    h_exponents: tuple = (2, 3, 4)
    explicit: frozenset = frozenset()


def read_config_file(path):
    """Parse a UTF-8 ``key=value`` configuration file into a dict."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidArgumentError(
                f"{path}:{lineno}: expected key=value, got {raw!r}"
            )
        key = key.strip().lower().replace("-", "_")
        if key not in _CASTS:
            raise InvalidArgumentError(
                f"{path}:{lineno}: unknown configuration key {key!r}"
            )
        try:
            values[key] = _CASTS[key](value.strip())
        except ValueError:
            raise InvalidArgumentError(
                f"{path}:{lineno}: cannot parse value for {key}: {value.strip()!r}"
            ) from None
    return values


def _default_mu(problem):
    if problem in _DEFAULT_MU:
        return _DEFAULT_MU[problem]
    lo, hi = get_problem(problem).parameter_range
    return 0.5 * (lo + hi)


def resolve_config(flags, config_path=None, problem_default="mp1"):
    """Merge flags over config-file entries over built-in defaults."""
    values = {}
    explicit = set()
    if config_path is not None:
        file_values = read_config_file(config_path)
        values.update(file_values)
        explicit.update(file_values)
    for key, val in flags.items():
        if val is not None:
            values[key] = _CASTS[key](val) if isinstance(val, str) else val
            explicit.add(key)

    problem = str(values.get("problem", problem_default))
    get_problem(problem)  # validates the name
    coarse_n = int(values.get("coarse_n", 8))
    if coarse_n < 2:
        raise InvalidArgumentError("coarse_n must be at least 2")
    fine_exp = _FINE_EXPONENT.get(problem, 7)
    default_levels = max(fine_exp - math.ceil(math.log2(coarse_n)), 1)
    cfg = ExperimentConfig(
        problem=problem,
        coarse_n=coarse_n,
        fine_levels=int(values.get("fine_levels", default_levels)),
        k=int(values.get("k", 2)),
        tol=float(values.get("tol", _DEFAULT_TOL.get(problem, 0.1))),
        seed=int(values.get("seed", 0)),
        train_size=int(values.get("train_size", 100)),
        mu=float(values.get("mu", _default_mu(problem))),
        db=values.get("db"),
        out=values.get("out"),
        variant=str(values.get("variant", "full")),
        threads=int(values.get("threads", 1)),
        newton_tol=float(values.get("newton_tol", 1e-5)),
        max_iter=int(values.get("max_iter", 25)),
        h_exponents=tuple(values.get("h_exponents", (2, 3, 4))),
        explicit=frozenset(explicit),
    )
    if cfg.fine_levels < 0:
        raise InvalidArgumentError("fine_levels must be nonnegative")
    if cfg.k < 0:
        raise InvalidArgumentError("k must be nonnegative")
    if cfg.tol <= 0:
        raise InvalidArgumentError("tol must be positive")
    if cfg.train_size < 1:
        raise InvalidArgumentError("train_size must be at least 1")
    if cfg.variant not in ("full", "precomputed"):
        raise InvalidArgumentError(f"unknown variant {cfg.variant!r}")
    if cfg.threads < 1:
        raise InvalidArgumentError("threads must be at least 1")
    if cfg.newton_tol <= 0:
        raise InvalidArgumentError("newton_tol must be positive")
    if cfg.max_iter < 1:
        raise InvalidArgumentError("max_iter must be at least 1")
    return cfg


# ----------------------------------------------------------------------
# reports and tables

REPORT_COLUMNS = (
    "H",
    "k",
    "coarse_l2",
    "l2",
    "h1",
    "t_off_local_avg",
    "t_on_local_avg",
    "t_on_global_avg",
)
_ERROR_COLUMNS = ("coarse_l2", "l2", "h1")


def average_eoc(errors):
    """Mean of log2 error ratios over successive mesh-halving rows.

    Returns ``None`` (the undefined marker) when any value is zero;
    identical nonzero errors give exactly 0.
    """
    errors = [float(e) for e in errors]
    if len(errors) < 2:
        raise InvalidArgumentError("EOC needs at least two rows")
    if any(e < 0 or not math.isfinite(e) for e in errors):
        raise InvalidArgumentError("EOC needs finite nonnegative errors")
    if any(e == 0.0 for e in errors):
        return None
    rates = [math.log2(a / b) for a, b in zip(errors[:-1], errors[1:])]
    return sum(rates) / len(rates)


@dataclass
class ErrorReport:
    """Rows of relative errors and timing averages per (H, k) run."""

    rows: list = field(default_factory=list)
    eoc: dict | None = None

    def add_row(self, **kwargs):
        row = {c: kwargs.get(c) for c in REPORT_COLUMNS}
        for c in _ERROR_COLUMNS:
            if row[c] is not None and not float(row[c]) >= 0.0:
                raise InvalidArgumentError(f"error column {c} must be nonnegative")
        self.rows.append(row)
        return row

    def compute_eoc(self):
        if len(self.rows) < 2:
            raise InvalidArgumentError("EOC needs at least two report rows")
        self.eoc = {
            c: average_eoc([row[c] for row in self.rows]) for c in _ERROR_COLUMNS
        }
        return self.eoc


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if not math.isfinite(v):
        return ""
    return f"{v:.5g}"


def emit_tables(report, fmt="markdown", path=None):
    """Render a report as CSV or markdown with 5 significant digits.

    The column order is fixed (H, k, the three relative errors, the
    three timing averages); an EOC row is appended when computed, with
    ``n/a`` marking undefined entries.  Returns the rendered text and
    optionally writes it to ``path``.
    """
    if fmt not in ("csv", "markdown"):
        raise InvalidArgumentError(f"unknown table format {fmt!r}")
    header = list(REPORT_COLUMNS)
    body = [[_fmt(row.get(c)) for c in header] for row in report.rows]
    if report.eoc is not None:
        eoc_row = ["EOC", ""]
        eoc_row += [
            "n/a" if report.eoc[c] is None else _fmt(report.eoc[c])
            for c in _ERROR_COLUMNS
        ]
        eoc_row += ["", "", ""]
        body.append(eoc_row)
    if fmt == "csv":
        lines = [",".join(header)] + [",".join(r) for r in body]
    else:
        lines = [
            "| " + " | ".join(header) + " |",
            "| " + " | ".join("---" for _ in header) + " |",
        ]
        lines += ["| " + " | ".join(r) + " |" for r in body]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _timing_averages(db):
    t = db.timings

    def ratio(total_key, count_key):
        count = t.get(count_key)
        if not count:
            return None
        return t[total_key] / count

    return {
        "t_off_local_avg": t.get("offline_local_avg"),
        "t_on_local_avg": ratio("online_local_seconds", "online_local_count"),
        "t_on_global_avg": ratio("online_global_seconds", "online_global_count"),
    }


# ----------------------------------------------------------------------
# commands

def _build_db(cfg, n_coarse=None, levels=None, k=None):
    return build_offline_db(
        cfg.problem,
        n_coarse if n_coarse is not None else cfg.coarse_n,
        levels if levels is not None else cfg.fine_levels,
        k if k is not None else cfg.k,
        tol=cfg.tol,
        seed=cfg.seed,
        train_size=cfg.train_size,
    )


def _load_or_build(cfg, echo):
    if cfg.db is not None:
        checks = {}
        if "problem" in cfg.explicit:
            checks["problem"] = cfg.problem
        if "coarse_n" in cfg.explicit:
            checks["n_coarse"] = cfg.coarse_n
        if "fine_levels" in cfg.explicit:
            checks["levels"] = cfg.fine_levels
        if "k" in cfg.explicit:
            checks["k"] = cfg.k
        db = load_offline(cfg.db, **checks)
        echo(
            f"loaded database {cfg.db}: problem={db.problem} "
            f"n_coarse={db.n_coarse} levels={db.levels} k={db.k}"
        )
    else:
        echo("no --db given; building the offline database first")
        db = _build_db(cfg)
    return db


def cmd_offline(cfg, echo=click.echo):
    """Build the offline database, store it, and print greedy summaries."""
    if cfg.out is None:
        raise InvalidArgumentError(
            "the offline command needs --out (database directory)"
        )
    out = Path(cfg.out)
    existed = out.exists()
    try:
        db = _build_db(cfg)
        save_offline(db, out)
    except BaseException:
        # never leave a half-written database behind
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        raise
    echo(f"offline database written to {out}")
    echo(
        f"problem={db.problem} n_coarse={db.n_coarse} levels={db.levels} "
        f"k={db.k} tol={db.tol:g} seed={db.seed} train_size={db.train_size}"
    )
    dims = db.dims
    echo(
        f"local dimensions over {dims.size} nodes: min={int(dims.min())} "
        f"max={int(dims.max())} mean={dims.mean():.2f}"
    )
    echo("greedy history per node (added parameter -> max estimated error):")
    for z in db.node_ids:
        space = db.space(z)
        steps = ", ".join(f"{mu:.6g} -> {est:.4e}" for mu, est in space.history)
        echo(
            f"  node {int(z)}: dim {space.dim}, "
            f"final estimate {space.final_estimate:.4e}, {steps}"
        )
    total = db.timings.get("offline_total_seconds")
    local_avg = db.timings.get("offline_local_avg")
    if total is not None and local_avg is not None:
        echo(
            f"offline total {total:.2f} s, "
            f"local average per coarse element {local_avg:.4f} s"
        )
    return db


def cmd_online(cfg, echo=click.echo):
    """Solve at one parameter and report errors against a fine reference."""
    db = _load_or_build(cfg, echo)
    mu = cfg.mu if "mu" in cfg.explicit else _default_mu(db.problem)
    solution = online_solve(db, mu)
    errors = measure_errors(db, solution)
    report = ErrorReport()
    report.add_row(
        H=1.0 / db.n_coarse,
        k=db.k,
        coarse_l2=errors["coarse_l2"],
        l2=errors["l2"],
        h1=errors["h1"],
        **_timing_averages(db),
    )
    echo(f"online parameter {mu:g}")
    echo(emit_tables(report, "markdown").rstrip())
    if cfg.out is not None:
        outdir = Path(cfg.out)
        outdir.mkdir(parents=True, exist_ok=True)
        emit_tables(report, "csv", outdir / "report.csv")
        emit_tables(report, "markdown", outdir / "report.md")
        write_array(outdir / "solution_coarse.arr", solution.coarse)
        write_array(outdir / "solution_fine.arr", solution.fine_vector())
        write_array(outdir / "reference_fine.arr", errors["reference"])
        echo(f"report and solution arrays written to {outdir}")
    return report, solution


def coupled_k(problem, exponent):
    """Localization width coupled to H = 2^-exponent, per problem.

    Reproduces the printed coupled-study rows: (2, 3, 4) for the linear
    benchmark at H = 2^-2..2^-4 and (1, 2, 3) for the nonlinear one.
    """
    if int(exponent) < 1:
        raise InvalidArgumentError("coupled k needs H = 2^-i with i >= 1")
    if problem == "mp2":
        return max(int(exponent) - 1, 0)
    return int(exponent)


def _is_nonlinear(cfg):
    return get_problem(cfg.problem).theta_prime(-1.0) is not None


def _convergence_row(cfg, n, k, levels):
    db = _build_db(cfg, n_coarse=n, levels=levels, k=k)
    ws = db.workspace
    if _is_nonlinear(cfg):
        solution, _ = newton_richards(
            db,
            newton_tol=cfg.newton_tol,
            max_iter=cfg.max_iter,
            variant=cfg.variant,
        )
        reference, _ = fine_newton_reference(
            ws.hier.fine, ws.coeff, newton_tol=cfg.newton_tol, max_iter=cfg.max_iter
        )
        errors = measure_errors(db, solution, reference=reference)
    else:
        mu = cfg.mu if "mu" in cfg.explicit else _default_mu(cfg.problem)
        solution = online_solve(db, mu)
        errors = measure_errors(db, solution)
    return {
        "H": 1.0 / n,
        "k": k,
        "coarse_l2": errors["coarse_l2"],
        "l2": errors["l2"],
        "h1": errors["h1"],
        **_timing_averages(db),
    }


def cmd_convergence(cfg, echo=click.echo):
    """Sweep coupled (H, k) rows and report errors with average EOCs."""
    exponents = tuple(int(i) for i in cfg.h_exponents)
    if len(exponents) < 2:
        raise InvalidArgumentError("a convergence study needs at least two H values")
    fine_exp = _FINE_EXPONENT.get(cfg.problem, 7)
    jobs = []
    for i in exponents:
        n = 2**i
        k = cfg.k if "k" in cfg.explicit else coupled_k(cfg.problem, i)
        levels = (
            cfg.fine_levels if "fine_levels" in cfg.explicit else max(fine_exp - i, 1)
        )
        jobs.append((n, k, levels))
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            rows = list(pool.map(lambda j: _convergence_row(cfg, *j), jobs))
    else:
        rows = [_convergence_row(cfg, *job) for job in jobs]
    report = ErrorReport()
    for row in rows:
        report.add_row(**row)
    report.compute_eoc()
    echo(emit_tables(report, "markdown").rstrip())
    if cfg.out is not None:
        outdir = Path(cfg.out)
        outdir.mkdir(parents=True, exist_ok=True)
        emit_tables(report, "csv", outdir / "report.csv")
        emit_tables(report, "markdown", outdir / "report.md")
        echo(f"report written to {outdir}")
    return report


def cmd_richards(cfg, echo=click.echo):
    """Newton-solve the nonlinear problem; report errors, trace, variants."""
    db = _load_or_build(cfg, echo)
    solution, trace = newton_richards(
        db, newton_tol=cfg.newton_tol, max_iter=cfg.max_iter, variant=cfg.variant
    )
    echo(f"Newton ({cfg.variant}) converged in {len(trace)} iterations:")
    echo("| iteration | rel_update | residual_norm | clamped |")
    echo("| --- | --- | --- | --- |")
    for row in trace:
        echo(
            f"| {row['iteration']} | {row['rel_update']:.5g} "
            f"| {row['residual_norm']:.5g} | {row['clamped']} |"
        )
    other = "precomputed" if cfg.variant == "full" else "full"
    try:
        other_solution, _ = newton_richards(
            db, newton_tol=cfg.newton_tol, max_iter=cfg.max_iter, variant=other
        )
        denom = float(np.linalg.norm(solution.coarse))
        diff = float(np.linalg.norm(solution.coarse - other_solution.coarse))
        variant_diff = diff / (denom if denom > 0.0 else 1.0)
        echo(
            f"variant comparison ({cfg.variant} vs {other}): "
            f"relative coefficient difference {variant_diff:.4e}"
        )
    except NonconvergenceError as exc:
        variant_diff = None
        echo(f"variant comparison skipped: {other} variant failed ({exc})")
    ws = db.workspace
    reference, ref_trace = fine_newton_reference(
        ws.hier.fine, ws.coeff, newton_tol=cfg.newton_tol, max_iter=cfg.max_iter
    )
    echo(f"fine reference converged in {len(ref_trace)} iterations")
    errors = measure_errors(db, solution, reference=reference)
    report = ErrorReport()
    report.add_row(
        H=1.0 / db.n_coarse,
        k=db.k,
        coarse_l2=errors["coarse_l2"],
        l2=errors["l2"],
        h1=errors["h1"],
        **_timing_averages(db),
    )
    echo(emit_tables(report, "markdown").rstrip())
    if cfg.out is not None:
        outdir = Path(cfg.out)
        outdir.mkdir(parents=True, exist_ok=True)
        emit_tables(report, "csv", outdir / "report.csv")
        emit_tables(report, "markdown", outdir / "report.md")
        trace_lines = ["iteration,rel_update,residual_norm,clamped"]
        trace_lines += [
            f"{row['iteration']},{row['rel_update']:.5g},"
            f"{row['residual_norm']:.5g},{row['clamped']}"
            for row in trace
        ]
        (outdir / "trace.csv").write_text("\n".join(trace_lines) + "\n", "utf-8")
        write_array(outdir / "solution_coarse.arr", solution.coarse)
        write_array(outdir / "solution_fine.arr", solution.fine_vector())
        write_array(outdir / "reference_fine.arr", reference)
        echo(f"report, trace, and solution arrays written to {outdir}")
    return report, solution, trace, variant_diff


# ----------------------------------------------------------------------
# click wiring

def _common_options(fn):
    options = [
        click.option("--problem", default=None, help="Problem name (mp1 or mp2)."),
        click.option("--coarse-n", default=None, type=int, help="Coarse cells per side; H = 1/coarse_n."),
        click.option("--fine-levels", default=None, type=int, help="Uniform refinements from coarse to fine grid."),
        click.option("--k", default=None, type=int, help="Localization width in coarse layers."),
        click.option("--tol", default=None, type=float, help="Greedy tolerance for the local reduced bases."),
        click.option("--seed", default=None, type=int, help="Training-set random seed."),
        click.option("--train-size", default=None, type=int, help="Number of training parameters."),
        click.option("--mu", default=None, type=float, help="Online parameter value."),
        click.option("--db", default=None, type=click.Path(), help="Stored offline database directory."),
        click.option("--out", default=None, type=click.Path(), help="Output directory."),
        click.option("--variant", default=None, type=click.Choice(["full", "precomputed"]), help="Newton system assembly variant."),
        click.option("--threads", default=None, type=int, help="Worker bound for independent study rows."),
        click.option("--newton-tol", default=None, type=float, help="Newton relative-update stopping tolerance."),
        click.option("--max-iter", default=None, type=int, help="Newton iteration cap."),
        click.option("--config", default=None, type=click.Path(), help="UTF-8 key=value configuration file; flags override it."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _dispatch(handler, flags, problem_default):
    config_path = flags.pop("config", None)
    try:
        cfg = resolve_config(flags, config_path, problem_default=problem_default)
        return handler(cfg, echo=click.echo)
    except RBLODError as exc:
        raise click.ClickException(str(exc)) from exc


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Reduced multiscale solver for parametrized coefficient problems."""


@main.command("offline")
@_common_options
def _offline(**flags):
    """Build and store the offline database; print greedy summaries."""
    _dispatch(cmd_offline, flags, "mp1")


@main.command("online")
@_common_options
def _online(**flags):
    """Solve at one parameter; report errors against a fine reference."""
    _dispatch(cmd_online, flags, "mp1")


@main.command("convergence")
@_common_options
def _convergence(**flags):
    """Run a coupled (H, k) sweep and report average convergence orders."""
    _dispatch(cmd_convergence, flags, "mp1")


@main.command("richards")
@_common_options
def _richards(**flags):
    """Newton-solve the nonlinear pressure problem and report errors."""
    _dispatch(cmd_richards, flags, "mp2")


if __name__ == "__main__":
    main()
