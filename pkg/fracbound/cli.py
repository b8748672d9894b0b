#!/usr/bin/env python
import argparse
import csv
import json
import logging
import platform
import sys
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
import scipy

from . import __version__
from .hkernel import (
    HEvaluator,
    Route,
    eigen_residual,
    h_dt_bound_check,
)
from .mixing import admissibility
from .parsing import (
    COMMANDS,
    ParsingError,
    RunConfig,
    UnknownCommandError,
    load_config,
)
from .solver_mc import check_commutation, ctrw_check, estimate_many
from .solver_spectral import (
    SpectralSolution,
    boundary_check,
    choose_truncation,
    classical_hypothesis,
    decay_check,
    initial_datum_check,
    solve,
    time_derivative_bound,
    verify_residual,
)
from .solver_spectral import field as solution_field
from .subordinate import (
    SubordinatorSpec,
    estimate_g,
    g_density,
    inverse_relation_check,
    laplace_table,
    sample_paths,
)
from .tools import (
    CheckReport,
    FracboundError,
    MonteCarloAgreement,
    Severity,
    print_reports,
)
from .workers import (
    STREAM_PATH,
    STREAM_SUBORDINATOR,
    RandomStreams,
    WorkerPool,
)

logger = logging.getLogger("fracbound")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2
RESIDUAL_LAMBDAS = (1.0, 5.0, 25.0)
BOUND_TIMES = (0.1, 0.25, 0.5, 1.0, 2.0)

USAGE = """Numerical laboratory for distributed-order fractional Cauchy
problems on bounded boxes

commands:
  solve-spectral       u(t, x) from the truncated eigenfunction expansion
  solve-mc             u(t, x) by Monte Carlo on the time-changed motion
  eval-h               tabulate h(t, lambda)
  sample-subordinator  subordinator Laplace transforms, E_t densities
  verify               residual, bound, route and Monte Carlo checks
  verify-commutation   killing and time change commutation rates
  ctrw                 continuous time random walk against Monte Carlo"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="fracbound",
        description=USAGE,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", metavar="command")
    parser.add_argument("--config", type=Path, required=True)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--verbose", action="store_true")
    return parser


class CommandLogHandler(logging.StreamHandler):  # type: ignore[type-arg]
    """
    The stderr handler installed by a command run, replaced by the next one
    """

    def __init__(self) -> None:
        super().__init__(sys.stderr)
        self.setFormatter(
            logging.Formatter("%(levelname)s %(name)s: %(message)s")
        )


def _configure_logging(verbose: bool) -> None:
    for handler in list(logger.handlers):
        if isinstance(handler, CommandLogHandler):
            logger.removeHandler(handler)
    logger.addHandler(CommandLogHandler())
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def _format(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(
    path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]
) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(x) for x in row])


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else repr(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, Path):
        return str(value)
    return value


@dataclass
class RunResult:
    """
    What a command produced: its CSV table, extra tables, checks and
    scalar metrics
    """

    header: list[str]
    rows: list[list[Any]]
    checks: list[CheckReport] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)
    extra_tables: dict[str, tuple[list[str], list[list[Any]]]] = field(
        default_factory=dict
    )

    def verification_failed(self) -> bool:
        return any(
            x.failed() and x.severity == Severity.ERROR for x in self.checks
        )


@dataclass
class Context:
    config: RunConfig
    pool: WorkerPool

    @property
    def streams(self) -> RandomStreams:
        assert self.config.seed is not None
        return RandomStreams(self.config.seed)

    def spec(self) -> SubordinatorSpec:
        assert self.config.measure is not None
        return SubordinatorSpec.from_measure(
            self.config.measure, self.config.levels
        )

    def positive_times(self) -> list[float]:
        return [t for t in self.config.times if t > 0]


def _point_columns(ctx: Context) -> list[str]:
    assert ctx.config.domain is not None
    return [f"x{i + 1}" for i in range(ctx.config.domain.dims)]


def _solution(ctx: Context) -> tuple[SpectralSolution, list[CheckReport]]:
    config = ctx.config
    assert config.domain and config.datum and config.measure
    checks: list[CheckReport] = []
    if config.truncation is not None:
        count = config.truncation
    else:
        assert config.target_tail is not None
        choice = choose_truncation(
            config.domain, config.datum, config.target_tail
        )
        count = choice.count
        if choice.warning is not None:
            checks.append(choice.warning)
        logger.info(
            f"Truncation N={count}, estimated tail {choice.tail:.3e}"
        )
    sol = solve(
        config.domain,
        config.datum,
        config.measure,
        count,
        config.tolerances,
        config.route,
    )
    probe = sol.get_evaluator().get_probe_report()
    if probe is not None:
        checks.append(probe)
    return sol, checks


def run_solve_spectral(ctx: Context) -> RunResult:
    sol, checks = _solution(ctx)
    result = solution_field(sol, ctx.config.times, ctx.config.points)
    checks.append(classical_hypothesis(sol))
    checks.append(boundary_check(sol, ctx.positive_times()))
    return RunResult(
        result.header(),
        result.rows(),
        checks,
        {
            "modes": sol.count,
            "tail_bound": sol.get_tail_bound(),
            "tail_kind": str(sol.get_tail_kind()),
            "route": str(sol.get_evaluator().get_route()),
            "max_error": float(np.max(result.errors, initial=0.0)),
        },
    )


def run_solve_mc(ctx: Context) -> RunResult:
    config = ctx.config
    assert config.domain and config.datum
    spec = ctx.spec()
    times = ctx.positive_times()
    rows = []
    for point in config.points:
        initial = float(config.datum.evaluate(config.domain, [point])[0])
        estimates: dict[float, tuple[float, float, int]] = {}
        if times and config.domain.contains([point])[0]:
            for x in estimate_many(
                config.domain,
                config.datum,
                spec,
                times,
                point,
                config.paths,
                ctx.streams,
                config.dtau,
                config.sub_step,
                config.bridge,
                ctx.pool,
            ):
                estimates[x.t] = (x.mean, x.se, x.paths)
        elif times:
            # Killed at once on the boundary
            estimates = {t: (0.0, 0.0, 0) for t in times}
        for t in config.times:
            mean, se, paths = estimates.get(t, (initial, 0.0, 0))
            rows.append([t, *point, mean, se, paths])
    return RunResult(
        ["t", *_point_columns(ctx), "mean", "se", "paths"],
        rows,
        metrics={
            "paths": config.paths,
            "dtau": config.dtau,
            "sub_step": config.sub_step,
            "bridge": config.bridge,
            "subordinator": spec.to_dict(),
        },
    )


def run_eval_h(ctx: Context) -> RunResult:
    config = ctx.config
    assert config.measure is not None
    value, report = admissibility(config.measure, config.tolerances)
    evaluator = HEvaluator(config.measure, config.route, config.tolerances)
    checks: list[CheckReport] = [report]
    probe = evaluator.get_probe_report()
    if probe is not None:
        checks.append(probe)
    table = evaluator.table(config.times, config.lambdas)
    rows = [
        [t, lam, x.value, str(x.route), x.error]
        for lam, row in zip(config.lambdas, table)
        for t, x in zip(config.times, row)
    ]
    return RunResult(
        ["t", "lambda", "h", "route", "est_error"],
        rows,
        checks,
        {
            "route": str(evaluator.get_route()),
            "fallbacks": evaluator.get_fallbacks(),
            "admissibility": value,
        },
    )


def run_sample_subordinator(ctx: Context) -> RunResult:
    config = ctx.config
    spec = ctx.spec()
    streams = ctx.streams
    rows = laplace_table(
        spec,
        config.s_values,
        config.horizon,
        config.paths,
        streams.generator(STREAM_SUBORDINATOR, 0),
    )
    checks: list[CheckReport] = [
        MonteCarloAgreement.from_bound(
            abs(x.mean - x.exact), 3 * x.se, {"s": x.s, "se": x.se}
        )
        for x in rows
    ]
    for index, (t, x) in enumerate(config.relation):
        checks.append(
            inverse_relation_check(
                spec,
                t,
                x,
                config.paths,
                config.sub_step,
                streams.generator(STREAM_SUBORDINATOR, index + 1),
            )
        )
    density_rows = []
    masses = {}
    for index, t in enumerate(ctx.positive_times()):
        estimate = estimate_g(
            spec,
            t,
            config.paths,
            streams.generator(STREAM_PATH, index + 1),
            config.sub_step,
        )
        masses[repr(t)] = estimate.mass()
        exact = (
            g_density(spec, t, estimate.centers)
            if spec.is_single
            else np.full(estimate.centers.shape, np.nan)
        )
        density_rows.extend(
            [t, float(c), float(d), float(e)]
            for c, d, e in zip(estimate.centers, estimate.density, exact)
        )
    extra: dict[str, tuple[list[str], list[list[Any]]]] = {
        "density": (["t", "x", "density", "exact"], density_rows)
    }
    if config.write_paths:
        values = sample_paths(
            spec,
            config.horizon,
            config.sub_step,
            config.write_paths,
            streams.generator(STREAM_PATH, 0),
        )
        grid = config.sub_step * np.arange(values.shape[1])
        extra["paths"] = (
            ["tau", *[f"w{i + 1}" for i in range(values.shape[0])]],
            [[g, *column] for g, column in zip(grid, values.T.tolist())],
        )
    return RunResult(
        ["s", "mean", "se", "exact", "z"],
        [[x.s, x.mean, x.se, x.exact, x.z] for x in rows],
        checks,
        {"subordinator": spec.to_dict(), "density_mass": masses},
        extra,
    )


def _bound_checks(ctx: Context, evaluator: HEvaluator) -> list[CheckReport]:
    config = ctx.config
    checks: list[CheckReport] = []
    for lam in RESIDUAL_LAMBDAS:
        checks.append(
            eigen_residual(
                evaluator,
                lam,
                config.residual.t_end,
                config.residual.steps,
                config.residual.t_min,
                config.residual.tolerance,
                config.residual.grading,
            )
        )
    for t in BOUND_TIMES:
        for lam in config.lambdas:
            checks.append(h_dt_bound_check(evaluator, t, lam))
    return checks


def run_verify(ctx: Context) -> RunResult:
    config = ctx.config
    assert config.domain and config.datum and config.measure
    value, report = admissibility(config.measure, config.tolerances)
    checks: list[CheckReport] = [report]
    sol, solution_checks = _solution(ctx)
    checks.extend(solution_checks)
    evaluator = sol.get_evaluator()
    if evaluator.get_probe_report() is None:
        probe = HEvaluator(
            config.measure, Route.AUTO, config.tolerances
        ).get_probe_report()
        if probe is not None:
            checks.append(probe)
    checks.extend(_bound_checks(ctx, evaluator))
    times = ctx.positive_times()
    checks.append(
        verify_residual(
            sol,
            config.residual.t_end,
            config.residual.steps,
            config.residual.t_min,
            config.points,
            config.residual.tolerance,
            config.residual.grading,
        )
    )
    checks.append(decay_check(sol, times))
    checks.append(initial_datum_check(sol))
    checks.append(boundary_check(sol, times))
    checks.append(classical_hypothesis(sol))
    point = config.points[0]
    checks.extend(time_derivative_bound(sol, t, [point]) for t in times)
    estimates = estimate_many(
        config.domain,
        config.datum,
        ctx.spec(),
        times,
        point,
        config.paths,
        ctx.streams,
        config.dtau,
        config.sub_step,
        config.bridge,
        ctx.pool,
    )
    for estimate in estimates:
        reference = sol(estimate.t, [point])
        checks.append(
            MonteCarloAgreement.from_bound(
                abs(estimate.mean - reference),
                3 * estimate.se + config.allowance,
                {"t": estimate.t, "mc": estimate.mean, "spectral": reference},
            )
        )
    rows = [
        [
            x.err_code,
            x.name,
            str(x.status),
            x.values.get("lhs", float("nan")),
            x.values.get("rhs", float("nan")),
        ]
        for x in checks
    ]
    return RunResult(
        ["code", "name", "status", "lhs", "rhs"],
        rows,
        checks,
        {
            "modes": sol.count,
            "tail_bound": sol.get_tail_bound(),
            "route": str(evaluator.get_route()),
            "admissibility": value,
        },
    )


def run_verify_commutation(ctx: Context) -> RunResult:
    config = ctx.config
    assert config.domain is not None
    spec = ctx.spec()
    t = max(ctx.positive_times(), default=1.0)
    checks: list[CheckReport] = []
    rows = []
    for point in config.points:
        report = check_commutation(
            config.domain,
            spec,
            t,
            point,
            config.paths,
            ctx.streams,
            config.sub_step,
            config.commutation_levels,
            pool=ctx.pool,
        )
        checks.append(report)
        for level in sorted(set(config.commutation_levels)):
            rows.append([t, *point, level, report.values[f"rate_{level}"]])
    return RunResult(
        ["t", *_point_columns(ctx), "level", "rate"],
        rows,
        checks,
        {"paths": config.paths, "step": config.sub_step},
    )


def run_ctrw(ctx: Context) -> RunResult:
    config = ctx.config
    assert config.domain and config.datum and config.measure
    measure = config.measure
    if measure.has_density:
        measure = ctx.spec().measure()
        logger.info(
            f"Quantised the density into {len(measure.atoms)} atoms for "
            "the random walk"
        )
    t = max(ctx.positive_times(), default=1.0)
    point = config.points[0]
    checks: list[CheckReport] = []
    rows = []
    for scale in config.scales:
        report = ctrw_check(
            config.domain,
            config.datum,
            measure,
            t,
            point,
            config.walkers,
            scale,
            ctx.streams,
            config.paths,
            config.dtau,
            ctx.pool,
        )
        checks.append(report)
        values = report.values
        rows.append(
            [
                scale,
                values["ctrw_mean"],
                values["ctrw_se"],
                values["mc_mean"],
                values["mc_se"],
                values["lhs"],
            ]
        )
    return RunResult(
        ["scale", "ctrw_mean", "ctrw_se", "mc_mean", "mc_se", "abs_z"],
        rows,
        checks,
        {"t": t, "x": list(point), "walkers": config.walkers},
    )


RUNNERS: dict[str, Callable[[Context], RunResult]] = {
    "solve-spectral": run_solve_spectral,
    "solve-mc": run_solve_mc,
    "eval-h": run_eval_h,
    "sample-subordinator": run_sample_subordinator,
    "verify": run_verify,
    "verify-commutation": run_verify_commutation,
    "ctrw": run_ctrw,
}


def versions() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "fracbound": __version__,
    }


def write_outputs(
    config: RunConfig, result: RunResult, wall_time: float
) -> Path:
    out = config.out
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / f"{config.command}.csv", result.header, result.rows)
    for name, (header, rows) in result.extra_tables.items():
        write_table(out / f"{name}.csv", header, rows)
    diagnostics = {
        "command": config.command,
        "config": config.to_dict(),
        "versions": versions(),
        "seed": config.seed,
        "wall_time": wall_time,
        "checks": [x.to_dict() for x in result.checks],
        "metrics": result.metrics,
    }
    path = out / f"{config.command}.json"
    with open(path, "w") as f:
        json.dump(_jsonable(diagnostics), f, indent=2)
    return path


def execute(config: RunConfig) -> RunResult:
    with WorkerPool(config.threads) as pool:
        return RUNNERS[config.command](Context(config, pool))


def run(argv: Sequence[str] | None = None) -> int:
    args_list = list(sys.argv[1:] if argv is None else argv)
    if not args_list or args_list[0] in ("-h", "--help", "help"):
        print(USAGE)
        print(
            "\nusage: fracbound <command> --config <file> [--out <dir>] "
            "[--seed <u64>] [--threads <n>] [--verbose]"
        )
        return EXIT_OK if args_list else EXIT_USAGE
    try:
        args = _build_parser().parse_args(args_list)
    except UsageError as e:
        print(f"fracbound: {e}", file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args.verbose)
    try:
        if args.command not in COMMANDS:
            raise UnknownCommandError(args.config, args.command)
        config = load_config(
            args.config,
            {
                "out": None if args.out is None else str(args.out),
                "seed": args.seed,
                "threads": args.threads,
            },
            args.command,
        )
        start = time.perf_counter()
        result = execute(config)
        wall_time = time.perf_counter() - start
        path = write_outputs(config, result, wall_time)
    except ParsingError as e:
        print(f"fracbound: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"fracbound: I/O error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FracboundError as e:
        print(f"fracbound: {e}", file=sys.stderr)
        return EXIT_USAGE
    if result.checks:
        print_reports(config.command, result.checks)
    logger.info(f"Wrote {path} in {wall_time:.2f}s")
    if result.verification_failed():
        return EXIT_VERIFICATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
