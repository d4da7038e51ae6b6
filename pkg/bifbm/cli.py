from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from dotenv import load_dotenv

from bifbm import __version__
from bifbm.analysis import (
    StepFunction,
    absolute_continuity_check,
    holder_check,
    l1_bound_sweep,
    origin_growth_probe,
    random_step_function,
    step_norm_identity_residual,
    strong_variation_check,
    variation_limit_check,
    x_variation_vanishes,
)
from bifbm.config import COMMANDS, PROCESSES, Config
from bifbm.covariance import (
    BifbmKernel,
    BifbmParams,
    FbmKernel,
    XKKernel,
    bifbm_cov,
    constants,
    decomposition_residual,
    fbm_cov,
    gram_min_eigenvalue,
    quasi_helix_violation,
    self_similarity_error,
    validate_gamma,
    xk_derivative_variance,
    xk_derivative_variance_quad,
    xk_mixed_partial,
    xk_mixed_partial_fd,
)
from bifbm.decomposition import verify_law_equality
from bifbm.ensemble import STREAM_PRIMARY, STREAM_STEP_FUNCTIONS, EnsembleRunner, replicate_seed, replicate_seeds, rng
from bifbm.errors import ConfigError, GridError, NonPSDKernelError, ParameterDomainError, QuadratureSchemeError
from bifbm.heat import HeatSimulator, bifbm_proportionality, heat_ratio_constancy, refinement_check
from bifbm.logging_utils import configure_logging, log_event
from bifbm.paths import Grid
from bifbm.paths import Path as SamplePath
from bifbm.reports import (
    CheckReport,
    RunMetadata,
    report_params,
    write_combined_report,
    write_ensemble_csv,
    write_metadata,
    write_json,
    write_path_csv,
    write_sweep_csv,
)
from bifbm.samplers import (
    CholeskySampler,
    CirculantFbmSampler,
    XKQuadratureSampler,
    derivative_variance_check,
    fubini_check,
    quadrature_fidelity_check,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3

SELF_SIMILARITY_SCALES = (0.1, 2.0, 7.3)
SWEEP_VALUES = tuple(round(0.1 * i, 1) for i in range(1, 10))
STRONG_HORIZON_FACTOR = 2.0
STRONG_EPS = 2.0**-10
HEAT_MAX_PROBES = 64


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bifbm",
        description="Simulate bifractional Brownian motion and verify its decomposition numerically",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--H", type=float, help="Hurst-type parameter in (0, 1)")
    common.add_argument("--K", type=float, help="second parameter in (0, 1]")
    common.add_argument("--T", type=float, help="time horizon")
    common.add_argument("--n", type=int, help="number of grid steps")
    common.add_argument("--n-rep", dest="n_rep", type=int, help="number of replicates")
    common.add_argument("--seed", dest="master_seed", type=int, help="master seed (64-bit unsigned)")
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), help="data format for simulate")
    common.add_argument("--config", default=None, help="TOML or key=value config file")
    common.add_argument("--workers", type=int, help="worker threads for replicate generation")
    common.add_argument("--x-method", dest="x_method", choices=("quadrature", "cholesky"), help="X^K sampler")
    common.add_argument("--verbose", action="store_true", help="log at DEBUG level")

    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name, parents=[common], help=_HELP[name])
        if name == "simulate":
            sub.add_argument("--process", choices=PROCESSES, help="process to sample")
    return parser


_HELP = {
    "simulate": "sample paths of bifbm, fbm, X^K or the heat equation and write them",
    "cov-check": "deterministic kernel identities: decomposition, quasi-helix, self-similarity",
    "verify-decomposition": "Monte Carlo law comparison of C1 X^{H,K} + B^{H,K} with C2 B^{HK}",
    "variation": "1/(HK)-variation and strong variation limits, X-part vanishing",
    "heat": "stochastic heat equation covariance and proportionality to bifBm(1/2, 1/2)",
    "step-norms": "step-function quadratic forms and the L1-weight bound",
    "full-suite": "every acceptance check in dependency order, one combined report",
}


def load_config(args: argparse.Namespace) -> Config:
    config = Config.load(Path(args.config) if args.config else None)
    config.apply_overrides(
        {
            "command": args.command,
            "process": getattr(args, "process", None),
            "H": args.H,
            "K": args.K,
            "T": args.T,
            "n": args.n,
            "n_rep": args.n_rep,
            "master_seed": args.master_seed,
            "out_dir": args.out_dir,
            "format": args.format,
            "workers": args.workers,
            "x_method": args.x_method,
        }
    )
    config.normalize()
    config.validate()
    return config


class Runner:
    def __init__(self, config: Config) -> None:
        self.config = config
        self.run = config.run
        self.settings = config.sampler.settings()
        self.ensembles = EnsembleRunner(self.run.workers, config.sampler.block_size)
        self.reports: list[CheckReport] = []

    @property
    def out_dir(self) -> Path:
        return self.run.out_dir

    def metadata(self, n_rep: int | None = None) -> RunMetadata:
        run = self.run
        return RunMetadata(run.H, run.K, run.T, run.n, run.n_rep if n_rep is None else n_rep, run.master_seed)

    def record(self, report: CheckReport) -> CheckReport:
        self.reports.append(report)
        print(report.summary_line())
        return report

    def finish(self, name: str) -> int:
        write_combined_report(self.reports, self.out_dir / f"{name}.json", self.metadata(), suite=name)
        return EXIT_OK if all(r.passed for r in self.reports) else EXIT_CHECK_FAILED

    def simulate(self) -> int:
        run = self.run
        grid = Grid.uniform(run.T, run.n)
        sampler = self._sampler(grid)
        seeds = replicate_seeds(run.master_seed, run.n_rep, STREAM_PRIMARY)
        values = self.ensembles.run(sampler.draw, seeds, label=run.process)
        stem = self.out_dir / f"{run.process}"
        if run.format == "json":
            artifact = stem.with_suffix(".json")
            payload = {
                "metadata": self.metadata().to_dict(),
                "process": run.process,
                "provenance": sampler.provenance,
                "t": grid.points.tolist(),
                "values": values.tolist(),
            }
            write_json(payload, artifact)
            write_metadata(artifact, self.metadata())
        elif run.n_rep == 1:
            path = SamplePath(grid, values[0], run.process, seeds[0], sampler.provenance)
            artifact = write_path_csv(path, stem.with_suffix(".csv"), self.metadata())
        else:
            artifact = write_ensemble_csv(grid.points, values, stem.with_suffix(".csv"), self.metadata())
        print(f"WROTE {artifact}")
        log_event("cli", "simulate", result="ok", process=run.process, artifact=artifact)
        return EXIT_OK

    def _sampler(self, grid: Grid) -> CholeskySampler | CirculantFbmSampler | XKQuadratureSampler | HeatSimulator:
        run, settings = self.run, self.settings
        if run.process == "bifbm":
            return settings.cholesky(BifbmKernel(run.params), grid)
        if run.process == "fbm":
            return settings.circulant(run.n, run.T, run.H)
        if run.process == "xk":
            if run.x_method == "cholesky":
                return settings.cholesky(XKKernel(run.K), grid)
            return settings.xk(grid, run.K)
        return HeatSimulator(grid, self.config.heat.x0, self.config.heat.space_time_grid(run.T))

    def cov_check(self) -> int:
        for report in covariance_reports(self.run.params, self.run.T):
            self.record(report)
        return self.finish("cov-check")

    def verify_decomposition(self) -> int:
        run = self.run
        p = run.params
        grid = Grid.uniform(run.T, run.n)
        self.record(
            verify_law_equality(run.n_rep, grid, p, run.master_seed, self.ensembles, x_method=run.x_method, settings=self.settings)
        )
        if not p.is_fbm:
            control = verify_law_equality(
                run.n_rep,
                grid,
                p,
                run.master_seed,
                self.ensembles,
                reference_scale=1.0,
                x_method=run.x_method,
                settings=self.settings,
            )
            self.record(_negative_control(control))
        return self.finish("verify-decomposition")

    def variation(self) -> int:
        run = self.run
        p = run.params
        self.record(
            variation_limit_check(p, run.n, run.n_rep, run.master_seed, t=run.T, settings=self.settings, runner=self.ensembles)
        )
        horizon = STRONG_HORIZON_FACTOR * run.T
        step = horizon / run.n
        eps = step * max(1, round(STRONG_EPS * run.T / step))
        self.record(
            strong_variation_check(
                p,
                run.n,
                run.n_rep,
                run.master_seed,
                eps=eps,
                t=run.T,
                horizon=horizon,
                settings=self.settings,
                runner=self.ensembles,
            )
        )
        if not p.is_fbm:
            sweep = sorted({run.n // d for d in (64, 16, 4, 1) if run.n % d == 0})
            report = self.record(
                x_variation_vanishes(
                    p.K, p.H, sweep, run.master_seed, run.n_rep, horizon=run.T, settings=self.settings, runner=self.ensembles
                )
            )
            write_sweep_csv(report.details["sweep"], self.out_dir / "x-variation-sweep.csv", self.metadata())
        return self.finish("variation")

    def heat(self) -> int:
        run = self.run
        heat = self.config.heat
        # every probe time carries a full row of cell weights
        grid = Grid.uniform(run.T, min(run.n, HEAT_MAX_PROBES), include_origin=False)
        stg = heat.space_time_grid(run.T)
        self.record(heat_ratio_constancy())
        self.record(bifbm_proportionality(run.n_rep, grid, run.master_seed, stg, heat.x0, self.ensembles))
        self.record(refinement_check(grid, heat.x0, stg))
        return self.finish("heat")

    def step_norms(self) -> int:
        run = self.run
        for report in step_norm_reports(run.params, run.T, run.n_rep, run.master_seed):
            self.record(report)
        return self.finish("step-norms")

    def full_suite(self) -> int:
        suite, run, settings = self.config.suite, self.run, self.settings
        seed = run.master_seed
        kernel_checks = [r for H in SWEEP_VALUES for K in SWEEP_VALUES for r in covariance_reports(BifbmParams(H, K), 2.0, log=False)]
        for report in sweep_summary(kernel_checks):
            self.record(report)
        law_grid = Grid.uniform(2.0, suite.law_grid_points - 1)
        for H, K in ((0.6, 0.75), (0.3, 0.5)):
            self.record(verify_law_equality(suite.law_n_rep, law_grid, BifbmParams(H, K), seed, self.ensembles, settings=settings))
        control = verify_law_equality(
            suite.law_n_rep, law_grid, BifbmParams(0.3, 0.5), seed, self.ensembles, reference_scale=1.0, settings=settings
        )
        self.record(_negative_control(control))
        for K in (0.3, 0.5, 0.8):
            self.record(quadrature_fidelity_check(K, suite.quadrature_n_rep, seed, settings, runner=self.ensembles))
        self.record(derivative_variance_check(0.5, suite.quadrature_n_rep, seed, settings, runner=self.ensembles))
        self.record(fubini_check(0.5, suite.fubini_drivers, seed, settings=settings))
        self.record(absolute_continuity_check(0.5, suite.continuity_paths, seed, settings=settings, runner=self.ensembles))
        p = BifbmParams(0.6, 0.8)
        self.record(
            variation_limit_check(p, suite.variation_steps, suite.variation_paths, seed, settings=settings, runner=self.ensembles)
        )
        sweep = [1 << k for k in range(8, 15, 2)]
        self.record(
            x_variation_vanishes(p.K, p.H, sweep, seed, suite.x_variation_paths, settings=settings, runner=self.ensembles)
        )
        self.record(
            strong_variation_check(p, suite.variation_steps, suite.variation_paths, seed, settings=settings, runner=self.ensembles)
        )
        heat = self.config.heat
        heat_grid = Grid.uniform(suite.heat_horizon, suite.heat_grid_points, include_origin=False)
        stg = heat.space_time_grid(suite.heat_horizon)
        self.record(heat_ratio_constancy())
        self.record(bifbm_proportionality(suite.heat_n_rep, heat_grid, seed, stg, heat.x0, self.ensembles))
        self.record(refinement_check(heat_grid, heat.x0, stg))
        cases = [BifbmParams(H, K) for H in (0.3, 0.6) for K in (0.4, 0.9)]
        self.record(l1_bound_sweep(cases, suite.step_functions, seed))
        self.record(mixed_partial_report(0.6, 0.75))
        self.record(origin_growth_probe(0.5, suite.origin_n_rep, seed, settings=settings, runner=self.ensembles))
        self.record(
            holder_check(
                BifbmParams(0.6, 0.75), suite.holder_points, suite.holder_paths, seed, settings=settings, runner=self.ensembles
            )
        )
        return self.finish("full-suite")


def _negative_control(control: CheckReport) -> CheckReport:
    """The unscaled reference must be told apart from the sum."""
    return CheckReport(
        check="law_equality_negative_control",
        params=control.params,
        statistic=control.statistic,
        tolerance=control.tolerance,
        passed=not control.passed,
        n_rep=control.n_rep,
        master_seed=control.master_seed,
        details=control.details,
    ).log()


def covariance_reports(p: BifbmParams, horizon: float, log: bool = True) -> list[CheckReport]:
    params = report_params(p.H, p.K, horizon, None, None)
    grid64 = Grid.uniform(horizon, 63).points
    grid128 = Grid.uniform(horizon, 127).points
    reports: list[CheckReport] = []

    def add(check: str, statistic: float, tolerance: float, passed: bool | None = None, **details: object) -> None:
        report = CheckReport(
            check=check,
            params={**params, "grid_points": details.pop("grid_points", None)},
            statistic=statistic,
            tolerance=tolerance,
            passed=statistic <= tolerance if passed is None else passed,
            details=dict(details),
        )
        reports.append(report.log() if log else report)

    if not p.is_fbm:
        add("decomposition_residual", decomposition_residual(grid64, p), 1e-12, grid_points=64)
    add("quasi_helix", quasi_helix_violation(grid128, p), 1e-12, grid_points=128)
    add("self_similarity", max(self_similarity_error(grid64, p, a) for a in SELF_SIMILARITY_SCALES), 1e-12, grid_points=64)
    diagonal = np.power(2.0, np.arange(-10, 11, dtype=np.float64))
    diag_error = float(np.max(np.abs(np.asarray(bifbm_cov(diagonal, diagonal, p)) / np.power(diagonal, 2.0 * p.HK) - 1.0)))
    add("diagonal_law", diag_error, 1e-14, grid_points=int(diagonal.size))
    t, s = np.meshgrid(grid64, grid64, indexing="ij")
    sym = float(np.max(np.abs(np.asarray(bifbm_cov(t, s, p)) - np.asarray(bifbm_cov(s, t, p)))))
    add("symmetry", sym, 0.0, grid_points=64)
    if p.is_fbm:
        gap = float(np.max(np.abs(np.asarray(bifbm_cov(t, s, p)) - np.asarray(fbm_cov(t, s, p.H)))))
        add("fbm_degeneration", gap, 0.0, grid_points=64)
    grid32 = Grid.uniform(horizon, 32, include_origin=False).points
    kernels = [BifbmKernel(p), FbmKernel(p.HK)] + ([] if p.is_fbm else [XKKernel(p.K)])
    min_eig = min(gram_min_eigenvalue(kernel, grid32) for kernel in kernels)
    add("gram_psd", -min_eig, 1e-10, grid_points=32, min_eigenvalue=min_eig)
    add("gamma_reference", validate_gamma(), 1e-13)
    return reports


def sweep_summary(reports: Sequence[CheckReport]) -> list[CheckReport]:
    """One report per check name: the worst statistic and every failing (H, K)."""
    by_check: dict[str, list[CheckReport]] = {}
    for report in reports:
        by_check.setdefault(report.check, []).append(report)
    summary = []
    for check, group in by_check.items():
        worst = max(group, key=lambda r: r.statistic)
        failing = [[r.params["H"], r.params["K"]] for r in group if not r.passed]
        summary.append(
            CheckReport(
                check=f"{check}_sweep",
                params={**worst.params, "H": None, "K": None},
                statistic=worst.statistic,
                tolerance=worst.tolerance,
                passed=not failing,
                details={"cases": len(group), "worst_case": [worst.params["H"], worst.params["K"]], "failing": failing},
            ).log()
        )
    return summary


def mixed_partial_report(H: float, K: float) -> CheckReport:
    """Closed-form mixed partial of gamma^K(s^2H, t^2H) against finite differences."""
    pairs = [(0.5, 1.0), (1.0, 1.5), (0.3, 1.7)]
    errors = [abs(xk_mixed_partial_fd(s, t, H, K) / float(xk_mixed_partial(s, t, H, K)) - 1.0) for s, t in pairs]
    derivative_gap = abs(xk_derivative_variance_quad(1.0, K) / float(xk_derivative_variance(1.0, K)) - 1.0)
    return CheckReport(
        check="c_bound_finite_difference",
        params=report_params(H, K, None, None, None),
        statistic=max(errors),
        tolerance=1e-4,
        passed=max(errors) <= 1e-4 and derivative_gap <= 1e-8,
        details={"C_bound": constants(BifbmParams(H, K)).C_bound, "derivative_variance_gap": derivative_gap},
    ).log()


def step_norm_reports(p: BifbmParams, horizon: float, count: int, seed: int) -> list[CheckReport]:
    reports = [l1_bound_sweep([p], max(count, 1), seed, horizon)] if not p.is_fbm else []
    generator = rng(replicate_seed(seed, 1, STREAM_STEP_FUNCTIONS))
    worst = max(
        step_norm_identity_residual(random_step_function(generator, horizon), p) for _ in range(max(count, 1))
    )
    indicator = StepFunction.indicator(0.0, horizon)
    worst = max(worst, step_norm_identity_residual(indicator, p))
    reports.append(
        CheckReport(
            check="step_norm_identity",
            params=report_params(p.H, p.K, horizon, None, None),
            statistic=worst,
            tolerance=1e-10,
            passed=worst <= 1e-10,
            n_rep=count,
            master_seed=seed,
        ).log()
    )
    if not p.is_fbm:
        reports.append(mixed_partial_report(p.H, p.K))
    return reports


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.DEBUG if args.verbose else getattr(logging, config.logging.level, logging.INFO)
    configure_logging(config.logging.log_file, config.logging.max_lines, level)
    log_event(
        "cli",
        "start",
        result="ok",
        command=config.run.command,
        H=config.run.H,
        K=config.run.K,
        seed=config.run.master_seed,
        version=__version__,
    )

    runner = Runner(config)
    actions: dict[str, Callable[[], int]] = {
        "simulate": runner.simulate,
        "cov-check": runner.cov_check,
        "verify-decomposition": runner.verify_decomposition,
        "variation": runner.variation,
        "heat": runner.heat,
        "step-norms": runner.step_norms,
        "full-suite": runner.full_suite,
    }
    try:
        status = actions[config.run.command]()
    except (ParameterDomainError, GridError, QuadratureSchemeError, ConfigError) as exc:
        log_event("cli", config.run.command, result="usage_error", message=str(exc), level=logging.ERROR)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonPSDKernelError as exc:
        log_event("cli", config.run.command, result="non_psd", message=str(exc), level=logging.ERROR)
        print(f"FAIL {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except OSError as exc:
        log_event("cli", config.run.command, result="io_error", message=str(exc), level=logging.ERROR)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    log_event("cli", "finish", result="pass" if status == EXIT_OK else "fail", command=config.run.command)
    return status
