from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from bifbm.covariance import (
    BifbmKernel,
    BifbmParams,
    CovKernel,
    FbmKernel,
    XKKernel,
    _check_open_k,
    constants,
    x_hk_kernel,
    xk_variance,
)
from bifbm.ensemble import (
    STREAM_BIFBM,
    STREAM_REFERENCE,
    STREAM_STEP_FUNCTIONS,
    STREAM_X,
    Ensemble,
    EnsembleRunner,
    replicate_seed,
    rng,
)
from bifbm.errors import GridError, ParameterDomainError
from bifbm.paths import Grid, Path
from bifbm.reports import CheckReport, report_params
from bifbm.samplers import DEFAULT_SETTINGS, SamplerSettings

BOUND_SLACK = 1e-9
DEFAULT_HOLDER_LAGS = (1, 2, 4, 8, 16, 32, 64)
MIN_HOLDER_POINTS = 1 << 12
CONTINUITY_START = 0.1
CONTINUITY_HORIZON = 2.0
CONTINUITY_STEP = 2.0**-10
CONTINUITY_THRESHOLD = 0.9


@dataclass(frozen=True, slots=True, eq=False)
class StepFunction:
    """phi = levels[i] on [breakpoints[i], breakpoints[i+1])."""

    breakpoints: NDArray[np.float64]
    levels: NDArray[np.float64]

    def __post_init__(self) -> None:
        points = np.array(self.breakpoints, dtype=np.float64).ravel()
        levels = np.array(self.levels, dtype=np.float64).ravel()
        if points.size < 2:
            raise GridError("a step function needs at least two breakpoints")
        if levels.size != points.size - 1:
            raise GridError(f"{points.size} breakpoints need {points.size - 1} levels, got {levels.size}")
        if points[0] < 0.0 or np.any(np.diff(points) <= 0.0):
            raise GridError("breakpoints must be nonnegative and strictly increasing")
        points.setflags(write=False)
        levels.setflags(write=False)
        object.__setattr__(self, "breakpoints", points)
        object.__setattr__(self, "levels", levels)

    @classmethod
    def indicator(cls, start: float, end: float, level: float = 1.0) -> "StepFunction":
        return cls(np.array([start, end]), np.array([level]))

    def __call__(self, t: ArrayLike) -> NDArray[np.float64]:
        t_arr = np.asarray(t, dtype=np.float64)
        index = np.searchsorted(self.breakpoints, t_arr, side="right") - 1
        inside = (index >= 0) & (index < self.levels.size)
        return np.where(inside, self.levels[np.clip(index, 0, self.levels.size - 1)], 0.0)

    def refine(self, points: ArrayLike) -> "StepFunction":
        """Same function on the union of its breakpoints and ``points`` (inside its support)."""
        extra = np.asarray(points, dtype=np.float64)
        extra = extra[(extra > self.breakpoints[0]) & (extra < self.breakpoints[-1])]
        merged = np.union1d(self.breakpoints, extra)
        return StepFunction(merged, self(merged[:-1]))

    def l1_weight_integral(self, exponent: float) -> float:
        """Integral of |phi(t)| t^{exponent-1} dt, piece by piece in closed form."""
        b = self.breakpoints
        return float(np.sum(np.abs(self.levels) * (b[1:] ** exponent - b[:-1] ** exponent)) / exponent)


@dataclass(frozen=True, slots=True)
class VariationEstimate:
    alpha: float
    n: int
    value: float
    limit_prediction: float
    relative_gap: float


def _uniform_values(path: Path) -> NDArray[np.float64]:
    if not path.grid.is_uniform:
        raise GridError("variation needs a uniform partition")
    return path.values


def variation_values(values: NDArray[np.float64], alpha: float) -> NDArray[np.float64]:
    """sum |dX|^alpha along the last axis."""
    if alpha <= 0.0:
        raise ParameterDomainError(f"alpha must be positive, got {alpha}")
    return np.sum(np.power(np.abs(np.diff(values, axis=-1)), alpha), axis=-1)


def variation(path: Path, alpha: float) -> float:
    return float(variation_values(_uniform_values(path), alpha))


def _eps_steps(grid: Grid, eps: float) -> int:
    step = grid.step
    ratio = eps / step
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise GridError(f"eps={eps!r} is not a positive multiple of the grid step {step!r}")
    return k


def strong_variation_values(
    values: NDArray[np.float64], grid: Grid, alpha: float, eps: float, t: float | None = None
) -> NDArray[np.float64]:
    """(1/eps) * left-endpoint sum of |X_{s+eps} - X_s|^alpha ds over s in [t_0, t)."""
    k = _eps_steps(grid, eps)
    step = grid.step
    end = grid.horizon - eps if t is None else t
    terms = int(round((end - grid.points[0]) / step))
    if terms < 1 or terms + k > len(grid) - 1:
        raise GridError(f"strong variation up to t={end!r} needs s+eps inside the grid")
    lifted = np.abs(values[..., k : k + terms] - values[..., :terms])
    return np.sum(np.power(lifted, alpha), axis=-1) * (step / eps)


def strong_variation(path: Path, alpha: float, eps: float, t: float | None = None) -> float:
    return float(strong_variation_values(_uniform_values(path), path.grid, alpha, eps, t))


def minkowski_gap(a: NDArray[np.float64], b: NDArray[np.float64], alpha: float) -> float:
    """|V(a+b)^{1/alpha} - V(a)^{1/alpha}| - V(b)^{1/alpha}; never positive beyond rounding for alpha >= 1."""
    if alpha < 1.0:
        raise ParameterDomainError(f"the triangle inequality needs alpha >= 1, got {alpha}")
    inv = 1.0 / alpha
    sum_norm = float(variation_values(a + b, alpha)) ** inv
    a_norm = float(variation_values(a, alpha)) ** inv
    b_norm = float(variation_values(b, alpha)) ** inv
    return abs(sum_norm - a_norm) - b_norm


def variation_limit(p: BifbmParams, t: float = 1.0) -> float:
    c = constants(p)
    return c.C2 ** (1.0 / p.HK) * c.C_variation * t


def variation_estimate(path: Path, p: BifbmParams) -> VariationEstimate:
    alpha = 1.0 / p.HK
    value = variation(path, alpha)
    limit = variation_limit(p, path.grid.horizon - float(path.grid.points[0]))
    return VariationEstimate(alpha, len(path.grid) - 1, value, limit, abs(value / limit - 1.0))


def variation_sweep(
    ensemble: Ensemble, alpha: float, n_values: Sequence[int], prediction: float = math.nan
) -> list[dict[str, float]]:
    """Ensemble mean of V^{n,alpha} for each n, by subsampling the finest uniform grid."""
    finest = len(ensemble.grid) - 1
    if not ensemble.grid.is_uniform:
        raise GridError("variation sweep needs a uniform grid")
    rows = []
    for n in n_values:
        if n < 1 or finest % n:
            raise GridError(f"n={n} does not divide the {finest}-step grid")
        v = variation_values(ensemble.values[:, :: finest // n], alpha)
        stderr = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        rows.append({"n": n, "alpha": alpha, "mean": float(v.mean()), "stderr": stderr, "prediction": prediction})
    return rows


def _limit_report(
    check: str,
    p: BifbmParams,
    grid: Grid,
    n_rep: int,
    seed: int,
    values: NDArray[np.float64],
    control: NDArray[np.float64],
    tolerance: float,
    t: float,
) -> CheckReport:
    c = constants(p)
    bifbm_limit = variation_limit(p, t)
    fbm_limit = c.C_variation * t
    gap = abs(float(values.mean()) / bifbm_limit - 1.0)
    control_gap = abs(float(control.mean()) / fbm_limit - 1.0)
    ratio = float(values.mean() / control.mean())
    statistic = max(gap, control_gap)
    return CheckReport(
        check=check,
        params=report_params(p.H, p.K, grid.horizon, len(grid) - 1, len(grid)),
        statistic=statistic,
        tolerance=tolerance,
        passed=statistic <= tolerance,
        n_rep=n_rep,
        master_seed=seed,
        details={
            "alpha": 1.0 / p.HK,
            "bifbm_mean": float(values.mean()),
            "bifbm_limit": bifbm_limit,
            "fbm_mean": float(control.mean()),
            "fbm_limit": fbm_limit,
            "ratio": ratio,
            "ratio_limit": c.C2 ** (1.0 / p.HK),
            "C2": c.C2,
            "C_variation": c.C_variation,
        },
    ).log()


def _bifbm_and_fbm(
    p: BifbmParams, grid: Grid, n_rep: int, seed: int, settings: SamplerSettings, runner: EnsembleRunner | None
) -> tuple[Ensemble, Ensemble]:
    runner = runner or EnsembleRunner()
    bifbm = runner.ensemble(settings.cholesky(BifbmKernel(p), grid).draw, grid, seed, n_rep, STREAM_BIFBM, "bifbm")
    fbm_sampler = settings.circulant(len(grid) - 1, grid.horizon, p.HK)
    fbm = runner.ensemble(fbm_sampler.draw, grid, seed, n_rep, STREAM_REFERENCE, "fbm")
    return bifbm, fbm


def variation_limit_check(
    p: BifbmParams,
    steps: int,
    n_rep: int,
    seed: int,
    t: float = 1.0,
    tolerance: float = 0.05,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    grid = Grid.uniform(t, steps)
    bifbm, fbm = _bifbm_and_fbm(p, grid, n_rep, seed, settings, runner)
    alpha = 1.0 / p.HK
    return _limit_report(
        "variation_limit",
        p,
        grid,
        n_rep,
        seed,
        variation_values(bifbm.values, alpha),
        variation_values(fbm.values, alpha),
        tolerance,
        t,
    )


def strong_variation_check(
    p: BifbmParams,
    steps: int,
    n_rep: int,
    seed: int,
    eps: float = 2.0**-10,
    t: float = 1.0,
    horizon: float = 2.0,
    tolerance: float = 0.05,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    grid = Grid.uniform(horizon, steps)
    bifbm, fbm = _bifbm_and_fbm(p, grid, n_rep, seed, settings, runner)
    alpha = 1.0 / p.HK
    report = _limit_report(
        "strong_variation",
        p,
        grid,
        n_rep,
        seed,
        strong_variation_values(bifbm.values, grid, alpha, eps, t),
        strong_variation_values(fbm.values, grid, alpha, eps, t),
        tolerance,
        t,
    )
    report.details["eps"] = eps
    return report


def x_hk_ensemble(
    p: BifbmParams,
    grid: Grid,
    n_rep: int,
    seed: int,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> Ensemble:
    """X^{H,K} = X^K(t^{2H}) paths by quadrature on the time-changed grid."""
    sampler = settings.xk(grid.image(2.0 * p.H), p.K)
    runner = runner or EnsembleRunner()
    return runner.ensemble(sampler.draw, grid, seed, n_rep, STREAM_X, "x_hk")


def x_variation_vanishes(
    K: float,
    H: float,
    n_sweep: Sequence[int],
    seed: int,
    n_rep: int = 20,
    threshold_fraction: float = 0.1,
    horizon: float = 1.0,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    """V^{n,1/HK}(X^{H,K}) on [0, T] must fall with n and end below a fraction of the bifBm limit."""
    _check_open_k(K)
    p = BifbmParams(H, K)
    n_sorted = sorted(n_sweep)
    grid = Grid.uniform(horizon, n_sorted[-1])
    ensemble = x_hk_ensemble(p, grid, n_rep, seed, settings, runner)
    alpha = 1.0 / p.HK
    threshold = threshold_fraction * variation_limit(p, horizon)
    rows = variation_sweep(ensemble, alpha, n_sorted, prediction=0.0)
    total_variation = variation_sweep(ensemble, 1.0, n_sorted)
    means = [row["mean"] for row in rows]
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    passed = decreasing and means[-1] < threshold
    return CheckReport(
        check="x_variation_vanishes",
        params=report_params(H, K, horizon, n_sorted[-1], len(grid)),
        statistic=means[-1],
        tolerance=threshold,
        passed=passed,
        n_rep=n_rep,
        master_seed=seed,
        details={
            "n": n_sorted,
            "means": means,
            "strictly_decreasing": decreasing,
            "sweep": rows,
            "total_variation_means": [row["mean"] for row in total_variation],
        },
    ).log()


def origin_growth_probe(
    K: float,
    n_rep: int,
    seed: int,
    k_min: int = 4,
    k_max: int = 20,
    k_split: int = 12,
    stability: float = 2.0,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    """Per-k 99th percentiles of |X^K_t| / sqrt(t^K log log(1/t)) at t = 2^-k.

    The statistic is the largest percentile over k > k_split divided by the
    largest over k <= k_split; it stays bounded when the envelope holds.
    """
    K = _check_open_k(K)
    ks = np.arange(k_max, k_min - 1, -1)
    times = np.power(2.0, -ks.astype(np.float64))
    if times.max() >= 1.0 / math.e:
        raise ParameterDomainError("sample times must stay below 1/e so that log log(1/t) > 0")
    if not k_min <= k_split < k_max:
        raise ParameterDomainError(f"k_split must lie in [{k_min}, {k_max}), got {k_split}")
    grid = Grid.from_points(times)
    runner = runner or EnsembleRunner()
    sampler = settings.cholesky(XKKernel(K), grid)
    ensemble = runner.ensemble(sampler.draw, grid, seed, n_rep, STREAM_X, "xk")
    envelope = np.sqrt(np.power(times, K) * np.log(np.log(1.0 / times)))
    ratios = np.abs(ensemble.values) / envelope
    q99_by_k = np.percentile(ratios, 99, axis=0)
    shallow = ks <= k_split
    q_shallow = float(q99_by_k[shallow].max())
    q_deep = float(q99_by_k[~shallow].max())
    growth = q_deep / q_shallow if q_shallow > 0.0 else math.inf
    passed = math.isfinite(growth) and growth <= stability
    # Var(X_t)/(t^K log log 1/t) = C3 / log log(1/t): shrinks towards the origin
    scaled_variance = np.asarray(xk_variance(times, K)) / envelope**2
    return CheckReport(
        check="origin_growth",
        params=report_params(None, K, float(times.max()), None, len(grid)),
        statistic=growth,
        tolerance=stability,
        passed=passed,
        n_rep=n_rep,
        master_seed=seed,
        details={
            "k": ks.tolist(),
            "q99_by_k": q99_by_k.tolist(),
            "q99_shallow": q_shallow,
            "q99_deep": q_deep,
            "q99_pathwise_max": float(np.percentile(ratios.max(axis=1), 99)),
            "k_split": k_split,
            "scaled_variance": scaled_variance.tolist(),
        },
    ).log()


def step_bilinear_form(phi: StepFunction, psi: StepFunction, kernel: CovKernel) -> float:
    """E[phi(X) psi(X)] from second differences of the kernel on the two breakpoint sets."""
    a = phi.breakpoints
    b = psi.breakpoints
    k = np.asarray(kernel(a[:, None], b[None, :]), dtype=np.float64)
    second = k[1:, 1:] - k[1:, :-1] - k[:-1, 1:] + k[:-1, :-1]
    return float(phi.levels @ second @ psi.levels)


def step_quadratic_form(phi: StepFunction, kernel: CovKernel) -> float:
    return step_bilinear_form(phi, phi, kernel)


def step_norm_identity_residual(phi: StepFunction, p: BifbmParams) -> float:
    """|C1^2 |phi|^2_{X^{H,K}} + |phi|^2_{B^{H,K}} - C2^2 |phi|^2_{B^{HK}}|."""
    c = constants(p)
    x_part = 0.0 if p.is_fbm else c.C1**2 * step_quadratic_form(phi, x_hk_kernel(p))
    lhs = x_part + step_quadratic_form(phi, BifbmKernel(p))
    return abs(lhs - c.C2**2 * step_quadratic_form(phi, FbmKernel(p.HK)))


def l1_weight_bound_check(phi: StepFunction, p: BifbmParams) -> CheckReport:
    """E[X^{H,K}(phi)^2] <= C_bound * (int |phi(t)| t^{HK-1} dt)^2."""
    c = constants(p)
    lhs = step_quadratic_form(phi, x_hk_kernel(p))
    rhs = c.C_bound * phi.l1_weight_integral(p.HK) ** 2
    return CheckReport(
        check="l1_weight_bound",
        params=report_params(p.H, p.K, float(phi.breakpoints[-1]), phi.levels.size, phi.breakpoints.size),
        statistic=lhs,
        tolerance=rhs,
        passed=lhs <= rhs * (1.0 + BOUND_SLACK),
        details={"C_bound": c.C_bound, "pieces": int(phi.levels.size)},
    )


def random_step_function(
    generator: np.random.Generator, horizon: float, max_pieces: int = 8, level_bound: float = 2.0
) -> StepFunction:
    pieces = int(generator.integers(1, max_pieces + 1))
    inner = np.sort(generator.uniform(0.0, horizon, size=pieces - 1))
    points = np.unique(np.concatenate([[0.0], inner, [horizon]]))
    levels = generator.uniform(-level_bound, level_bound, size=points.size - 1)
    return StepFunction(points, levels)


def l1_bound_sweep(
    cases: Sequence[BifbmParams],
    count: int,
    seed: int,
    horizon: float = 2.0,
) -> CheckReport:
    """Bound check over ``count`` random step functions for each parameter pair."""
    generator = rng(replicate_seed(seed, 0, STREAM_STEP_FUNCTIONS))
    worst = -math.inf
    failures = 0
    for p in cases:
        for _ in range(count):
            phi = random_step_function(generator, horizon)
            report = l1_weight_bound_check(phi, p)
            if not report.passed:
                failures += 1
            if report.tolerance > 0.0:
                worst = max(worst, report.statistic / report.tolerance)
    return CheckReport(
        check="l1_weight_bound_sweep",
        params=report_params(None, None, horizon, None, None),
        statistic=worst,
        tolerance=1.0 + BOUND_SLACK,
        passed=failures == 0,
        n_rep=count,
        master_seed=seed,
        details={"cases": [[p.H, p.K] for p in cases], "failures": failures},
    ).log()


def holder_exponent_estimate(paths: Ensemble, lags: Sequence[int] = DEFAULT_HOLDER_LAGS) -> float:
    """Slope of log(median |X_{t+lag} - X_t|) against log(lag * dt), pooled over replicates."""
    if len(paths.grid) < MIN_HOLDER_POINTS:
        raise GridError(f"roughness estimate needs at least {MIN_HOLDER_POINTS} grid points, got {len(paths.grid)}")
    step = paths.grid.step
    medians = [float(np.median(np.abs(paths.values[:, lag:] - paths.values[:, :-lag]))) for lag in lags]
    slope, _ = np.polyfit(np.log(np.asarray(lags, dtype=np.float64) * step), np.log(medians), 1)
    return float(slope)


def holder_check(
    p: BifbmParams,
    points: int,
    n_rep: int,
    seed: int,
    horizon: float = 1.0,
    tolerance: float = 0.05,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    grid = Grid.uniform(horizon, points - 1)
    runner = runner or EnsembleRunner()
    ensemble = runner.ensemble(settings.cholesky(BifbmKernel(p), grid).draw, grid, seed, n_rep, STREAM_BIFBM, "bifbm")
    estimate = holder_exponent_estimate(ensemble)
    gap = abs(estimate - p.HK)
    return CheckReport(
        check="holder_exponent",
        params=report_params(p.H, p.K, horizon, points - 1, points),
        statistic=gap,
        tolerance=tolerance,
        passed=gap <= tolerance,
        n_rep=n_rep,
        master_seed=seed,
        details={"estimate": estimate, "HK": p.HK},
    ).log()


def absolute_continuity_slope(values: NDArray[np.float64], grid: Grid, lags: Sequence[int] = DEFAULT_HOLDER_LAGS) -> NDArray[np.float64]:
    """Per path, the slope of log(max |X_{t+lag} - X_t|) against log(lag * dt); near 1 for C^1 paths."""
    step = grid.step
    values = np.atleast_2d(values)
    maxima = np.stack([np.max(np.abs(values[:, lag:] - values[:, :-lag]), axis=1) for lag in lags], axis=1)
    x = np.log(np.asarray(lags, dtype=np.float64) * step)
    slopes = np.polyfit(x, np.log(maxima).T, 1)[0]
    return np.atleast_1d(slopes)


def absolute_continuity_check(
    K: float,
    n_rep: int,
    seed: int,
    start: float = CONTINUITY_START,
    horizon: float = CONTINUITY_HORIZON,
    threshold: float = CONTINUITY_THRESHOLD,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    """Ensemble median of the per-path max-increment slopes of X^K on [start, T], lags 2^-10 .. 2^-4."""
    K = _check_open_k(K)
    grid = Grid.from_points(start + np.arange(int((horizon - start) / CONTINUITY_STEP) + 1) * CONTINUITY_STEP)
    runner = runner or EnsembleRunner()
    ensemble = runner.ensemble(settings.xk(grid, K).draw, grid, seed, n_rep, STREAM_X, "xk")
    slopes = absolute_continuity_slope(ensemble.values, grid)
    median = float(np.median(slopes))
    return CheckReport(
        check="absolute_continuity",
        params=report_params(None, K, horizon, len(grid) - 1, len(grid)),
        statistic=median,
        tolerance=threshold,
        passed=median >= threshold,
        n_rep=n_rep,
        master_seed=seed,
        details={
            "aggregate": "median",
            "start": start,
            "lags": [lag * CONTINUITY_STEP for lag in DEFAULT_HOLDER_LAGS],
            "min_slope": float(slopes.min()),
            "slopes": slopes.tolist(),
        },
    ).log()
