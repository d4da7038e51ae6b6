"""Path samplers: Cholesky for any kernel, circulant embedding for fBm, and a
log-uniform quadrature of the Wiener integral defining X^K.

Samplers are classes holding their setup (factor, eigenvalues, weights) so an
ensemble pays it once; the module-level functions are the single-path entry
points. Every draw is a pure function of explicit seeds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import fft, integrate, linalg, special

from bifbm.covariance import CovKernel, FbmKernel, XKKernel, _check_hurst, _check_open_k, xk_cov, xk_variance
from bifbm.ensemble import STREAM_X, EnsembleRunner, replicate_seeds, rng
from bifbm.errors import GridError, GridMismatchError, NonPSDKernelError, ParameterDomainError, QuadratureSchemeError
from bifbm.logging_utils import log_event, timed
from bifbm.paths import Grid, Path
from bifbm.reports import CheckReport, report_params

DEFAULT_JITTER_LADDER: tuple[float, ...] = (0.0, 1e-14, 1e-12, 1e-10)
DEFAULT_CIRCULANT_FLOOR = 1e-9
DEFAULT_QUADRATURE_TOLERANCE = 1e-3
DEFAULT_T_FLOOR_FRACTION = 0.05

# weights above this many entries are rebuilt per chunk instead of cached
_WEIGHT_CACHE_LIMIT = 1 << 22
_CHUNK_ROWS = 1024


def factorize(build_gram: Callable[[], NDArray[np.float64]], jitter_ladder: Sequence[float]) -> tuple[NDArray[np.float64], float]:
    """Lower Cholesky factor of the first gram + lambda*trace/n*I that factors."""
    size = 0
    for lam in jitter_ladder:
        work = build_gram()
        size = work.shape[0]
        if lam > 0.0:
            work[np.diag_indices(size)] += lam * np.trace(work) / size
        try:
            factor = linalg.cholesky(work, lower=True, overwrite_a=True, check_finite=False)
        except linalg.LinAlgError:
            log_event("samplers", "cholesky", result="retry", message=f"n={size} jitter={lam:g} failed", level=logging.DEBUG)
            continue
        if lam > 0.0:
            log_event("samplers", "cholesky", result="jitter", message=f"n={size} jitter={lam:g}", level=logging.WARNING)
        return factor, float(lam)
    min_eig = float(linalg.eigvalsh(build_gram(), subset_by_index=[0, 0], check_finite=False)[0])
    log_event("samplers", "cholesky", result="non_psd", message=f"n={size} min_eig={min_eig:.3e}", level=logging.WARNING)
    raise NonPSDKernelError(size, min_eig)


class CholeskySampler:
    """Exact centred Gaussian sampler for ``kernel`` on ``grid``.

    A grid point at the origin with kernel(0, 0) = 0 is pinned to exactly 0 and
    left out of the factorization.
    """

    def __init__(self, kernel: CovKernel, grid: Grid, jitter_ladder: Sequence[float] = DEFAULT_JITTER_LADDER) -> None:
        self.kernel = kernel
        self.grid = grid
        self.pinned = grid.includes_origin and float(kernel(0.0, 0.0)) == 0.0
        self.free_points = grid.points[1:] if self.pinned else grid.points
        if self.free_points.size:
            with timed("samplers", "cholesky_setup", message=f"n={self.free_points.size} kernel={kernel.name}"):
                self.factor, self.jitter = factorize(lambda: kernel.gram(self.free_points), jitter_ladder)
        else:
            self.factor, self.jitter = np.zeros((0, 0)), 0.0

    @property
    def provenance(self) -> list[str]:
        note = f"cholesky kernel={self.kernel.name} jitter={self.jitter:g}"
        return [note + (" origin pinned" if self.pinned else "")]

    def draw(self, seeds: Sequence[int]) -> NDArray[np.float64]:
        m = self.free_points.size
        out = np.zeros((len(seeds), len(self.grid)), dtype=np.float64)
        if m == 0:
            return out
        z = np.empty((m, len(seeds)), dtype=np.float64)
        for j, seed in enumerate(seeds):
            z[:, j] = rng(seed).standard_normal(m)
        out[:, len(self.grid) - m :] = (self.factor @ z).T
        return out

    def sample(self, seed: int) -> Path:
        return Path(self.grid, self.draw([seed])[0], self.kernel.name, seed, self.provenance)


def cholesky_sample(kernel: CovKernel, grid: Grid, seed: int) -> Path:
    return CholeskySampler(kernel, grid).sample(seed)


def fgn_autocovariance(steps: int, h: float) -> NDArray[np.float64]:
    k = np.arange(steps + 1, dtype=np.float64)
    two_h = 2.0 * h
    return 0.5 * (np.power(k + 1.0, two_h) - 2.0 * np.power(k, two_h) + np.power(np.abs(k - 1.0), two_h))


class CirculantFbmSampler:
    """Fractional Brownian motion on t_i = i*T/n by circulant embedding of the
    fractional Gaussian noise covariance (size-2n embedding)."""

    def __init__(
        self,
        steps: int,
        horizon: float,
        h: float,
        floor: float = DEFAULT_CIRCULANT_FLOOR,
        jitter_ladder: Sequence[float] = DEFAULT_JITTER_LADDER,
    ) -> None:
        if steps < 2:
            raise GridError(f"circulant sampler needs n >= 2 steps, got {steps}")
        self.h = _check_hurst(h)
        self.steps = steps
        self.horizon = float(horizon)
        self.grid = Grid.uniform(self.horizon, steps)
        if steps & (steps - 1):
            log_event("samplers", "circulant_setup", result="non_power_of_two", message=f"n={steps}", level=logging.DEBUG)

        r = fgn_autocovariance(steps, self.h)
        row = np.concatenate([r, r[-2:0:-1]])
        eigenvalues = np.real(fft.fft(row))
        self.min_relative_eigenvalue = float(eigenvalues.min() / eigenvalues.max())
        self.fallback: CholeskySampler | None = None
        self.sqrt_eigenvalues: NDArray[np.float64] | None = None
        if self.min_relative_eigenvalue < -floor:
            log_event(
                "samplers",
                "circulant_setup",
                result="fallback",
                message=f"n={steps} h={self.h} min_relative_eigenvalue={self.min_relative_eigenvalue:.3e}",
                level=logging.WARNING,
            )
            self.fallback = CholeskySampler(FbmKernel(self.h), self.grid, jitter_ladder)
        else:
            self.sqrt_eigenvalues = np.sqrt(np.clip(eigenvalues, 0.0, None) / row.size)

    @property
    def provenance(self) -> list[str]:
        if self.fallback is not None:
            return [f"circulant fallback to cholesky (min relative eigenvalue {self.min_relative_eigenvalue:.3e})"]
        return [f"circulant h={self.h:g}"]

    def draw(self, seeds: Sequence[int]) -> NDArray[np.float64]:
        if self.fallback is not None:
            return self.fallback.draw(seeds)
        assert self.sqrt_eigenvalues is not None
        size = self.sqrt_eigenvalues.size
        z = np.empty((len(seeds), size), dtype=np.complex128)
        for j, seed in enumerate(seeds):
            g = rng(seed)
            z[j].real = g.standard_normal(size)
            z[j].imag = g.standard_normal(size)
        noise = np.real(fft.fft(self.sqrt_eigenvalues * z, axis=1))[:, : self.steps]
        out = np.zeros((len(seeds), self.steps + 1), dtype=np.float64)
        out[:, 1:] = np.cumsum(noise, axis=1) * (self.horizon / self.steps) ** self.h
        return out

    def sample(self, seed: int) -> Path:
        return Path(self.grid, self.draw([seed])[0], "fbm", seed, self.provenance)


def fbm_circulant(n: int, T: float, h: float, seed: int) -> Path:
    return CirculantFbmSampler(n, T, h).sample(seed)


@dataclass(frozen=True, slots=True)
class QuadratureScheme:
    """Log-uniform midpoint cells on [theta_min, theta_max] for the theta-integral."""

    theta_min: float = 1e-6
    theta_max: float = 1e14
    nodes: int = 4096
    spacing: str = "log-uniform"

    def __post_init__(self) -> None:
        if not 0.0 < self.theta_min < self.theta_max:
            raise QuadratureSchemeError(f"need 0 < theta_min < theta_max, got [{self.theta_min}, {self.theta_max}]")
        if self.nodes < 2:
            raise QuadratureSchemeError(f"need at least 2 nodes, got {self.nodes}")
        if self.spacing != "log-uniform":
            raise QuadratureSchemeError(f"unsupported spacing {self.spacing!r}")

    def edges(self) -> NDArray[np.float64]:
        return np.geomspace(self.theta_min, self.theta_max, self.nodes + 1)

    def midpoints(self) -> NDArray[np.float64]:
        edges = self.edges()
        return np.sqrt(edges[:-1] * edges[1:])

    def widths(self) -> NDArray[np.float64]:
        return np.diff(self.edges())

    def truncation_error(self, times: NDArray[np.float64], K: float) -> float:
        """Relative variance lost to the two omitted tails, bounded in closed form.

        Below theta_min: (1-e^{-theta t})^2 <= theta^2 t^2 gives t^2 theta_min^{2-K}/(2-K)
        at the largest t; above theta_max: (1-e^{-theta t})^2 <= 1 gives
        theta_max^{-K}/K against the smallest positive t.
        """
        K = _check_open_k(K)
        positive = np.asarray(times, dtype=np.float64)
        positive = positive[positive > 0.0]
        if positive.size == 0:
            return 0.0
        t_lo = float(positive.min())
        t_hi = float(positive.max())
        c3 = float(special.gamma(1.0 - K)) / K * (2.0 - 2.0**K)
        lower = t_hi**2 * self.theta_min ** (2.0 - K) / (2.0 - K) / (c3 * t_hi**K)
        upper = self.theta_max ** (-K) / K / (c3 * t_lo**K)
        return max(lower, upper)

    def discretized_covariance(self, t: float, s: float, K: float) -> float:
        theta = self.midpoints()
        weights = -np.expm1(-theta * t) * -np.expm1(-theta * s) * np.power(theta, -1.0 - K)
        return float(np.sum(weights * self.widths()))


@dataclass(frozen=True, slots=True, eq=False)
class BrownianDriver:
    """Cell increments of W on the scheme's cells: N(0, width), reproducible from seed_record."""

    scheme: QuadratureScheme
    increments: NDArray[np.float64]
    seed_record: int

    @classmethod
    def draw(cls, scheme: QuadratureScheme, seed: int) -> "BrownianDriver":
        increments = rng(seed).standard_normal(scheme.nodes) * np.sqrt(scheme.widths())
        increments.setflags(write=False)
        return cls(scheme, increments, int(seed))


def _xk_weights(times: NDArray[np.float64], theta: NDArray[np.float64], K: float) -> NDArray[np.float64]:
    return -np.expm1(-np.outer(times, theta)) * np.power(theta, -(1.0 + K) / 2.0)


class XKQuadratureSampler:
    def __init__(
        self,
        grid: Grid,
        K: float,
        scheme: QuadratureScheme | None = None,
        tolerance: float = DEFAULT_QUADRATURE_TOLERANCE,
    ) -> None:
        self.K = _check_open_k(K)
        self.grid = grid
        self.scheme = scheme or QuadratureScheme()
        self.truncation_error = self.scheme.truncation_error(grid.points, self.K)
        if self.truncation_error > tolerance:
            log_event(
                "samplers",
                "quadrature_scheme",
                result="rejected",
                message=f"estimate={self.truncation_error:.3e} tolerance={tolerance:.3e}",
                level=logging.WARNING,
            )
            raise QuadratureSchemeError(
                f"truncation-error estimate {self.truncation_error:.3e} exceeds tolerance {tolerance:.3e}; "
                "widen [theta_min, theta_max]"
            )
        self.theta = self.scheme.midpoints()
        self._weights: NDArray[np.float64] | None = None
        if len(grid) * self.scheme.nodes <= _WEIGHT_CACHE_LIMIT:
            self._weights = _xk_weights(grid.points, self.theta, self.K)

    @property
    def provenance(self) -> list[str]:
        s = self.scheme
        return [f"quadrature theta=[{s.theta_min:g},{s.theta_max:g}] nodes={s.nodes} truncation={self.truncation_error:.2e}"]

    def _apply(self, increments: NDArray[np.float64]) -> NDArray[np.float64]:
        if self._weights is not None:
            values = (self._weights @ increments).T
        else:
            values = np.empty((increments.shape[1], len(self.grid)), dtype=np.float64)
            for start in range(0, len(self.grid), _CHUNK_ROWS):
                stop = min(start + _CHUNK_ROWS, len(self.grid))
                chunk = _xk_weights(self.grid.points[start:stop], self.theta, self.K)
                values[:, start:stop] = (chunk @ increments).T
        values[:, self.grid.points == 0.0] = 0.0
        return values

    def draw(self, seeds: Sequence[int]) -> NDArray[np.float64]:
        increments = np.column_stack([BrownianDriver.draw(self.scheme, seed).increments for seed in seeds])
        return self._apply(increments)

    def from_driver(self, driver: BrownianDriver) -> Path:
        if driver.scheme != self.scheme:
            raise QuadratureSchemeError("driver was drawn on a different quadrature scheme")
        values = self._apply(driver.increments[:, None])[0]
        return Path(self.grid, values, "xk", driver.seed_record, self.provenance)

    def sample(self, seed: int) -> tuple[Path, BrownianDriver]:
        driver = BrownianDriver.draw(self.scheme, seed)
        return self.from_driver(driver), driver


def xk_quadrature(
    grid: Grid,
    K: float,
    scheme: QuadratureScheme | None,
    seed: int,
    tolerance: float = DEFAULT_QUADRATURE_TOLERANCE,
) -> tuple[Path, BrownianDriver]:
    return XKQuadratureSampler(grid, K, scheme, tolerance).sample(seed)


def _derivative_weights(times: NDArray[np.float64], theta: NDArray[np.float64], K: float, order: int) -> NDArray[np.float64]:
    # log-space keeps theta^n finite for large theta and high orders
    exponent = order - (1.0 + K) / 2.0
    return np.exp(exponent * np.log(theta)[None, :] - np.outer(times, theta))


def xk_derivative(
    driver: BrownianDriver,
    grid: Grid,
    K: float,
    order: int = 1,
    t_floor: float | None = None,
    t_floor_fraction: float = DEFAULT_T_FLOOR_FRACTION,
) -> Path:
    """Order-n derivative of X^K on the same noise:
    sum_c (-1)^{n-1} theta_c^{n-(1+K)/2} e^{-theta_c t} dW_c.

    Without an explicit ``t_floor`` the grid must start at or above
    ``t_floor_fraction`` times its own horizon.
    """
    K = _check_open_k(K)
    if order < 1:
        raise ParameterDomainError(f"derivative order must be >= 1, got {order}")
    floor = t_floor_fraction * grid.horizon if t_floor is None else t_floor
    if grid.points[0] < floor:
        raise ParameterDomainError(
            f"derivative grid starts at {grid.points[0]:g} below t_floor={floor:g}; the variance diverges as t -> 0"
        )
    theta = driver.scheme.midpoints()
    sign = -1.0 if order % 2 == 0 else 1.0
    values = np.empty(len(grid), dtype=np.float64)
    for start in range(0, len(grid), _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, len(grid))
        values[start:stop] = sign * (_derivative_weights(grid.points[start:stop], theta, K, order) @ driver.increments)
    return Path(grid, values, f"xk_derivative_{order}", driver.seed_record, [f"derivative order={order}"])


def xk_cholesky(grid: Grid, K: float, seed: int) -> Path:
    return CholeskySampler(XKKernel(K), grid).sample(seed)


@dataclass(frozen=True, slots=True)
class SamplerSettings:
    """The ``[sampler]`` settings every command builds its samplers from."""

    scheme: QuadratureScheme = field(default_factory=QuadratureScheme)
    quadrature_tolerance: float = DEFAULT_QUADRATURE_TOLERANCE
    jitter_ladder: tuple[float, ...] = DEFAULT_JITTER_LADDER
    circulant_floor: float = DEFAULT_CIRCULANT_FLOOR
    t_floor_fraction: float = DEFAULT_T_FLOOR_FRACTION

    def cholesky(self, kernel: CovKernel, grid: Grid) -> CholeskySampler:
        return CholeskySampler(kernel, grid, self.jitter_ladder)

    def circulant(self, steps: int, horizon: float, h: float) -> CirculantFbmSampler:
        return CirculantFbmSampler(steps, horizon, h, self.circulant_floor, self.jitter_ladder)

    def fbm(self, grid: Grid, h: float) -> CirculantFbmSampler | CholeskySampler:
        if grid.includes_origin and grid.is_uniform and len(grid) >= 3:
            sampler = self.circulant(len(grid) - 1, grid.horizon, h)
            if sampler.grid.same_as(grid):
                return sampler
        return self.cholesky(FbmKernel(h), grid)

    def xk(self, grid: Grid, K: float) -> XKQuadratureSampler:
        return XKQuadratureSampler(grid, K, self.scheme, self.quadrature_tolerance)

    def xk_or_cholesky(self, grid: Grid, K: float) -> XKQuadratureSampler | CholeskySampler:
        """Quadrature when the scheme covers the grid, exact Cholesky on XKKernel otherwise."""
        K = _check_open_k(K)
        estimate = self.scheme.truncation_error(grid.points, K)
        if estimate <= self.quadrature_tolerance:
            return self.xk(grid, K)
        log_event(
            "samplers",
            "quadrature_scheme",
            result="cholesky_fallback",
            K=K,
            estimate=estimate,
            tolerance=self.quadrature_tolerance,
            level=logging.WARNING,
        )
        return self.cholesky(XKKernel(K), grid)

    def derivative(self, driver: BrownianDriver, grid: Grid, K: float, order: int = 1) -> Path:
        return xk_derivative(driver, grid, K, order, t_floor_fraction=self.t_floor_fraction)


DEFAULT_SETTINGS = SamplerSettings()


def time_change(path: Path, target_grid: Grid, exponent: float) -> Path:
    """Re-index a path sampled on {t^exponent} onto the target grid {t}."""
    expected = target_grid.image(exponent)
    if not path.grid.same_as(expected):
        raise GridMismatchError(
            f"path grid ({len(path.grid)} points) is not the image t^{exponent:g} of the target grid "
            f"({len(target_grid)} points)"
        )
    return Path(
        target_grid,
        path.values.copy(),
        f"{path.process}_time_changed" if path.process else "time_changed",
        path.seed,
        [*path.provenance, f"time change t^{exponent:g}"],
    )


def quadrature_covariance_error(K: float, scheme: QuadratureScheme | None = None, times: NDArray[np.float64] | None = None) -> float:
    """Largest relative gap between the scheme's covariance and gamma^K over a product grid."""
    scheme = scheme or QuadratureScheme()
    t = np.linspace(0.1, 2.0, 20) if times is None else np.asarray(times, dtype=np.float64)
    weights = _xk_weights(t, scheme.midpoints(), K)
    discrete = (weights * scheme.widths()) @ weights.T
    exact = np.asarray(xk_cov(t[:, None], t[None, :], K))
    return float(np.max(np.abs(discrete / exact - 1.0)))


def quadrature_fidelity_check(
    K: float,
    n_rep: int,
    seed: int,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    """Deterministic covariance error on [0.1, 2]^2 plus a Monte Carlo check of Var(X_1) = C3."""
    tolerance = settings.quadrature_tolerance
    error = quadrature_covariance_error(K, settings.scheme)
    sampler = settings.xk(Grid.from_points([1.0]), K)
    runner = runner or EnsembleRunner()
    values = runner.run(sampler.draw, replicate_seeds(seed, n_rep, STREAM_X), label="xk_variance")[:, 0]
    target = float(xk_variance(1.0, K))
    squares = values * values
    z = abs(float(squares.mean()) - target) / (float(squares.std(ddof=1)) / math.sqrt(n_rep))
    return CheckReport(
        check="quadrature_fidelity",
        params=report_params(None, K, 2.0, None, None),
        statistic=error,
        tolerance=tolerance,
        passed=error <= tolerance and z < 4.0,
        n_rep=n_rep,
        master_seed=seed,
        details={"variance_z": z, "variance": float(squares.mean()), "C3": target, "nodes": settings.scheme.nodes},
    ).log()


def derivative_variance(t: float, K: float, scheme: QuadratureScheme, order: int = 1) -> float:
    """int theta^{2n-1-K} e^{-2 theta t} d theta over the scheme's support, in log theta."""
    K = _check_open_k(K)
    power = 2.0 * order - K

    def integrand(u: float) -> float:
        return math.exp(power * u - 2.0 * t * math.exp(u))

    peak = math.log(power / (2.0 * t))
    lo, hi = math.log(scheme.theta_min), math.log(scheme.theta_max)
    value, _ = integrate.quad(integrand, lo, hi, points=[min(max(peak, lo), hi)], limit=200)
    return float(value)


def derivative_variance_check(
    K: float,
    n_rep: int,
    seed: int,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    horizon: float = 1.0,
    points: int = 8,
    runner: EnsembleRunner | None = None,
) -> CheckReport:
    """Monte Carlo variance of the first derivative on [t_floor, T] against the theta-integral."""
    K = _check_open_k(K)
    grid = Grid.from_points(np.linspace(settings.t_floor_fraction * horizon, horizon, points))
    theta = settings.scheme.midpoints()
    weights = _derivative_weights(grid.points, theta, K, 1)

    def draw(seeds: Sequence[int]) -> NDArray[np.float64]:
        increments = np.column_stack([BrownianDriver.draw(settings.scheme, s).increments for s in seeds])
        return (weights @ increments).T

    runner = runner or EnsembleRunner()
    values = runner.run(draw, replicate_seeds(seed, n_rep, STREAM_X), label="xk_derivative")
    squares = values * values
    target = np.array([derivative_variance(float(t), K, settings.scheme) for t in grid.points])
    z = np.abs(squares.mean(axis=0) - target) / (squares.std(axis=0, ddof=1) / math.sqrt(n_rep))
    # the untruncated integral is Gamma(2-K) (2t)^{K-2}
    full = special.gamma(2.0 - K) * np.power(2.0 * grid.points, K - 2.0)
    max_z = float(np.max(z))
    return CheckReport(
        check="derivative_variance",
        params=report_params(None, K, horizon, points - 1, points),
        statistic=max_z,
        tolerance=4.0,
        passed=max_z < 4.0,
        n_rep=n_rep,
        master_seed=seed,
        details={
            "t_floor": float(grid.points[0]),
            "times": grid.points.tolist(),
            "z": z.tolist(),
            "target": target.tolist(),
            "truncation_gap": float(np.max(np.abs(target / full - 1.0))),
        },
    ).log()


def fubini_check(
    K: float,
    n_drivers: int,
    seed: int,
    t0: float = 0.05,
    horizon: float = 2.0,
    points: int = 3901,
    settings: SamplerSettings = DEFAULT_SETTINGS,
    tolerance: float = 1e-3,
) -> CheckReport:
    """Pathwise max |X_t - X_t0 - int_t0^t Y ds| / max |X| with X and Y built on one driver."""
    grid = Grid.from_points(np.linspace(t0, horizon, points))
    sampler = settings.xk(grid, K)
    worst = 0.0
    for driver_seed in replicate_seeds(seed, n_drivers, STREAM_X):
        x, driver = sampler.sample(driver_seed)
        y = xk_derivative(driver, grid, K, order=1, t_floor=t0)
        integral = integrate.cumulative_trapezoid(y.values, grid.points, initial=0.0)
        gap = np.max(np.abs(x.values - x.values[0] - integral)) / np.max(np.abs(x.values))
        worst = max(worst, float(gap))
    return CheckReport(
        check="fubini_identity",
        params=report_params(None, K, horizon, points - 1, points),
        statistic=worst,
        tolerance=tolerance,
        passed=worst <= tolerance,
        n_rep=n_drivers,
        master_seed=seed,
        details={"t0": t0},
    ).log()
