"""One-dimensional stochastic heat equation u_t = u_xx/2 + W(dt, dx) with zero
initial condition, observed at a fixed point x0.

u(t, x0) is the Wiener integral of the heat kernel against space-time white
noise; it is discretised on rectangular cells with the kernel averaged over
each cell. Its covariance is pi^{-1/2} times that of bifBm with H = K = 1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from bifbm.covariance import BifbmParams, FloatOrArray, _out, _times, bifbm_cov
from bifbm.decomposition import Z_TOLERANCE, probe_pairs
from bifbm.ensemble import STREAM_HEAT, Ensemble, EnsembleRunner, rng
from bifbm.errors import GridError, ParameterDomainError
from bifbm.logging_utils import log_event, timed
from bifbm.paths import Grid, Path
from bifbm.reports import CheckReport, report_params

HALF = BifbmParams(0.5, 0.5)
HEAT_TO_BIFBM_RATIO = 1.0 / math.sqrt(math.pi)
PROPORTIONALITY_CONSTANT = math.pi ** -0.25
TAIL_MASS_LIMIT = 1e-6

_LEGENDRE_NODES = 32
# cells ending within this many time steps of t get Gauss-Legendre in time
_NEAR_STEPS = 1.5
_SUB_BLOCK = 16


@dataclass(frozen=True, slots=True)
class SpaceTimeGrid:
    """Cells of size dt x dy covering [0, T] x [-L, L]."""

    horizon: float
    time_cells: int = 512
    space_cells: int = 256
    window: float = 0.0

    def __post_init__(self) -> None:
        if self.horizon <= 0.0:
            raise GridError(f"horizon must be positive, got {self.horizon}")
        if self.time_cells < 1 or self.space_cells < 1:
            raise GridError("space-time grid needs at least one cell in each direction")
        if self.window <= 0.0:
            object.__setattr__(self, "window", 8.0 * math.sqrt(self.horizon))

    @classmethod
    def default(cls, horizon: float) -> "SpaceTimeGrid":
        return cls(horizon=horizon)

    @property
    def dt(self) -> float:
        return self.horizon / self.time_cells

    @property
    def dy(self) -> float:
        """Space step L/space_cells; the window holds 2*space_cells cells."""
        return self.window / self.space_cells

    def time_edges(self) -> NDArray[np.float64]:
        return np.arange(self.time_cells + 1, dtype=np.float64) * self.dt

    def space_edges(self) -> NDArray[np.float64]:
        return -self.window + np.arange(2 * self.space_cells + 1, dtype=np.float64) * self.dy

    def tail_mass(self, x0: float = 0.0) -> float:
        """Heat-kernel mass from x0 falling outside [-L, L] at the horizon."""
        sd = math.sqrt(self.horizon)
        return float(special.ndtr((-self.window - x0) / sd) + special.ndtr((x0 - self.window) / sd))

    def validate(self, x0: float = 0.0) -> None:
        mass = self.tail_mass(x0)
        if mass >= TAIL_MASS_LIMIT:
            raise ParameterDomainError(
                f"space window [-{self.window:g}, {self.window:g}] loses kernel mass {mass:.2e} at x0={x0:g}"
            )

    def refined(self, factor: int = 2) -> "SpaceTimeGrid":
        return SpaceTimeGrid(self.horizon, self.time_cells * factor, self.space_cells * factor, self.window)


@dataclass(slots=True, eq=False)
class HeatPath(Path):
    x0: float = 0.0


def heat_cov_exact(t: ArrayLike, s: ArrayLike) -> FloatOrArray:
    t_arr, s_arr = _times(t, s)
    value = (np.sqrt(t_arr + s_arr) - np.sqrt(np.abs(t_arr - s_arr))) / math.sqrt(2.0 * math.pi)
    return _out(value)


def _space_weights(tau: NDArray[np.float64], edges: NDArray[np.float64], x0: float, dy: float) -> NDArray[np.float64]:
    """(1/dy) * integral of p_tau(x0 - y) over each space cell, exactly via the normal cdf."""
    cdf = special.ndtr((edges[None, :] - x0) / np.sqrt(tau)[:, None])
    return np.diff(cdf, axis=1) / dy


def heat_weights(grid: Grid, x0: float, stg: SpaceTimeGrid) -> NDArray[np.float64]:
    """Row i holds the cell-averaged kernel for u(t_i, x0), flattened (time cell, space cell)."""
    if grid.horizon > stg.horizon * (1.0 + 1e-12):
        raise GridError(f"grid reaches {grid.horizon:g} beyond the space-time horizon {stg.horizon:g}")
    t_edges = stg.time_edges()
    y_edges = stg.space_edges()
    dt, dy = stg.dt, stg.dy
    n_space = y_edges.size - 1
    used = int(np.searchsorted(t_edges, grid.horizon, side="left"))
    nodes, node_weights = np.polynomial.legendre.leggauss(_LEGENDRE_NODES)

    weights = np.zeros((len(grid), used, n_space), dtype=np.float64)
    for i, t in enumerate(grid.points):
        lower = t_edges[:-1][t_edges[:-1] < t]
        if lower.size == 0:
            continue
        upper = np.minimum(lower + dt, t)
        near = (t - lower) < _NEAR_STEPS * dt
        far = ~near
        if np.any(far):
            tau = t - 0.5 * (lower[far] + upper[far])
            weights[i, : lower.size][far] = _space_weights(tau, y_edges, x0, dy) * ((upper[far] - lower[far]) / dt)[:, None]
        for j in np.flatnonzero(near):
            a, b = t - upper[j], t - lower[j]
            tau = 0.5 * (b - a) * nodes + 0.5 * (b + a)
            rows = _space_weights(tau, y_edges, x0, dy)
            weights[i, j] = 0.5 * (b - a) * (node_weights @ rows) / dt
    return weights.reshape(len(grid), used * n_space)


def discretized_heat_covariance(grid: Grid, x0: float, stg: SpaceTimeGrid) -> NDArray[np.float64]:
    """Exact covariance matrix of the cell scheme on ``grid``."""
    a = heat_weights(grid, x0, stg)
    return (a @ a.T) * (stg.dt * stg.dy)


class HeatSimulator:
    def __init__(self, grid: Grid, x0: float = 0.0, stg: SpaceTimeGrid | None = None) -> None:
        self.grid = grid
        self.x0 = float(x0)
        self.stg = stg or SpaceTimeGrid.default(grid.horizon)
        self.stg.validate(self.x0)
        with timed("heat", "weights", message=f"times={len(grid)} cells={self.stg.time_cells}x{2 * self.stg.space_cells}"):
            self.weights = heat_weights(grid, self.x0, self.stg)
        self.cell_sd = math.sqrt(self.stg.dt * self.stg.dy)

    @property
    def cells(self) -> int:
        return int(self.weights.shape[1])

    @property
    def provenance(self) -> list[str]:
        return [f"heat dt={self.stg.dt:g} dy={self.stg.dy:g} L={self.stg.window:g} x0={self.x0:g}"]

    def draw(self, seeds: Sequence[int]) -> NDArray[np.float64]:
        out = np.empty((len(seeds), len(self.grid)), dtype=np.float64)
        for start in range(0, len(seeds), _SUB_BLOCK):
            chunk = seeds[start : start + _SUB_BLOCK]
            noise = np.empty((self.cells, len(chunk)), dtype=np.float64)
            for j, seed in enumerate(chunk):
                noise[:, j] = rng(seed).standard_normal(self.cells)
            out[start : start + len(chunk)] = (self.weights @ noise).T * self.cell_sd
        return out

    def sample(self, seed: int) -> HeatPath:
        return HeatPath(self.grid, self.draw([seed])[0], "heat", seed, self.provenance, self.x0)


def simulate_heat(grid: Grid, x0: float, stg: SpaceTimeGrid | None, seed: int) -> HeatPath:
    return HeatSimulator(grid, x0, stg).sample(seed)


def heat_ensemble(
    grid: Grid,
    n_rep: int,
    seed: int,
    stg: SpaceTimeGrid | None = None,
    x0: float = 0.0,
    runner: EnsembleRunner | None = None,
) -> tuple[Ensemble, HeatSimulator]:
    simulator = HeatSimulator(grid, x0, stg)
    runner = runner or EnsembleRunner()
    return runner.ensemble(simulator.draw, grid, seed, n_rep, STREAM_HEAT, "heat"), simulator


def bifbm_proportionality(
    n_rep: int,
    grid: Grid,
    seed: int,
    stg: SpaceTimeGrid | None = None,
    x0: float = 0.0,
    runner: EnsembleRunner | None = None,
    c_tolerance: float = 0.02,
) -> CheckReport:
    """Least-squares fit of c^2 in Cov(u) = c^2 R^{1/2,1/2} over the probe pairs."""
    if n_rep < 1000:
        raise ParameterDomainError(f"proportionality fit needs n_rep >= 1000, got {n_rep}")
    ensemble, simulator = heat_ensemble(grid, n_rep, seed, stg, x0, runner)
    pairs = [(i, j) for i, j in probe_pairs(grid) if grid.points[i] > 0.0 and grid.points[j] > 0.0]
    values = ensemble.values
    products = np.stack([values[:, i] * values[:, j] for i, j in pairs], axis=1)
    empirical = products.mean(axis=0)
    se = products.std(axis=0, ddof=1) / math.sqrt(n_rep)
    ti = np.array([grid.points[i] for i, _ in pairs])
    sj = np.array([grid.points[j] for _, j in pairs])
    kernel = np.asarray(bifbm_cov(ti, sj, HALF))
    c_sq = float(np.sum(empirical * kernel) / np.sum(kernel * kernel))
    c_hat = math.sqrt(max(c_sq, 0.0))

    scheme_cov = discretized_heat_covariance(grid, simulator.x0, simulator.stg)
    discretization = np.abs(np.array([scheme_cov[i, j] for i, j in pairs]) - np.asarray(heat_cov_exact(ti, sj)))
    residual = np.abs(empirical - c_sq * kernel)
    allowed = Z_TOLERANCE * se + discretization
    c_gap = abs(c_hat / PROPORTIONALITY_CONSTANT - 1.0)
    passed = bool(np.all(residual <= allowed)) and c_gap <= c_tolerance
    return CheckReport(
        check="heat_bifbm_proportionality",
        params=report_params(0.5, 0.5, grid.horizon, len(grid) - 1, len(grid)),
        statistic=c_gap,
        tolerance=c_tolerance,
        passed=passed,
        n_rep=n_rep,
        master_seed=seed,
        details={
            "c_hat": c_hat,
            "c_closed_form": PROPORTIONALITY_CONSTANT,
            "covariance_ratio_closed_form": HEAT_TO_BIFBM_RATIO,
            "probe_times": [[float(a), float(b)] for a, b in zip(ti, sj)],
            "residual": residual.tolist(),
            "residual_allowance": allowed.tolist(),
            "discretization_error": discretization.tolist(),
            "dt": simulator.stg.dt,
            "dy": simulator.stg.dy,
            "window": simulator.stg.window,
        },
    ).log()


def default_ratio_pairs() -> list[tuple[float, float]]:
    t = np.linspace(0.1, 4.0, 20)
    s = np.linspace(2.5, 0.05, 20)
    return [(float(a), float(b)) for a, b in zip(t, s)]


def heat_ratio_constancy(pairs: Sequence[tuple[float, float]] | None = None, tolerance: float = 1e-12) -> CheckReport:
    pairs = list(pairs) if pairs is not None else default_ratio_pairs()
    t = np.array([a for a, _ in pairs], dtype=np.float64)
    s = np.array([b for _, b in pairs], dtype=np.float64)
    mask = (t > 0.0) & (s > 0.0)
    ratio = np.asarray(heat_cov_exact(t[mask], s[mask])) / np.asarray(bifbm_cov(t[mask], s[mask], HALF))
    worst = float(np.max(np.abs(ratio / HEAT_TO_BIFBM_RATIO - 1.0))) if ratio.size else 0.0
    return CheckReport(
        check="heat_ratio_constancy",
        params=report_params(0.5, 0.5, None, None, int(mask.sum())),
        statistic=worst,
        tolerance=tolerance,
        passed=worst <= tolerance,
        details={"ratio": HEAT_TO_BIFBM_RATIO, "pairs": int(mask.sum())},
    ).log()


def refinement_check(grid: Grid, x0: float = 0.0, stg: SpaceTimeGrid | None = None) -> CheckReport:
    """Halving dt and dy shrinks the scheme's covariance error at every probe pair."""
    coarse = stg or SpaceTimeGrid.default(grid.horizon)
    fine = coarse.refined()
    pairs = [(i, j) for i, j in probe_pairs(grid) if grid.points[i] > 0.0 and grid.points[j] > 0.0]
    ti = np.array([grid.points[i] for i, _ in pairs])
    sj = np.array([grid.points[j] for _, j in pairs])
    exact = np.asarray(heat_cov_exact(ti, sj))
    errors = []
    for level in (coarse, fine):
        cov = discretized_heat_covariance(grid, x0, level)
        errors.append(np.abs(np.array([cov[i, j] for i, j in pairs]) - exact))
    coarse_err, fine_err = errors
    ratio = fine_err / np.maximum(coarse_err, np.finfo(np.float64).tiny)
    passed = bool(np.all(fine_err < coarse_err))
    log_event("heat", "refinement", result="pass" if passed else "fail", message=f"max_ratio={float(ratio.max()):.3f}")
    return CheckReport(
        check="heat_refinement",
        params=report_params(0.5, 0.5, grid.horizon, len(grid) - 1, len(grid)),
        statistic=float(ratio.max()),
        tolerance=1.0,
        passed=passed,
        details={
            "coarse_error": coarse_err.tolist(),
            "fine_error": fine_err.tolist(),
            "coarse_cells": [coarse.time_cells, 2 * coarse.space_cells],
            "fine_cells": [fine.time_cells, 2 * fine.space_cells],
        },
    )
