"""Sampling and statistical verification of the law identity
C1 X^{H,K} + B^{H,K} = C2 B^{HK}.

B^{H,K} is always drawn directly from its own covariance. The identity is only
used to check laws; subtracting an independent C1 X^{H,K} from C2 B^{HK} does
not give a bifractional Brownian motion (see ``subtraction_covariance``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats

from bifbm.covariance import (
    BifbmKernel,
    BifbmParams,
    FloatOrArray,
    XKKernel,
    _out,
    constants,
    fbm_cov,
    xk_cov,
)
from bifbm.ensemble import STREAM_BIFBM, STREAM_REFERENCE, STREAM_X, Ensemble, EnsembleRunner
from bifbm.errors import ParameterDomainError
from bifbm.logging_utils import log_event
from bifbm.paths import Grid, Path
from bifbm.reports import CheckReport, report_params
from bifbm.samplers import (
    DEFAULT_SETTINGS,
    CholeskySampler,
    CirculantFbmSampler,
    SamplerSettings,
    XKQuadratureSampler,
    time_change,
)

XMethod = Literal["quadrature", "cholesky"]

PROBE_FRACTIONS = (0.125, 0.5, 1.0)
Z_TOLERANCE = 4.0
KS_SIGNIFICANCE = 1e-3
MIN_LAW_REPLICATES = 1000


def probe_indices(grid: Grid) -> list[int]:
    return [grid.nearest_index(f * grid.horizon) for f in PROBE_FRACTIONS]


def probe_pairs(grid: Grid) -> list[tuple[int, int]]:
    a, b, c = probe_indices(grid)
    return [(a, a), (b, b), (c, c), (a, b), (b, c), (a, c)]


@dataclass(slots=True, eq=False)
class DecompositionSample:
    x_path: Path
    bifbm_path: Path
    sum_path: Path


class DecompositionSampler:
    """Independent draws of X^{H,K} (time-changed X^K) and B^{H,K} on one grid.

    The quadrature X sampler falls back to Cholesky when the scheme cannot
    cover the image grid for this K; ``x_method`` records the one in use.
    """

    def __init__(
        self,
        grid: Grid,
        p: BifbmParams,
        x_method: XMethod = "quadrature",
        settings: SamplerSettings = DEFAULT_SETTINGS,
    ) -> None:
        self.grid = grid
        self.p = p
        self.x_method = x_method
        self.constants = constants(p)
        self.c1 = 0.0 if p.is_fbm else self.constants.C1
        self.image = grid.image(2.0 * p.H)
        self.x_sampler: XKQuadratureSampler | CholeskySampler | None
        if p.is_fbm:
            self.x_sampler = None
        elif x_method == "quadrature":
            self.x_sampler = settings.xk_or_cholesky(self.image, p.K)
            if isinstance(self.x_sampler, CholeskySampler):
                self.x_method = "cholesky"
        elif x_method == "cholesky":
            self.x_sampler = settings.cholesky(XKKernel(p.K), self.image)
        else:
            raise ParameterDomainError(f"unknown x sampling method {x_method!r}")
        self.bifbm_sampler = settings.cholesky(BifbmKernel(p), grid)

    def draw_x(self, seeds: Sequence[int]) -> NDArray[np.float64]:
        if self.x_sampler is None:
            return np.zeros((len(seeds), len(self.grid)), dtype=np.float64)
        return self.x_sampler.draw(seeds)

    def draw_bifbm(self, seeds: Sequence[int]) -> NDArray[np.float64]:
        return self.bifbm_sampler.draw(seeds)

    def combine(self, x: NDArray[np.float64], bifbm: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.c1 * x + bifbm

    def sample(self, x_seed: int, bifbm_seed: int) -> DecompositionSample:
        if x_seed == bifbm_seed:
            raise ParameterDomainError("x and bifbm components need distinct seeds")
        x_values = self.draw_x([x_seed])[0]
        x_on_image = Path(self.image, x_values, "xk", x_seed, [f"x method={self.x_method}"])
        x_path = time_change(x_on_image, self.grid, 2.0 * self.p.H)
        bifbm_path = Path(self.grid, self.draw_bifbm([bifbm_seed])[0], "bifbm", bifbm_seed, self.bifbm_sampler.provenance)
        sum_path = Path(
            self.grid,
            self.combine(x_path.values, bifbm_path.values),
            "decomposition_sum",
            None,
            [f"C1={self.c1!r} x_seed={x_seed} bifbm_seed={bifbm_seed}"],
        )
        return DecompositionSample(x_path, bifbm_path, sum_path)

    def ensembles(
        self, n_rep: int, master_seed: int, runner: EnsembleRunner | None = None
    ) -> tuple[Ensemble, Ensemble, Ensemble]:
        runner = runner or EnsembleRunner()
        x = runner.ensemble(self.draw_x, self.grid, master_seed, n_rep, STREAM_X, "x_hk")
        bifbm = runner.ensemble(self.draw_bifbm, self.grid, master_seed, n_rep, STREAM_BIFBM, "bifbm")
        total = Ensemble(
            self.grid,
            self.combine(x.values, bifbm.values),
            list(x.seeds),
            master_seed,
            STREAM_X,
            "decomposition_sum",
            [f"C1={self.c1!r}", f"x method={self.x_method}"],
            {"x_hk": list(x.seeds), "bifbm": list(bifbm.seeds)},
        )
        return x, bifbm, total


def sample_decomposition(
    grid: Grid,
    p: BifbmParams,
    seeds: tuple[int, int],
    x_method: XMethod = "quadrature",
    settings: SamplerSettings = DEFAULT_SETTINGS,
) -> DecompositionSample:
    return DecompositionSampler(grid, p, x_method, settings).sample(*seeds)


def reference_sampler(grid: Grid, h: float, settings: SamplerSettings = DEFAULT_SETTINGS) -> CirculantFbmSampler | CholeskySampler:
    return settings.fbm(grid, h)


def reference_ensemble(
    grid: Grid,
    p: BifbmParams,
    n_rep: int,
    master_seed: int,
    runner: EnsembleRunner | None = None,
    settings: SamplerSettings = DEFAULT_SETTINGS,
) -> Ensemble:
    runner = runner or EnsembleRunner()
    sampler = reference_sampler(grid, p.HK, settings)
    ensemble = runner.ensemble(sampler.draw, grid, master_seed, n_rep, STREAM_REFERENCE, "fbm")
    ensemble.provenance.extend(sampler.provenance)
    return ensemble


def _product_moments(values: NDArray[np.float64], pairs: Sequence[tuple[int, int]]) -> tuple[NDArray, NDArray]:
    products = np.stack([values[:, i] * values[:, j] for i, j in pairs], axis=1)
    return products.mean(axis=0), products.var(axis=0, ddof=1)


def covariance_gap_z(
    left: NDArray[np.float64], right: NDArray[np.float64], pairs: Sequence[tuple[int, int]]
) -> NDArray[np.float64]:
    mean_l, var_l = _product_moments(left, pairs)
    mean_r, var_r = _product_moments(right, pairs)
    se = np.sqrt(var_l / left.shape[0] + var_r / right.shape[0])
    return np.abs(mean_l - mean_r) / np.maximum(se, np.finfo(np.float64).tiny)


def covariance_target_z(
    values: NDArray[np.float64], target: NDArray[np.float64], pairs: Sequence[tuple[int, int]]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """z-scores of the empirical covariance against closed-form targets, and their standard errors."""
    mean, var = _product_moments(values, pairs)
    se = np.sqrt(var / values.shape[0])
    return np.abs(mean - target) / np.maximum(se, np.finfo(np.float64).tiny), se


def verify_law_equality(
    n_rep: int,
    grid: Grid,
    p: BifbmParams,
    master_seed: int,
    runner: EnsembleRunner | None = None,
    reference_scale: float | None = None,
    x_method: XMethod = "quadrature",
    settings: SamplerSettings = DEFAULT_SETTINGS,
) -> CheckReport:
    """Compare C1 X^{H,K} + B^{H,K} ensembles with C2 B^{HK} ensembles at the probe times.

    ``reference_scale`` replaces C2 on the reference side; passing 1.0 is the
    negative control and must fail whenever K < 1.
    """
    if n_rep < MIN_LAW_REPLICATES:
        raise ParameterDomainError(f"law comparison needs n_rep >= {MIN_LAW_REPLICATES}, got {n_rep}")
    sampler = DecompositionSampler(grid, p, x_method, settings)
    scale = sampler.constants.C2 if reference_scale is None else float(reference_scale)
    _, _, total = sampler.ensembles(n_rep, master_seed, runner)
    reference = reference_ensemble(grid, p, n_rep, master_seed, runner, settings).scaled(scale)

    pairs = probe_pairs(grid)
    z = covariance_gap_z(total.values, reference.values, pairs)
    probes = probe_indices(grid)
    p_values = [float(stats.ks_2samp(total.values[:, i], reference.values[:, i]).pvalue) for i in probes]
    # a probe at the pinned origin carries no law information
    p_values = [1.0 if grid.points[i] == 0.0 else pv for i, pv in zip(probes, p_values)]
    max_z = float(np.max(z))
    passed = max_z < Z_TOLERANCE and min(p_values) > KS_SIGNIFICANCE
    check = "law_equality" if reference_scale is None else "law_equality_control"
    log_event(
        "decomposition",
        "verify_law_equality",
        check=check,
        result="pass" if passed else "fail",
        max_z=f"{max_z:.3f}",
        min_ks_p=f"{min(p_values):.3e}",
        scale=scale,
    )
    return CheckReport(
        check=check,
        params=report_params(p.H, p.K, grid.horizon, len(grid) - 1, len(grid)),
        statistic=max_z,
        tolerance=Z_TOLERANCE,
        passed=passed,
        n_rep=n_rep,
        master_seed=master_seed,
        details={
            "probe_times": [float(grid.points[i]) for i in probes],
            "covariance_z": z.tolist(),
            "ks_p_values": p_values,
            "ks_significance": KS_SIGNIFICANCE,
            "reference_scale": scale,
            "C1": sampler.c1,
            "C2": sampler.constants.C2,
            "x_method": sampler.x_method,
            "x_provenance": sampler.x_sampler.provenance if sampler.x_sampler is not None else [],
            "reference_provenance": reference.provenance,
        },
    )


def subtraction_covariance(t: ArrayLike, s: ArrayLike, p: BifbmParams) -> FloatOrArray:
    """Covariance of C2 B^{HK} - C1 X^{H,K} when the two inputs are independent.

    The cross term is what the coupled identity relies on; without it the
    variances add, so this is never R^{H,K}.
    """
    c = constants(p)
    two_h = 2.0 * p.H
    t_arr = np.asarray(t, dtype=np.float64)
    s_arr = np.asarray(s, dtype=np.float64)
    value = c.C2**2 * np.asarray(fbm_cov(t_arr, s_arr, p.HK)) + c.C1**2 * np.asarray(
        xk_cov(np.power(t_arr, two_h), np.power(s_arr, two_h), p.K)
    )
    return _out(value)


def sum_covariance_scaling(
    grid: Grid,
    p: BifbmParams,
    master_seed: int,
    n_small: int = 1000,
    n_large: int = 10000,
    runner: EnsembleRunner | None = None,
    x_method: XMethod = "quadrature",
    settings: SamplerSettings = DEFAULT_SETTINGS,
) -> CheckReport:
    """Standard errors of the sum covariance shrink like 1/sqrt(n_rep).

    Replicate seeds are prefix-stable, so the small ensemble is the first
    ``n_small`` rows of the large one.
    """
    sampler = DecompositionSampler(grid, p, x_method, settings)
    _, _, total = sampler.ensembles(n_large, master_seed, runner)
    pairs = probe_pairs(grid)
    target = np.array([sampler.constants.C2**2 * fbm_cov(grid.points[i], grid.points[j], p.HK) for i, j in pairs])
    z_small, se_small = covariance_target_z(total.values[:n_small], target, pairs)
    z_large, se_large = covariance_target_z(total.values, target, pairs)
    expected = math.sqrt(n_large / n_small)
    # the origin pair has zero variance on both sides
    usable = se_large > 0.0
    ratios = se_small[usable] / se_large[usable]
    ratio = float(np.mean(ratios)) if ratios.size else math.nan
    relative = abs(ratio - expected) / expected
    passed = relative <= 0.2 and float(np.max(z_small)) < Z_TOLERANCE and float(np.max(z_large)) < Z_TOLERANCE
    return CheckReport(
        check="sum_covariance_scaling",
        params=report_params(p.H, p.K, grid.horizon, len(grid) - 1, len(grid)),
        statistic=relative,
        tolerance=0.2,
        passed=passed,
        n_rep=n_large,
        master_seed=master_seed,
        details={
            "se_ratio": ratio,
            "expected_ratio": expected,
            "z_small": z_small.tolist(),
            "z_large": z_large.tolist(),
        },
    ).log()
