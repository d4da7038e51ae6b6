import math

import numpy as np
import pytest

from bifbm.analysis import (
    StepFunction,
    absolute_continuity_check,
    absolute_continuity_slope,
    holder_check,
    holder_exponent_estimate,
    l1_bound_sweep,
    l1_weight_bound_check,
    minkowski_gap,
    origin_growth_probe,
    random_step_function,
    step_bilinear_form,
    step_norm_identity_residual,
    step_quadratic_form,
    strong_variation,
    strong_variation_check,
    variation,
    variation_estimate,
    variation_limit,
    variation_limit_check,
    variation_sweep,
    x_variation_vanishes,
)
from bifbm.covariance import BifbmKernel, BifbmParams, FbmKernel, XKKernel, abs_normal_moment, constants, x_hk_kernel
from bifbm.ensemble import Ensemble, EnsembleRunner, replicate_seeds, rng
from bifbm.errors import GridError, ParameterDomainError
from bifbm.paths import Grid, Path
from bifbm.samplers import CirculantFbmSampler


def linear_path(horizon: float, steps: int) -> Path:
    grid = Grid.uniform(horizon, steps)
    return Path(grid, grid.points.copy(), "linear")


def test_variation_of_linear_path_telescopes() -> None:
    assert variation(linear_path(1.0, 8), 1.0) == pytest.approx(1.0, rel=1e-15)
    assert variation(linear_path(1.0, 64), 2.0) == pytest.approx(1.0 / 64, rel=1e-12)


def test_variation_is_homogeneous() -> None:
    path = Path(Grid.uniform(1.0, 32), rng(3).standard_normal(33))
    alpha = 2.2
    assert variation(path.scaled(-1.7), alpha) == pytest.approx(1.7**alpha * variation(path, alpha), rel=1e-12)


def test_variation_rejects_non_uniform_grid() -> None:
    with pytest.raises(GridError):
        variation(Path(Grid.from_points([0.0, 0.1, 0.5]), [0.0, 1.0, 2.0]), 1.0)
    with pytest.raises(ParameterDomainError):
        variation(linear_path(1.0, 4), 0.0)


def test_strong_variation_of_simple_paths() -> None:
    grid = Grid.uniform(2.0, 2048)
    assert strong_variation(Path(grid, np.zeros(2049)), 2.0, 2.0**-10, 1.0) == 0.0
    assert strong_variation(Path(grid, grid.points.copy()), 1.0, 2.0**-10, 1.0) == pytest.approx(1.0, rel=1e-9)


def test_strong_variation_needs_aligned_eps() -> None:
    path = linear_path(2.0, 2048)
    with pytest.raises(GridError):
        strong_variation(path, 1.0, 1.5 * path.grid.step, 1.0)
    with pytest.raises(GridError):
        strong_variation(path, 1.0, 2.0**-10, 2.0)


def test_brownian_quadratic_variation() -> None:
    sampler = CirculantFbmSampler(1 << 14, 1.0, 0.5)
    values = sampler.draw(replicate_seeds(8, 20))
    qv = np.sum(np.diff(values, axis=1) ** 2, axis=1)
    assert float(qv.mean()) == pytest.approx(1.0, rel=0.01)


def test_variation_limit_uses_inverse_moment() -> None:
    p = BifbmParams(0.6, 0.8)
    expected = constants(p).C2 ** (1.0 / 0.48) * abs_normal_moment(1.0 / 0.48)
    assert variation_limit(p) == pytest.approx(expected, rel=1e-14)
    assert variation_limit(p, 2.0) == pytest.approx(2.0 * expected, rel=1e-14)


def test_variation_estimate_fields() -> None:
    p = BifbmParams(0.5, 0.5)
    estimate = variation_estimate(linear_path(1.0, 16), p)
    assert estimate.alpha == 4.0
    assert estimate.n == 16
    assert estimate.value == pytest.approx(16 * (1.0 / 16) ** 4, rel=1e-12)
    assert estimate.relative_gap == pytest.approx(abs(estimate.value / estimate.limit_prediction - 1.0))


def test_minkowski_sandwich() -> None:
    generator = rng(17)
    for alpha in (1.0, 1.5, 2.2):
        a = np.cumsum(generator.standard_normal(257))
        b = np.cumsum(generator.standard_normal(257))
        assert minkowski_gap(a, b, alpha) <= 1e-12
    with pytest.raises(ParameterDomainError):
        minkowski_gap(a, b, 0.5)


def test_variation_sweep_rows_and_divisibility() -> None:
    grid = Grid.uniform(1.0, 16)
    ensemble = Ensemble(grid, np.vstack([grid.points, 2.0 * grid.points]), [1, 2], 0)
    rows = variation_sweep(ensemble, 1.0, [4, 16])
    assert [row["n"] for row in rows] == [4, 16]
    assert rows[0]["mean"] == pytest.approx(1.5)
    with pytest.raises(GridError):
        variation_sweep(ensemble, 1.0, [5])


def test_x_variation_falls_with_n() -> None:
    report = x_variation_vanishes(0.75, 0.6, [16, 64, 256], 4, n_rep=20)
    assert report.details["strictly_decreasing"]
    assert report.passed, report.details


def test_x_variation_uses_horizon() -> None:
    p = BifbmParams(0.6, 0.75)
    report = x_variation_vanishes(p.K, p.H, [16, 64, 256], 4, n_rep=20, horizon=2.0)
    assert report.params["T"] == 2.0
    assert report.tolerance == pytest.approx(0.1 * variation_limit(p, 2.0))
    assert report.passed, report.details


def test_origin_growth_quantiles_are_ordered() -> None:
    report = origin_growth_probe(0.5, 1000, 9)
    assert math.isfinite(report.statistic)
    # C3 / log log(1/t) shrinks with k, so the deep percentiles sit below the shallow ones
    assert report.statistic < 1.0
    assert report.passed
    assert len(report.details["q99_by_k"]) == len(report.details["k"])
    assert report.details["q99_deep"] < report.details["q99_shallow"]
    scaled = report.details["scaled_variance"]
    # k runs from deep to shallow, so the scaled variance grows along the list
    assert all(a < b for a, b in zip(scaled, scaled[1:]))


def test_origin_growth_stays_below_one_over_e() -> None:
    with pytest.raises(ParameterDomainError):
        origin_growth_probe(0.5, 10, 1, k_min=1)
    with pytest.raises(ParameterDomainError):
        origin_growth_probe(0.5, 10, 1, k_split=20)


def test_step_quadratic_form_examples() -> None:
    p = BifbmParams(0.6, 0.75)
    assert step_quadratic_form(StepFunction.indicator(0.0, 1.5), BifbmKernel(p)) == pytest.approx(1.5 ** (2 * p.HK), rel=1e-14)
    assert step_quadratic_form(StepFunction([0.0, 1.0], [0.0]), BifbmKernel(p)) == 0.0
    two_pieces = StepFunction([0.0, 1.0, 2.0], [1.0, -1.0])
    assert step_quadratic_form(two_pieces, FbmKernel(0.5)) == pytest.approx(2.0, rel=1e-14)


def test_step_function_evaluation_and_refinement() -> None:
    phi = StepFunction([0.0, 1.0, 2.0], [3.0, -1.0])
    assert phi([0.0, 0.5, 1.0, 1.9, 2.0, 5.0]).tolist() == [3.0, 3.0, -1.0, -1.0, 0.0, 0.0]
    refined = phi.refine([0.5, 1.5, 3.0])
    assert refined.breakpoints.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    kernel = XKKernel(0.4)
    assert step_quadratic_form(refined, kernel) == pytest.approx(step_quadratic_form(phi, kernel), rel=1e-12)
    with pytest.raises(GridError):
        StepFunction([0.0, 1.0], [1.0, 2.0])


def test_quadratic_form_is_psd_and_bilinear() -> None:
    generator = rng(21)
    kernel = x_hk_kernel(BifbmParams(0.3, 0.4))
    for _ in range(20):
        phi = random_step_function(generator, 2.0)
        psi = random_step_function(generator, 2.0)
        assert step_quadratic_form(phi, kernel) >= -1e-10
        points = np.union1d(phi.breakpoints, psi.breakpoints)
        a, b = phi.refine(points), psi.refine(points)
        plus = StepFunction(points, a.levels + b.levels)
        minus = StepFunction(points, a.levels - b.levels)
        polar = (step_quadratic_form(plus, kernel) - step_quadratic_form(minus, kernel)) / 4.0
        assert step_bilinear_form(phi, psi, kernel) == pytest.approx(polar, abs=1e-12)


def test_norm_identity_on_step_functions() -> None:
    generator = rng(5)
    for H, K in [(0.3, 0.4), (0.6, 0.75), (0.6, 0.9)]:
        p = BifbmParams(H, K)
        for _ in range(10):
            assert step_norm_identity_residual(random_step_function(generator, 2.0), p) <= 1e-10


def test_l1_bound_on_unit_indicator() -> None:
    p = BifbmParams(0.6, 0.75)
    report = l1_weight_bound_check(StepFunction.indicator(0.0, 1.0), p)
    c = constants(p)
    assert report.statistic == pytest.approx(c.C3, rel=1e-13)
    assert report.tolerance == pytest.approx(c.C_bound / p.HK**2, rel=1e-13)
    assert report.passed
    assert l1_weight_bound_check(StepFunction([0.0, 2.0], [0.0]), p).passed


def test_l1_bound_sweep_passes() -> None:
    cases = [BifbmParams(H, K) for H in (0.3, 0.6) for K in (0.4, 0.9)]
    report = l1_bound_sweep(cases, 200, 2024)
    assert report.passed, report.details
    assert report.details["failures"] == 0


def test_roughness_of_linear_path_is_one() -> None:
    grid = Grid.uniform(1.0, 4096)
    ensemble = Ensemble(grid, grid.points[None, :], [0], 0)
    assert holder_exponent_estimate(ensemble) == pytest.approx(1.0, abs=1e-9)
    assert absolute_continuity_slope(grid.points, grid)[0] == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(GridError):
        holder_exponent_estimate(Ensemble(Grid.uniform(1.0, 64), np.zeros((1, 65)), [0], 0))


def test_absolute_continuity_of_xk_paths() -> None:
    report = absolute_continuity_check(0.5, 20, 2024)
    slopes = np.asarray(report.details["slopes"])
    assert slopes.shape == (20,)
    assert np.all(np.isfinite(slopes))
    assert report.details["aggregate"] == "median"
    assert report.details["lags"][0] == 2.0**-10
    assert report.details["lags"][-1] == 2.0**-4
    assert report.statistic > 0.8
    assert report.params["T"] == 2.0


def test_brownian_paths_are_not_absolutely_continuous() -> None:
    grid = Grid.from_points(0.1 + np.arange(1946) * 2.0**-10)
    generator = rng(17)
    steps = generator.standard_normal((20, len(grid) - 1)) * math.sqrt(2.0**-10)
    values = np.concatenate([np.zeros((20, 1)), np.cumsum(steps, axis=1)], axis=1)
    assert float(np.median(absolute_continuity_slope(values, grid))) < 0.7


@pytest.mark.slow
def test_absolute_continuity_acceptance() -> None:
    report = absolute_continuity_check(0.5, 200, 2024, runner=EnsembleRunner(workers=4))
    assert report.passed, report.details


@pytest.mark.slow
def test_brownian_roughness() -> None:
    sampler = CirculantFbmSampler(1 << 14, 1.0, 0.5)
    ensemble = EnsembleRunner().ensemble(sampler.draw, sampler.grid, 3, 50)
    assert 0.45 <= holder_exponent_estimate(ensemble) <= 0.55


@pytest.mark.slow
def test_holder_acceptance() -> None:
    report = holder_check(BifbmParams(0.6, 0.75), 1 << 14, 50, 2024, runner=EnsembleRunner(workers=4))
    assert report.passed, report.details


@pytest.mark.slow
def test_variation_limit_acceptance() -> None:
    report = variation_limit_check(BifbmParams(0.6, 0.8), 1 << 14, 100, 2024, runner=EnsembleRunner(workers=4))
    assert report.passed, report.details


@pytest.mark.slow
def test_strong_variation_acceptance() -> None:
    report = strong_variation_check(BifbmParams(0.6, 0.8), 1 << 14, 100, 2024, runner=EnsembleRunner(workers=4))
    assert report.passed, report.details


@pytest.mark.slow
def test_x_variation_acceptance() -> None:
    sweep = [1 << k for k in range(8, 15, 2)]
    report = x_variation_vanishes(0.8, 0.6, sweep, 2024, n_rep=20)
    assert report.passed, report.details


@pytest.mark.slow
def test_origin_growth_acceptance() -> None:
    assert origin_growth_probe(0.5, 1000, 2024).passed
