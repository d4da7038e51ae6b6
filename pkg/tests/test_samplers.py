import math
from typing import Callable

import numpy as np
import pytest
from scipy import special, stats

from bifbm.covariance import BifbmKernel, BifbmParams, CovKernel, FbmKernel, XKKernel
from bifbm.decomposition import covariance_target_z
from bifbm.ensemble import EnsembleRunner, replicate_seeds
from bifbm.errors import GridError, GridMismatchError, ParameterDomainError, QuadratureSchemeError
from bifbm.paths import Grid, Path
from bifbm.samplers import (
    BrownianDriver,
    CholeskySampler,
    CirculantFbmSampler,
    QuadratureScheme,
    SamplerSettings,
    XKQuadratureSampler,
    cholesky_sample,
    derivative_variance,
    derivative_variance_check,
    fbm_circulant,
    fgn_autocovariance,
    fubini_check,
    quadrature_covariance_error,
    quadrature_fidelity_check,
    time_change,
    xk_cholesky,
    xk_derivative,
    xk_quadrature,
)


def test_uniform_grid_points() -> None:
    grid = Grid.uniform(1.0, 4)
    assert grid.points.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert grid.includes_origin
    assert grid.step == 0.25
    interior = Grid.uniform(2.0, 4, include_origin=False)
    assert interior.points.tolist() == [0.5, 1.0, 1.5, 2.0]
    assert not interior.includes_origin


def test_grid_rejects_bad_points() -> None:
    with pytest.raises(GridError):
        Grid.from_points([0.0, 0.5, 0.5])
    with pytest.raises(GridError):
        Grid.from_points([-0.1, 0.5])
    with pytest.raises(GridError):
        Grid.from_points([])
    with pytest.raises(GridError):
        Grid.from_points([0.1, 0.3, 0.4]).step


def test_path_value_at_requires_grid_point() -> None:
    path = Path(Grid.uniform(1.0, 2), [0.0, 1.0, 2.0])
    assert path.value_at(0.5) == 1.0
    with pytest.raises(GridError):
        path.value_at(0.6)
    with pytest.raises(GridError):
        Path(Grid.uniform(1.0, 2), [0.0, 1.0])


def test_cholesky_is_deterministic_and_pins_origin() -> None:
    grid = Grid.uniform(1.0, 32)
    kernel = BifbmKernel(BifbmParams(0.5, 0.5))
    a = cholesky_sample(kernel, grid, 7)
    b = cholesky_sample(kernel, grid, 7)
    c = cholesky_sample(kernel, grid, 8)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values[0] == 0.0
    assert "origin pinned" in a.provenance[0]


def test_cholesky_sampler_matches_single_path_sampling() -> None:
    grid = Grid.uniform(2.0, 16)
    sampler = CholeskySampler(XKKernel(0.5), grid)
    seeds = [11, 12, 13]
    block = sampler.draw(seeds)
    for row, seed in zip(block, seeds):
        assert np.array_equal(row, xk_cholesky(grid, 0.5, seed).values)


def test_runner_output_independent_of_workers() -> None:
    grid = Grid.uniform(1.0, 24)
    sampler = CholeskySampler(BifbmKernel(BifbmParams(0.6, 0.75)), grid)
    seeds = replicate_seeds(42, 37)
    serial = EnsembleRunner(workers=1, block_size=5).run(sampler.draw, seeds)
    threaded = EnsembleRunner(workers=4, block_size=5).run(sampler.draw, seeds)
    assert np.array_equal(serial, threaded)


def test_fgn_autocovariance_of_brownian_noise() -> None:
    assert fgn_autocovariance(4, 0.5).tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_circulant_fbm_path_shape_and_origin() -> None:
    path = fbm_circulant(64, 2.0, 0.75, 3)
    assert len(path.values) == 65
    assert path.values[0] == 0.0
    assert path.grid.horizon == 2.0
    assert np.array_equal(path.values, fbm_circulant(64, 2.0, 0.75, 3).values)


def test_circulant_embedding_is_nonnegative_for_common_h() -> None:
    for h in (0.1, 0.3, 0.45, 0.5, 0.75, 0.9):
        sampler = CirculantFbmSampler(256, 1.0, h)
        assert sampler.fallback is None
        assert sampler.provenance == [f"circulant h={h:g}"]


def test_circulant_terminal_variance() -> None:
    sampler = CirculantFbmSampler(64, 1.0, 0.75)
    values = sampler.draw(replicate_seeds(5, 4000))[:, -1]
    # Var(B_1) = 1; 4 standard errors of the sample variance
    assert abs(float(np.mean(values**2)) - 1.0) < 4.0 * np.sqrt(2.0 / 4000)


def test_circulant_needs_two_steps() -> None:
    with pytest.raises(GridError):
        CirculantFbmSampler(1, 1.0, 0.5)


def test_quadrature_scheme_validation() -> None:
    with pytest.raises(QuadratureSchemeError):
        QuadratureScheme(1.0, 1.0, 16)
    with pytest.raises(QuadratureSchemeError):
        QuadratureScheme(1e-3, 1e3, 1)
    with pytest.raises(QuadratureSchemeError):
        QuadratureScheme(spacing="uniform")


def test_narrow_quadrature_scheme_is_rejected() -> None:
    grid = Grid.from_points(np.linspace(0.1, 2.0, 20))
    with pytest.raises(QuadratureSchemeError):
        XKQuadratureSampler(grid, 0.5, QuadratureScheme(1e-2, 1e2, 64))


@pytest.mark.parametrize("K", [0.3, 0.5, 0.8])
def test_default_quadrature_covariance_error(K: float) -> None:
    assert quadrature_covariance_error(K) <= 1e-3


def test_quadrature_sampling_is_reproducible_from_driver() -> None:
    grid = Grid.uniform(1.0, 32)
    path, driver = xk_quadrature(grid, 0.5, None, 9)
    again = XKQuadratureSampler(grid, 0.5).from_driver(BrownianDriver.draw(QuadratureScheme(), 9))
    assert np.array_equal(path.values, again.values)
    assert path.values[0] == 0.0
    assert driver.seed_record == 9


def test_driver_from_other_scheme_is_rejected() -> None:
    grid = Grid.uniform(1.0, 8)
    driver = BrownianDriver.draw(QuadratureScheme(nodes=128), 1)
    with pytest.raises(QuadratureSchemeError):
        XKQuadratureSampler(grid, 0.5).from_driver(driver)


def test_derivative_refuses_grid_near_origin() -> None:
    driver = BrownianDriver.draw(QuadratureScheme(), 1)
    with pytest.raises(ParameterDomainError):
        xk_derivative(driver, Grid.uniform(1.0, 10), 0.5)
    y = xk_derivative(driver, Grid.from_points(np.linspace(0.1, 1.0, 10)), 0.5, t_floor=0.1)
    assert np.all(np.isfinite(y.values))


def test_derivative_floor_follows_grid_horizon() -> None:
    driver = BrownianDriver.draw(QuadratureScheme(), 1)
    # T = 20, so the default floor is 1.0
    with pytest.raises(ParameterDomainError):
        xk_derivative(driver, Grid.from_points(np.linspace(0.2, 20.0, 50)), 0.5)
    assert np.all(np.isfinite(xk_derivative(driver, Grid.from_points(np.linspace(1.0, 20.0, 50)), 0.5).values))
    relaxed = SamplerSettings(t_floor_fraction=0.01)
    assert np.all(np.isfinite(relaxed.derivative(driver, Grid.from_points(np.linspace(0.2, 20.0, 50)), 0.5).values))


def test_second_derivative_matches_finite_difference() -> None:
    h = 1e-3
    grid = Grid.from_points([1.0 - h, 1.0, 1.0 + h])
    for seed in replicate_seeds(3, 5):
        driver = BrownianDriver.draw(QuadratureScheme(), seed)
        first = xk_derivative(driver, grid, 0.5, order=1).values
        second = xk_derivative(driver, grid, 0.5, order=2).values[1]
        centred = (first[2] - first[0]) / (2.0 * h)
        assert abs(centred - second) <= 5e-2 * abs(second)


def test_derivative_variance_integral() -> None:
    scheme = QuadratureScheme()
    # the truncated tails are negligible, so this is Gamma(2-K) (2t)^{K-2}
    for t in (0.05, 1.0, 3.0):
        expected = special.gamma(1.5) * (2.0 * t) ** -1.5
        assert derivative_variance(t, 0.5, scheme) == pytest.approx(expected, rel=1e-6)


def test_derivative_variance_matches_theta_integral() -> None:
    report = derivative_variance_check(0.5, 2000, 7)
    assert report.passed, report.details
    assert report.details["t_floor"] == pytest.approx(0.05)
    assert report.details["truncation_gap"] < 1e-6
    narrow = derivative_variance_check(0.5, 200, 7, SamplerSettings(t_floor_fraction=0.2), horizon=2.0)
    assert narrow.details["t_floor"] == pytest.approx(0.4)


def test_fubini_identity_holds_pathwise() -> None:
    report = fubini_check(0.5, 3, 2024)
    assert report.passed, report.details


def test_time_change_requires_image_grid() -> None:
    target = Grid.uniform(1.0, 8)
    image = target.image(1.2)
    moved = time_change(Path(image, np.arange(9.0), "xk"), target, 1.2)
    assert moved.grid.same_as(target)
    assert moved.values.tolist() == list(np.arange(9.0))
    with pytest.raises(GridMismatchError):
        time_change(Path(target, np.arange(9.0), "xk"), target, 1.2)


@pytest.mark.slow
@pytest.mark.parametrize("K", [0.3, 0.5, 0.8])
def test_quadrature_fidelity_acceptance(K: float) -> None:
    report = quadrature_fidelity_check(K, 10_000, 2024, runner=EnsembleRunner(workers=4))
    assert report.passed, report.details


@pytest.mark.slow
def test_fubini_acceptance() -> None:
    assert fubini_check(0.5, 100, 2024).passed


def test_settings_reach_the_samplers() -> None:
    grid = Grid.uniform(1.0, 16)
    settings = SamplerSettings(QuadratureScheme(nodes=2048), jitter_ladder=(1e-10,), circulant_floor=-1.0)
    assert settings.xk(grid, 0.5).scheme.nodes == 2048
    assert settings.cholesky(BifbmKernel(BifbmParams(0.6, 0.75)), grid).jitter == 1e-10
    # a negative floor rejects every embedding
    fbm = settings.fbm(grid, 0.45)
    assert isinstance(fbm, CirculantFbmSampler)
    assert fbm.fallback is not None
    assert fbm.fallback.jitter == 1e-10
    assert isinstance(SamplerSettings().fbm(Grid.from_points([0.1, 0.5, 0.7]), 0.45), CholeskySampler)


def test_rejected_scheme_falls_back_to_cholesky() -> None:
    settings = SamplerSettings()
    grid = Grid.uniform(1.0, 16)
    assert isinstance(settings.xk_or_cholesky(grid, 0.5), XKQuadratureSampler)
    # theta_max^{-K} decays too slowly at K = 0.1
    assert QuadratureScheme().truncation_error(grid.points, 0.1) > 1e-3
    fallback = settings.xk_or_cholesky(grid, 0.1)
    assert isinstance(fallback, CholeskySampler)
    assert fallback.kernel == XKKernel(0.1)


def test_circulant_brownian_increments_are_white() -> None:
    steps = 1 << 17
    sampler = CirculantFbmSampler(steps, 1.0, 0.5)
    increments = np.diff(sampler.draw([11])[0])
    lag_one = float(np.sum(increments[1:] * increments[:-1]) / np.sum(increments**2))
    assert abs(lag_one) < 4.0 / math.sqrt(steps)
    scaled = increments**2 * steps
    assert abs(float(scaled.mean()) - 1.0) < 4.0 * math.sqrt(2.0 / steps)


@pytest.mark.slow
def test_circulant_pair_covariances() -> None:
    sampler = CirculantFbmSampler(512, 1.0, 0.75)
    values = EnsembleRunner(workers=4).run(sampler.draw, replicate_seeds(2024, 10_000))
    pairs = [(64, 64), (128, 128), (256, 256), (512, 512), (64, 128), (128, 256), (256, 512), (64, 512)]
    t = sampler.grid.points
    target = np.array([float(FbmKernel(0.75)(t[i], t[j])) for i, j in pairs])
    z, _ = covariance_target_z(values, target, pairs)
    assert float(np.max(z)) < 4.0, z


@pytest.mark.slow
def test_cholesky_brownian_increment_variance() -> None:
    grid = Grid.uniform(1.0, 255)
    sampler = CholeskySampler(FbmKernel(0.5), grid)
    increments = np.diff(EnsembleRunner(workers=4).run(sampler.draw, replicate_seeds(2024, 10_000)), axis=1)
    scaled = (increments**2 / grid.step).ravel()
    se = float(scaled.std(ddof=1)) / math.sqrt(scaled.size)
    assert abs(float(scaled.mean()) - 1.0) < 4.0 * se


def _bifbm_cholesky() -> tuple[CholeskySampler, CovKernel]:
    kernel = BifbmKernel(BifbmParams(0.6, 0.75))
    return CholeskySampler(kernel, Grid.uniform(1.0, 8)), kernel


def _fbm_circulant() -> tuple[CirculantFbmSampler, CovKernel]:
    return CirculantFbmSampler(8, 1.0, 0.45), FbmKernel(0.45)


def _xk_quadrature() -> tuple[XKQuadratureSampler, CovKernel]:
    return XKQuadratureSampler(Grid.uniform(1.0, 8), 0.5), XKKernel(0.5)


def _xk_cholesky() -> tuple[CholeskySampler, CovKernel]:
    return CholeskySampler(XKKernel(0.5), Grid.uniform(1.0, 8)), XKKernel(0.5)


@pytest.mark.slow
@pytest.mark.parametrize("build", [_bifbm_cholesky, _fbm_circulant, _xk_quadrature, _xk_cholesky])
def test_sampler_mean_covariance_and_normality(build: Callable[[], tuple[object, CovKernel]]) -> None:
    sampler, kernel = build()
    n_rep = 10_000
    values = EnsembleRunner(workers=4).run(sampler.draw, replicate_seeds(2024, n_rep))[:, 1:]
    t = sampler.grid.points[1:]

    mean_z = np.abs(values.mean(axis=0)) / (values.std(axis=0, ddof=1) / math.sqrt(n_rep))
    assert float(np.max(mean_z)) < 4.0, mean_z

    pairs = [(i, j) for i in range(t.size) for j in range(i, t.size)]
    target = np.array([float(kernel(t[i], t[j])) for i, j in pairs])
    z, _ = covariance_target_z(values, target, pairs)
    assert float(np.max(z)) < 4.0, z

    assert stats.normaltest(values[:, -1]).pvalue > 1e-3


@pytest.mark.slow
def test_derivative_variance_acceptance() -> None:
    report = derivative_variance_check(0.5, 10_000, 2024, runner=EnsembleRunner(workers=4))
    assert report.passed, report.details
