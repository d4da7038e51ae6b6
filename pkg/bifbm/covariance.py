"""Closed-form covariance kernels of the bifractional Brownian motion family.

Every function here is pure and vectorised: scalar arguments give a float,
array arguments broadcast and give an array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import ClassVar, Protocol, runtime_checkable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, linalg, special

from bifbm.errors import ParameterDomainError

FloatOrArray = float | NDArray[np.float64]

# High-precision reference values of the Gamma function on (0,1) and (1,2).
GAMMA_REFERENCE: dict[float, float] = {
    0.1: 9.5135076986687318,
    0.2: 4.5908437119988031,
    0.25: 3.6256099082219083,
    0.3: 2.9915689876875906,
    0.5: 1.7724538509055160,
    0.75: 1.2254167024651776,
    0.9: 1.0686287021193194,
    1.25: 0.90640247705547708,
    1.5: 0.88622692545275801,
    1.75: 0.91906252684888323,
}


@dataclass(frozen=True, slots=True)
class BifbmParams:
    H: float
    K: float
    HK: float = field(init=False)

    def __post_init__(self) -> None:
        H = float(self.H)
        K = float(self.K)
        if not 0.0 < H < 1.0:
            raise ParameterDomainError(f"H must lie in (0, 1), got {H}")
        if not 0.0 < K <= 1.0:
            raise ParameterDomainError(f"K must lie in (0, 1], got {K}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "HK", H * K)

    @property
    def is_fbm(self) -> bool:
        return self.K == 1.0


@dataclass(frozen=True, slots=True)
class DecompositionConstants:
    H: float
    K: float
    C2: float
    C_HK: float
    # E|xi|^{1/HK}: the moment the 1/HK-variation of fBm(HK) actually converges to
    C_variation: float
    c1_value: float | None = None
    c3_value: float | None = None
    c_bound_value: float | None = None

    @property
    def C1(self) -> float:
        return _defined(self.c1_value, "C1", self.K)

    @property
    def C3(self) -> float:
        return _defined(self.c3_value, "C3", self.K)

    @property
    def C_bound(self) -> float:
        return _defined(self.c_bound_value, "C_bound", self.K)

    def as_dict(self) -> dict[str, float | None]:
        return {
            "C1": self.c1_value,
            "C2": self.C2,
            "C3": self.c3_value,
            "C_HK": self.C_HK,
            "C_variation": self.C_variation,
            "C_bound": self.c_bound_value,
        }


def _defined(value: float | None, name: str, K: float) -> float:
    if value is None:
        raise ParameterDomainError(f"{name} is undefined at K={K}: Gamma(1-K) has a pole")
    return value


def _check_hurst(h: float) -> float:
    h = float(h)
    if not 0.0 < h < 1.0:
        raise ParameterDomainError(f"Hurst index must lie in (0, 1), got {h}")
    return h


def _check_open_k(K: float) -> float:
    K = float(K)
    if not 0.0 < K < 1.0:
        raise ParameterDomainError(f"X^K requires K strictly inside (0, 1), got {K}")
    return K


def _times(t: ArrayLike, s: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    t_arr = np.asarray(t, dtype=np.float64)
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(s_arr < 0.0):
        raise ParameterDomainError("covariance arguments must be nonnegative times")
    return t_arr, s_arr


def _out(value: NDArray[np.float64]) -> FloatOrArray:
    if np.ndim(value) == 0:
        return float(value)
    return value


def _lag_power(t: NDArray[np.float64], s: NDArray[np.float64], exponent: float) -> NDArray[np.float64]:
    # |t-s|^e is exactly zero on the diagonal
    lag = np.abs(t - s)
    return np.where(lag > 0.0, np.power(lag, exponent), 0.0)


def fbm_cov(t: ArrayLike, s: ArrayLike, h: float) -> FloatOrArray:
    h = _check_hurst(h)
    t_arr, s_arr = _times(t, s)
    two_h = 2.0 * h
    value = 0.5 * ((np.power(t_arr, two_h) + np.power(s_arr, two_h)) - _lag_power(t_arr, s_arr, two_h))
    return _out(value)


def bifbm_cov(t: ArrayLike, s: ArrayLike, p: BifbmParams) -> FloatOrArray:
    if p.is_fbm:
        return fbm_cov(t, s, p.H)
    t_arr, s_arr = _times(t, s)
    two_h = 2.0 * p.H
    a = np.power(t_arr, two_h)
    b = np.power(s_arr, two_h)
    # (|t-s|^{2H})^K keeps R(0, s) = 0 exact: both terms follow the same path
    lag = _lag_power(t_arr, s_arr, two_h)
    value = 2.0 ** (-p.K) * (np.power(a + b, p.K) - np.power(lag, p.K))
    return _out(value)


def xk_cov(t: ArrayLike, s: ArrayLike, K: float) -> FloatOrArray:
    K = _check_open_k(K)
    t_arr, s_arr = _times(t, s)
    scale = special.gamma(1.0 - K) / K
    value = scale * (np.power(t_arr, K) + np.power(s_arr, K) - np.power(t_arr + s_arr, K))
    return _out(value)


def abs_normal_moment(a: float) -> float:
    """E|xi|^a for a standard normal xi."""
    if a <= -1.0:
        raise ParameterDomainError(f"E|xi|^a diverges for a <= -1, got {a}")
    return float(2.0 ** (a / 2.0) * special.gamma((a + 1.0) / 2.0) / math.sqrt(math.pi))


def constants(p: BifbmParams) -> DecompositionConstants:
    K = p.K
    c2 = 2.0 ** ((1.0 - K) / 2.0)
    c_hk = abs_normal_moment(p.HK)
    c_var = abs_normal_moment(1.0 / p.HK)
    if p.is_fbm:
        return DecompositionConstants(H=p.H, K=K, C2=c2, C_HK=c_hk, C_variation=c_var)
    gamma_1mk = float(special.gamma(1.0 - K))
    return DecompositionConstants(
        H=p.H,
        K=K,
        C2=c2,
        C_HK=c_hk,
        C_variation=c_var,
        c1_value=math.sqrt(2.0 ** (-K) * K / gamma_1mk),
        c3_value=gamma_1mk / K * (2.0 - 2.0**K),
        c_bound_value=4.0 * p.H**2 * (1.0 - K) * gamma_1mk,
    )


def _grid_points(grid: object) -> NDArray[np.float64]:
    points = getattr(grid, "points", grid)
    arr = np.asarray(points, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ParameterDomainError("grid must be nonempty")
    return arr


def decomposition_residual(grid: object, p: BifbmParams) -> float:
    """Largest kernel-level gap in C1^2 gamma^K(t^2H, s^2H) + R^{H,K} = C2^2 R_fBm(HK)."""
    _check_open_k(p.K)
    points = _grid_points(grid)
    c = constants(p)
    t, s = np.meshgrid(points, points, indexing="ij")
    two_h = 2.0 * p.H
    lhs = c.C1**2 * xk_cov(np.power(t, two_h), np.power(s, two_h), p.K) + bifbm_cov(t, s, p)
    rhs = c.C2**2 * fbm_cov(t, s, p.HK)
    return float(np.max(np.abs(lhs - rhs)))


def increment_variance(t: ArrayLike, s: ArrayLike, p: BifbmParams) -> FloatOrArray:
    value = bifbm_cov(t, t, p) + bifbm_cov(s, s, p) - 2.0 * np.asarray(bifbm_cov(t, s, p))
    return _out(np.asarray(value, dtype=np.float64))


def quasi_helix_bounds(t: ArrayLike, s: ArrayLike, p: BifbmParams) -> tuple[FloatOrArray, FloatOrArray]:
    t_arr, s_arr = _times(t, s)
    lag = _lag_power(t_arr, s_arr, 2.0 * p.HK)
    return _out(2.0 ** (-p.K) * lag), _out(2.0 ** (1.0 - p.K) * lag)


def quasi_helix_violation(points: ArrayLike, p: BifbmParams) -> float:
    """Largest relative amount by which an increment variance leaves its quasi-helix band.

    Zero or negative means both inequalities hold on every pair.
    """
    x = np.asarray(points, dtype=np.float64)
    t, s = np.meshgrid(x, x, indexing="ij")
    v = np.asarray(increment_variance(t, s, p))
    lower, upper = quasi_helix_bounds(t, s, p)
    scale = np.maximum(np.asarray(upper), np.finfo(np.float64).tiny)
    off_diagonal = t != s
    excess = np.maximum(np.asarray(lower) - v, v - np.asarray(upper)) / scale
    if not np.any(off_diagonal):
        return 0.0
    return float(np.max(excess[off_diagonal]))


def self_similarity_error(points: ArrayLike, p: BifbmParams, scale: float) -> float:
    x = np.asarray(points, dtype=np.float64)
    t, s = np.meshgrid(x, x, indexing="ij")
    scaled = np.asarray(bifbm_cov(scale * t, scale * s, p))
    expected = scale ** (2.0 * p.HK) * np.asarray(bifbm_cov(t, s, p))
    denom = np.maximum(np.abs(expected), np.finfo(np.float64).tiny)
    mask = np.abs(expected) > 0.0
    if not np.any(mask):
        return float(np.max(np.abs(scaled)))
    return float(np.max(np.abs(scaled - expected)[mask] / denom[mask]))


def xk_variance(t: ArrayLike, K: float) -> FloatOrArray:
    c3 = special.gamma(1.0 - _check_open_k(K)) / K * (2.0 - 2.0**K)
    return _out(c3 * np.power(np.asarray(t, dtype=np.float64), K))


def xk_derivative_variance(t: ArrayLike, K: float, order: int = 1) -> FloatOrArray:
    """Variance of the order-n derivative of X^K: Gamma(2n-K) (2t)^{K-2n}."""
    K = _check_open_k(K)
    if order < 1:
        raise ParameterDomainError(f"derivative order must be >= 1, got {order}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0.0):
        raise ParameterDomainError("derivative variance diverges at t <= 0")
    return _out(special.gamma(2.0 * order - K) * np.power(2.0 * t_arr, K - 2.0 * order))


def xk_derivative_variance_quad(t: float, K: float, order: int = 1) -> float:
    K = _check_open_k(K)
    exponent = 2.0 * order - 1.0 - K
    value, _ = integrate.quad(lambda theta: theta**exponent * math.exp(-2.0 * theta * t), 0.0, math.inf, limit=200)
    return float(value)


def xk_mixed_partial(s: ArrayLike, t: ArrayLike, H: float, K: float) -> FloatOrArray:
    """d^2/(ds dt) of gamma^K(s^2H, t^2H) in closed form."""
    _check_hurst(H)
    K = _check_open_k(K)
    s_arr = np.asarray(s, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    c_bound = 4.0 * H**2 * (1.0 - K) * special.gamma(1.0 - K)
    two_h = 2.0 * H
    value = c_bound * np.power(s_arr * t_arr, two_h - 1.0) * np.power(
        np.power(s_arr, two_h) + np.power(t_arr, two_h), K - 2.0
    )
    return _out(value)


def xk_mixed_partial_fd(s: float, t: float, H: float, K: float, rel_step: float = 1e-3) -> float:
    h = rel_step * min(s, t)
    two_h = 2.0 * H

    def f(a: float, b: float) -> float:
        return float(xk_cov(a**two_h, b**two_h, K))

    return (f(s + h, t + h) - f(s + h, t - h) - f(s - h, t + h) + f(s - h, t - h)) / (4.0 * h * h)


def validate_gamma() -> float:
    xs = np.array(list(GAMMA_REFERENCE), dtype=np.float64)
    ref = np.array(list(GAMMA_REFERENCE.values()), dtype=np.float64)
    return float(np.max(np.abs(special.gamma(xs) - ref) / ref))


@runtime_checkable
class CovKernel(Protocol):
    name: ClassVar[str]

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray: ...

    def gram(self, points: ArrayLike) -> NDArray[np.float64]: ...

    def describe(self) -> dict[str, float | str]: ...


class KernelBase:
    __slots__ = ()
    name: ClassVar[str] = "kernel"

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray:
        raise NotImplementedError

    def gram(self, points: ArrayLike, block: int = 2048) -> NDArray[np.float64]:
        x = np.asarray(points, dtype=np.float64).ravel()
        out = np.empty((x.size, x.size), dtype=np.float64)
        for start in range(0, x.size, block):
            stop = min(start + block, x.size)
            out[start:stop] = self(x[start:stop, None], x[None, :])
        return out

    def describe(self) -> dict[str, float | str]:
        return {"kernel": self.name}


@dataclass(frozen=True, slots=True)
class BifbmKernel(KernelBase):
    params: BifbmParams
    name: ClassVar[str] = "bifbm"

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray:
        return bifbm_cov(t, s, self.params)

    def describe(self) -> dict[str, float | str]:
        return {"kernel": self.name, "H": self.params.H, "K": self.params.K}


@dataclass(frozen=True, slots=True)
class FbmKernel(KernelBase):
    h: float
    name: ClassVar[str] = "fbm"

    def __post_init__(self) -> None:
        _check_hurst(self.h)

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray:
        return fbm_cov(t, s, self.h)

    def describe(self) -> dict[str, float | str]:
        return {"kernel": self.name, "h": self.h}


@dataclass(frozen=True, slots=True)
class XKKernel(KernelBase):
    K: float
    name: ClassVar[str] = "xk"

    def __post_init__(self) -> None:
        _check_open_k(self.K)

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray:
        return xk_cov(t, s, self.K)

    def describe(self) -> dict[str, float | str]:
        return {"kernel": self.name, "K": self.K}


@dataclass(frozen=True, slots=True)
class TimeChangedKernel(KernelBase):
    """k(t^e, s^e); with e = 2H and base gamma^K this is the covariance of X^{H,K}."""

    base: CovKernel
    exponent: float
    name: ClassVar[str] = "time_changed"

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray:
        t_arr, s_arr = _times(t, s)
        return self.base(np.power(t_arr, self.exponent), np.power(s_arr, self.exponent))

    def describe(self) -> dict[str, float | str]:
        return {**self.base.describe(), "time_change_exponent": self.exponent}


@dataclass(frozen=True, slots=True)
class ScaledKernel(KernelBase):
    base: CovKernel
    factor: float
    name: ClassVar[str] = "scaled"

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray:
        return _out(self.factor * np.asarray(self.base(t, s), dtype=np.float64))

    def describe(self) -> dict[str, float | str]:
        return {**self.base.describe(), "variance_factor": self.factor}


@dataclass(frozen=True, slots=True)
class SumKernel(KernelBase):
    left: CovKernel
    right: CovKernel
    name: ClassVar[str] = "sum"

    def __call__(self, t: ArrayLike, s: ArrayLike) -> FloatOrArray:
        total = np.asarray(self.left(t, s), dtype=np.float64) + np.asarray(self.right(t, s), dtype=np.float64)
        return _out(total)

    def describe(self) -> dict[str, float | str]:
        return {"kernel": self.name, "left": self.left.name, "right": self.right.name}


def x_hk_kernel(p: BifbmParams) -> TimeChangedKernel:
    return TimeChangedKernel(XKKernel(p.K), 2.0 * p.H)


def gram_min_eigenvalue(kernel: CovKernel, points: ArrayLike) -> float:
    gram = kernel.gram(points)
    return float(linalg.eigvalsh(gram, subset_by_index=[0, 0], check_finite=False)[0])
