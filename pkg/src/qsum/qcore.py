"""q-calculus primitives: theta kernels, the Laplace normalisation and formal q-Borel maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Union

import numpy as np

from .errors import NonConvergence, ParameterError, PreconditionViolated

THETA_CAP = 10_000

Exponent = Union[int, Fraction]


def as_exponent(value) -> Fraction:
    """Coerce ints, Fractions and strings like ``"3/2"`` to a reduced Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        frac = Fraction(value).limit_denominator(10_000)
        if abs(float(frac) - value) > 1e-12:
            raise ParameterError(f"exponent {value} is not a small rational")
        return frac
    return Fraction(value)


def lcm_denominator(*values) -> int:
    out = 1
    for v in values:
        out = math.lcm(out, as_exponent(v).denominator)
    return out


@dataclass(frozen=True)
class QFrame:
    q: float
    k1: int
    k2: int

    def __post_init__(self):
        if not self.q > 1:
            raise ParameterError("q must exceed 1")
        if not (1 <= self.k1 < self.k2):
            raise ParameterError("orders must satisfy 1 <= k1 < k2")

    @property
    def kappa(self) -> Fraction:
        return 1 / (Fraction(1, self.k1) - Fraction(1, self.k2))

    @property
    def logq(self) -> float:
        return math.log(self.q)

    def qk(self, k) -> float:
        """The base q^{1/k} for a (possibly rational) order k."""
        return self.q ** (1.0 / float(k))

    def power(self, gamma) -> float:
        return self.q ** float(gamma)


@dataclass(frozen=True)
class FormalSeries:
    """Truncated series sum a_n T^n; ``coeffs[n]`` may be a scalar or an m-profile."""

    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=complex))

    @property
    def N(self) -> int:
        return self.coeffs.shape[0] - 1

    def __add__(self, other: "FormalSeries") -> "FormalSeries":
        return FormalSeries(self.coeffs + other.coeffs)

    def scale(self, c) -> "FormalSeries":
        return FormalSeries(c * self.coeffs)

    def evaluate(self, T):
        T = np.asarray(T, dtype=complex)
        powers = T[..., None] ** np.arange(self.N + 1)
        if self.coeffs.ndim == 1:
            return powers @ self.coeffs
        return np.tensordot(powers, self.coeffs, axes=([-1], [0]))


def _order_log(frame: QFrame, k) -> float:
    return frame.logq / float(k)


def theta_eval(frame: QFrame, k, x: complex, tol: float = 1e-16,
               cap: int = THETA_CAP, return_index: bool = False):
    """Direct Laurent summation of sum_n q^{-n(n-1)/(2k)} x^n over a symmetric window."""
    if x == 0:
        raise ParameterError("theta kernel needs x != 0")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    lk = _order_log(frame, k)
    lx = complex(np.log(complex(x)))

    def logterm(n):
        return -0.5 * n * (n - 1) * lk + n * lx

    peak = abs(lx.real / lk + 0.5)
    N = int(math.ceil(peak)) + 2
    while True:
        if N > cap:
            raise NonConvergence(f"theta truncation index {N} exceeds cap {cap}")
        n = np.arange(-N, N + 1)
        logs = logterm(n)
        shift = logs.real.max()
        total = np.exp(logs - shift).sum()
        edge = max(logterm(N + 1).real, logterm(-N - 1).real) - shift
        if abs(total) > 0 and edge < math.log(tol * abs(total)):
            break
        if abs(total) == 0 and edge < math.log(tol):
            break
        N = int(N * 1.5) + 2
    with np.errstate(over="ignore"):
        value = complex(total * np.exp(shift))
    if return_index:
        return value, N
    return value


@lru_cache(maxsize=64)
def _reduced_window(lk: float) -> np.ndarray:
    # for |y| in [qk^-1/2, qk^1/2] terms fall below 1e-20 relative once n(n-1)/2 - |n|/2 > 46/lk
    n = 1
    while 0.5 * n * (n - 1) * lk - 0.5 * n * lk < 46.0:
        n += 1
    return np.arange(-n - 1, n + 2)


def log_theta(frame: QFrame, k, x) -> np.ndarray:
    """Vectorised complex logarithm of the theta kernel via the functional equation.

    The argument is moved into the annulus |y| ~ 1 where a short sum is exact to
    rounding; the scaling factor is carried analytically so huge or tiny |x| never
    overflow. Zeros of the kernel give -inf real parts.
    """
    x = np.asarray(x, dtype=complex)
    lk = _order_log(frame, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.round(np.log(np.abs(x)) / lk)
        y = x * np.exp(-m * lk)
        n = _reduced_window(lk)
        coef = np.exp(-0.5 * n * (n - 1) * lk)
        # Horner in y; the window starts at n[0] < 0, carried as a power of y in the log
        poly = np.full(y.shape, coef[-1], dtype=complex)
        for c in coef[-2::-1]:
            poly = poly * y + c
        out = 0.5 * m * (m + 1) * lk + (m + n[0]) * np.log(y) + np.log(poly)
    return out


def theta_vec(frame: QFrame, k, x) -> np.ndarray:
    return np.exp(log_theta(frame, k, x))


@lru_cache(maxsize=64)
def theta_constant(q: float, k: float) -> float:
    """Numerical lower constant for |Theta(x)| / (dist(x) * envelope(x)).

    The ratio is invariant under x -> q^{1/k} x, so one fundamental annulus sampled
    densely in modulus and angle suffices. A 2% safety margin covers the gaps
    between samples.
    """
    frame = QFrame(q, 1, 2)
    lk = math.log(q) / k
    s = np.linspace(0.0, 1.0, 121, endpoint=False)
    ang = np.linspace(-np.pi, np.pi, 1441)
    S, A = np.meshgrid(s, ang)
    x = np.exp(S * lk + 1j * A)
    ratio = np.abs(np.exp(log_theta(frame, k, x) - _log_envelope(q, k, x)))
    dist = _zero_distance(q, k, x)
    good = dist > 1e-8
    return 0.98 * float(np.min(ratio[good] / dist[good]))


def _log_envelope(q: float, k, x) -> np.ndarray:
    lx = np.log(np.abs(x))
    return float(k) * lx**2 / (2 * math.log(q)) + 0.5 * lx


def _zero_distance(q: float, k, x, window: int = 3) -> np.ndarray:
    lk = math.log(q) / float(k)
    x = np.asarray(x, dtype=complex)
    centre = np.round(-np.log(np.abs(x)) / lk)
    best = np.full(x.shape, np.inf)
    for j in range(-window, window + 1):
        best = np.minimum(best, np.abs(1 + x * np.exp((centre + j) * lk)))
    return best


def theta_growth_check(frame: QFrame, k, x: complex, delta_tilde: float,
                       scan_cap: int = 200) -> dict:
    """Check the Gaussian-in-log lower bound for |Theta(x)| away from its zero set."""
    lk = _order_log(frame, k)
    centre = -math.log(abs(x)) / lk
    ms = np.arange(math.floor(centre) - scan_cap, math.ceil(centre) + scan_cap + 1)
    ms = ms[np.abs(ms) <= max(scan_cap, abs(centre) + scan_cap)]
    dist = np.min(np.abs(1 + x * np.exp(ms * lk)))
    if dist <= delta_tilde:
        raise PreconditionViolated(
            f"x={x} lies within {dist:.3g} <= delta_tilde of the theta zero set")
    C = theta_constant(frame.q, float(k))
    logval = log_theta(frame, k, np.array([x]))[0].real
    log_bound = math.log(C * delta_tilde) + float(_log_envelope(frame.q, k, np.array([x]))[0])
    ratio = math.exp(logval - log_bound)
    return {"holds": ratio >= 1.0, "ratio": ratio, "C": C, "distance": float(dist)}


def pi_q(frame: QFrame, k, tol: float = 1e-16) -> float:
    """Normalisation (log q / k) prod_{n>=0} (1 - q^{-(n+1)/k})^{-1}."""
    if tol <= 0:
        raise ParameterError("tol must be positive")
    lk = _order_log(frame, k)
    out = lk
    n = 0
    while True:
        factor = 1.0 / (1.0 - math.exp(-(n + 1) * lk))
        out *= factor
        n += 1
        if factor - 1.0 < tol:
            break
    return out


def laplace_norm(frame: QFrame, k) -> float:
    """Normaliser of the order-k Laplace kernel: the integral of dx / (x Theta(x)) over (0, inf).

    It equals log(q)/k, so the transform inverts the formal Borel transform on monomials.
    ``pi_q`` carries an extra product factor and would leave the round trip off by that factor.
    """
    return _order_log(frame, k)


def theta_integral(frame: QFrame, k, points_per_period: int = 64, span: float = 60.0) -> float:
    """Trapezoid value of the integral of dx / (x Theta(x)) in the variable s = log x."""
    lk = _order_log(frame, k)
    h = lk / points_per_period
    s = np.arange(-math.ceil(span / h), math.ceil(span / h) + 1) * h
    return float(np.sum(np.exp(-log_theta(frame, k, np.exp(s).astype(complex)).real)) * h)


def borel_weights(frame: QFrame, k, N: int) -> np.ndarray:
    n = np.arange(N + 1)
    return np.exp(-0.5 * n * (n - 1) * _order_log(frame, k))


def qborel_formal(series: FormalSeries, frame: QFrame, k) -> FormalSeries:
    w = borel_weights(frame, k, series.N)
    shape = (-1,) + (1,) * (series.coeffs.ndim - 1)
    return FormalSeries(series.coeffs * w.reshape(shape))


def qborel_inverse(series: FormalSeries, frame: QFrame, k) -> FormalSeries:
    w = borel_weights(frame, k, series.N)
    shape = (-1,) + (1,) * (series.coeffs.ndim - 1)
    return FormalSeries(series.coeffs / w.reshape(shape))


def shift_dilate(series: FormalSeries, frame: QFrame, sigma: int, j) -> FormalSeries:
    """Coefficients of T^sigma * a(q^j T), truncated at the same N."""
    j = as_exponent(j)
    c = series.coeffs
    out = np.zeros_like(c)
    n = np.arange(series.N + 1)
    scale = np.exp(float(j) * frame.logq * n)
    shape = (-1,) + (1,) * (c.ndim - 1)
    dil = c * scale.reshape(shape)
    if sigma <= series.N:
        out[sigma:] = dil[: series.N + 1 - sigma]
    return FormalSeries(out)


def qborel_shift_image(series: FormalSeries, frame: QFrame, k, sigma: int, j) -> FormalSeries:
    """Borel image of T^sigma sigma_q^j a, computed coefficientwise."""
    return qborel_formal(shift_dilate(series, frame, sigma, j), frame, k)


def qborel_shift_composite(series: FormalSeries, frame: QFrame, k, sigma: int, j) -> FormalSeries:
    """tau^sigma / (q^{1/k})^{sigma(sigma-1)/2} * sigma_q^{j - sigma/k} of the Borel image."""
    b = qborel_formal(series, frame, k)
    gamma = as_exponent(j) - Fraction(sigma) / as_exponent(k)
    shifted = shift_dilate(b, frame, sigma, gamma)
    factor = math.exp(-0.5 * sigma * (sigma - 1) * _order_log(frame, k))
    return FormalSeries(shifted.coeffs * factor)
