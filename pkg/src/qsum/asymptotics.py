"""Two-level asymptotics: differences of consecutive sectorial solutions, their flatness
order, the level partition of adjacent pairs and q-Gevrey envelope fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from .errors import DomainError, InsufficientSignal, ParameterError
from .formal import EpsExpansion, inverse_fourier
from .geometry import AssociatedFamily, GoodCovering
from .synthesis import SectorialSolution

SQRT2PI = math.sqrt(2 * math.pi)


@dataclass
class CocycleSample:
    p: int
    eps_samples: np.ndarray
    diffs: np.ndarray             # max over probes of |u_{p+1} - u_p| per eps
    noise: np.ndarray             # noise floor per eps
    level_expected: int           # the order k1 or k2 expected from the geometry
    q: float
    forcing_diffs: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None    # max |u_p| over probes, for context

    def rows(self) -> List[str]:
        out = []
        for i, e in enumerate(self.eps_samples):
            fd = self.forcing_diffs[i] if self.forcing_diffs is not None else float("nan")
            out.append(f"{self.p},{abs(e):.17g},{self.diffs[i]:.17g},{self.noise[i]:.17g},{fd:.17g}")
        return out


def eps_magnitudes(overlap_radius: float, q: float, count: int) -> np.ndarray:
    """Geometric samples 0.8 R q^{-j/4}, j = 0..count-1."""
    return 0.8 * overlap_radius * q ** (-0.25 * np.arange(count))


def _physical(U: np.ndarray, z: np.ndarray, sol: SectorialSolution) -> np.ndarray:
    return inverse_fourier(U, z, sol.spec.mgrid, sol.spec.beta_prime)


def _fourier_gain(sol: SectorialSolution, z: np.ndarray) -> float:
    """Bound of the inverse Fourier map from sup-in-m to sup-over-z-probes."""
    mg = sol.spec.mgrid
    return float(np.sum(mg.weights * np.exp(np.abs(z.imag).max(initial=0) * np.abs(mg.nodes))) / SQRT2PI)


def cocycle_differences(solutions: Sequence[SectorialSolution], t_probes, z_probes, magnitudes,
                        covering: GoodCovering, level_flags: Sequence[int], k_levels: Tuple[int, int],
                        noise_factor: float = 10.0, with_forcing: bool = True) -> List[CocycleSample]:
    """|u^{p+1} - u^p| on the bisecting ray of each overlap, maximised over (t, z) probes."""
    n = len(solutions)
    t = np.atleast_1d(np.asarray(t_probes, dtype=complex))
    z = np.atleast_1d(np.asarray(z_probes, dtype=complex))
    mags = np.asarray(magnitudes, dtype=float)
    out = []
    for p in range(n):
        a, b = solutions[p], solutions[(p + 1) % n]
        ov = covering.overlap(p)
        if ov.radius is not None and np.any(mags >= ov.radius):
            raise DomainError(f"eps magnitude exceeds the radius {ov.radius:g} of overlap {p}")
        eps = mags * np.exp(1j * ov.direction)
        T = (eps[:, None] * t[None, :]).ravel()
        gain = _fourier_gain(a, z)

        def diff_of(fa, fb):
            ua = _physical(fa, z, a).reshape(eps.size, t.size, z.size)
            ub = _physical(fb, z, b).reshape(eps.size, t.size, z.size)
            return np.abs(ub - ua).max(axis=(1, 2)), np.abs(ua).max(axis=(1, 2))

        Ua, Ub = a.U(T), b.U(T)
        d, scale = diff_of(Ua, Ub)
        err = (a.error_estimate(T) + b.error_estimate(T)).reshape(eps.size, t.size).max(axis=1)
        noise = noise_factor * gain * err
        fdiff = None
        if with_forcing:
            fdiff, _ = diff_of(a.F(T), b.F(T))
        level = k_levels[0] if level_flags[p] == 1 else k_levels[1]
        out.append(CocycleSample(p, eps, d, noise, level, a.frame.q, fdiff, scale))
    return out


@dataclass
class FlatnessFit:
    a2: float
    a1: float
    a0: float
    k_est: float
    r_squared: float
    level_expected: int
    n_used: int
    n_excluded: int
    k_interval: Tuple[float, float]
    decades: float

    @property
    def passed(self) -> bool:
        return (abs(self.k_est - self.level_expected) / self.level_expected <= 0.2
                and self.r_squared >= 0.98)

    def as_dict(self) -> dict:
        return {"a2": self.a2, "a1": self.a1, "a0": self.a0, "k_est": self.k_est,
                "r_squared": self.r_squared, "k_expected": self.level_expected,
                "n_used": self.n_used, "n_excluded": self.n_excluded,
                "k_interval": list(self.k_interval), "decades": self.decades, "pass": self.passed}


def fit_log_quadratic(eps_abs, values, q: float, level_expected: int,
                      noise=None) -> FlatnessFit:
    x_all = np.log(np.asarray(eps_abs, dtype=float))
    v = np.asarray(values, dtype=float)
    floor = np.zeros_like(v) if noise is None else np.asarray(noise, dtype=float)
    keep = (v > floor) & (v > 0)
    n_ex = int((~keep).sum())
    if n_ex > v.size / 2:
        raise InsufficientSignal(f"{n_ex} of {v.size} differences sit at the noise floor")
    x, y = x_all[keep], np.log(v[keep])
    if x.size < 3:
        raise InsufficientSignal("a quadratic fit needs at least three usable samples")
    A = np.vstack([x**2, x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    lq = math.log(q)
    dof = max(x.size - 3, 1)
    cov = ss_res / dof * np.linalg.pinv(A.T @ A)
    se_k = 2 * lq * math.sqrt(max(cov[0, 0], 0.0))
    k_est = -2 * coef[0] * lq
    ci = (k_est - 2 * se_k, k_est + 2 * se_k)
    decades = float((x.max() - x.min()) / math.log(10))
    return FlatnessFit(float(coef[0]), float(coef[1]), float(coef[2]), float(k_est), float(r2),
                       int(level_expected), int(x.size), n_ex, ci, decades)


def fit_flatness_order(sample: CocycleSample, use_noise: bool = True) -> FlatnessFit:
    """Least-squares log|diff| = a2 log^2|eps| + a1 log|eps| + a0; k_est = -2 a2 log q."""
    return fit_log_quadratic(np.abs(sample.eps_samples), sample.diffs, sample.q,
                             sample.level_expected, sample.noise if use_noise else None)


def classify_levels(family: AssociatedFamily) -> Dict[str, List[int]]:
    """Partition of the adjacent pairs by the geometric test recorded in the family."""
    I1 = [p for p, f in enumerate(family.level_flags) if f == 1]
    I2 = [p for p, f in enumerate(family.level_flags) if f == 2]
    return {"I1": I1, "I2": I2}


# ---------------------------------------------------------------- q-Gevrey envelope

@dataclass
class EnvelopeFit:
    C: float
    A: float
    k: float
    q: float
    rows: List[dict]
    n_excluded: int

    @property
    def slack(self) -> float:
        return min((r["slack"] for r in self.rows if r["used"]), default=float("nan"))

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.C) and np.isfinite(self.A) and self.slack >= -1e-9)

    def bound(self, N: int, eps_abs: float) -> float:
        return self.C * self.A ** (N + 1) * self.q ** (N * (N + 1) / (2 * self.k)) * eps_abs ** (N + 1)

    def table(self) -> List[str]:
        return [f"{r['N']},{r['eps']:.17g},{r['E_N']:.17g},{r['bound']:.17g},{r['slack']:.17g}"
                for r in self.rows]

    def as_dict(self) -> dict:
        return {"C": self.C, "A": self.A, "k": self.k, "slack": self.slack, "pass": self.passed,
                "n_excluded": self.n_excluded}


def _envelope_design(Ns, eps_abs, E, q: float, k: float):
    Ns = np.asarray(Ns, dtype=float)
    x = Ns + 1
    y = np.log(E) - Ns * (Ns + 1) / (2 * k) * math.log(q) - x * np.log(eps_abs)
    return x, y


def fit_envelope(Ns, eps_abs, E, q: float, k: float, floor=None) -> EnvelopeFit:
    """Tightest dominating envelope C A^{N+1} q^{N(N+1)/(2k)} |eps|^{N+1}.

    log C and log A solve the linear program minimising the total log-slack subject
    to domination of every sample above the floor.
    """
    Ns = np.asarray(Ns)
    eps_abs = np.asarray(eps_abs, dtype=float)
    E = np.asarray(E, dtype=float)
    floor = np.zeros_like(E) if floor is None else np.asarray(floor, dtype=float)
    used = (E > floor) & (E > 0)
    if not used.any():
        raise InsufficientSignal("every remainder sits at the noise floor")
    x, y = _envelope_design(Ns[used], eps_abs[used], E[used], q, k)
    res = linprog(c=[x.size, x.sum()], A_ub=-np.vstack([np.ones_like(x), x]).T, b_ub=-y,
                  bounds=[(-700, 700), (-200, 200)], method="highs")
    if not res.success:
        raise InsufficientSignal(f"envelope fit failed: {res.message}")
    logC, logA = res.x
    # the LP is tight to rounding; lift C so every used sample is dominated exactly
    logC += max(0.0, float(np.max(y - logC - x * logA)))
    C, A = math.exp(logC), math.exp(logA)
    fit = EnvelopeFit(C, A, float(k), float(q), [], int((~used).sum()))
    for N, e, val, u in zip(Ns, eps_abs, E, used):
        b = fit.bound(int(N), float(e))
        fit.rows.append({"N": int(N), "eps": float(e), "E_N": float(val), "bound": b,
                         "slack": (b - val) / b if b > 0 else float("nan"), "used": bool(u)})
    return fit


def min_A_for_C(Ns, eps_abs, E, q: float, k: float, C: float, floor=None) -> float:
    """Smallest A for which C A^{N+1} q^{..} |eps|^{N+1} dominates every sample above floor."""
    Ns = np.asarray(Ns)
    E = np.asarray(E, dtype=float)
    floor = np.zeros_like(E) if floor is None else np.asarray(floor, dtype=float)
    used = (E > floor) & (E > 0)
    if not used.any():
        return 0.0
    x, y = _envelope_design(Ns[used], np.asarray(eps_abs, dtype=float)[used], E[used], q, k)
    return float(math.exp(np.max((y - math.log(C)) / x)))


def remainder_samples(sol: SectorialSolution, expansion: EpsExpansion, N_range, eps_samples):
    """E_N(eps) = max over the expansion's (t, z) probes of |u - sum_{m<=N} h_m eps^m/m!|."""
    t = expansion.t_samples
    z = expansion.z_samples
    rows = []
    for e in np.atleast_1d(np.asarray(eps_samples, dtype=complex)):
        T = e * t
        u = _physical(sol.U(T), z, sol)                                        # (n_t, n_z)
        err = float(sol.error_estimate(T).max()) * _fourier_gain(sol, z)
        partial = np.zeros_like(u)
        mmax = expansion.h_profiles.shape[0] - 1
        for N in range(max(N_range) + 1):
            if N <= mmax:
                partial = partial + expansion.h_profiles[N] * e**N / math.factorial(N)
            if N in N_range:
                rows.append((N, abs(e), float(np.abs(u - partial).max()), err))
    return rows


def qgevrey_envelope_check(sol: SectorialSolution, expansion: EpsExpansion, k: float, N_range,
                           eps_samples, noise_factor: float = 10.0) -> EnvelopeFit:
    N_range = list(N_range)
    if max(N_range) >= expansion.h_profiles.shape[0]:
        raise ParameterError("the expansion does not reach the requested order")
    rows = remainder_samples(sol, expansion, N_range, eps_samples)
    Ns, eps_abs, E, err = (np.array(c) for c in zip(*rows))
    return fit_envelope(Ns, eps_abs, E, sol.frame.q, k, noise_factor * err)
