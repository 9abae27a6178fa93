"""Formal solutions: the coefficient recursion in T, forcing growth fits and the eps-expansion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import InsufficientData, ModeUnsupported, ParameterError, TruncationError
from .grids import MGrid, convolution_matrix, polyval, profile_norm
from .problem import ProblemSpec

SQRT2PI = math.sqrt(2 * math.pi)


def inverse_fourier(profile, z, mgrid: MGrid, beta_prime: Optional[float] = None,
                    tol: float = 1e-8) -> np.ndarray:
    """(2 pi)^{-1/2} times the integral of f(m) e^{izm} dm by the grid quadrature.

    ``profile`` may be a single profile or a stack (..., n_m); ``z`` scalar or array.
    """
    z = np.asarray(z, dtype=complex)
    if beta_prime is not None and np.any(np.abs(z.imag) >= beta_prime):
        raise ParameterError("inverse Fourier needs |Im z| < beta'")
    f = np.asarray(profile, dtype=complex)
    m = mgrid.nodes
    E = np.exp(1j * z[..., None] * m) * mgrid.weights            # z.shape + (n_m,)
    edge = np.abs(f[..., [0, -1]]).max() * np.exp(np.abs(z.imag).max(initial=0) * m[-1]) if f.size else 0
    top = np.abs(f).max(initial=0.0)
    if top > 0 and edge > tol * top:
        raise TruncationError(f"inverse Fourier boundary mass {edge / top:.2e}")
    return np.tensordot(f, E, axes=([-1], [-1])) / SQRT2PI if f.ndim > 1 else (E @ f) / SQRT2PI


# ---------------------------------------------------------------- recursion

@dataclass(frozen=True)
class CoefficientSeries:
    profiles: np.ndarray        # (N+1, n_m)
    eps: complex
    norms: np.ndarray

    @property
    def N(self) -> int:
        return self.profiles.shape[0] - 1

    def to_csv(self, path, mgrid: MGrid) -> None:
        rows = ["n,m,re_U,im_U"]
        for n, prof in enumerate(self.profiles):
            for m, v in zip(mgrid.nodes, prof):
                rows.append(f"{n},{m:.17g},{v.real:.17g},{v.imag:.17g}")
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")

    def norms_csv(self, path) -> None:
        rows = ["n,norm_beta_mu"] + [f"{n},{v:.17g}" for n, v in enumerate(self.norms)]
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def _conv_kernels(spec: ProblemSpec, tol: float):
    """K[l][h] convolution matrices for C_{l,h} with R_l, None where C vanishes."""
    out = []
    for i in range(spec.n_ell):
        row = []
        for h in range(spec.p1 + 1):
            c = spec.C_data[i, h]
            row.append(convolution_matrix(c, spec.R_ell[i], spec.mgrid, tol) if np.any(c) else None)
        out.append(row)
    return out


def solve_recursion(spec: ProblemSpec, eps: complex, N: int, conv_tol: float = 1e-8) -> CoefficientSeries:
    """Coefficients U_0..U_N of the formal solution, terms with negative index dropped."""
    if abs(eps) >= spec.eps0 and eps != 0:
        raise ParameterError("|eps| must be below eps0")
    lq = spec.frame.logq
    k1, k2 = spec.frame.k1, spec.frame.k2
    Qv = spec.Q_im()
    R1, R2 = spec.R_im(1), spec.R_im(2)
    K = _conv_kernels(spec, conv_tol)
    U = np.zeros((N + 1, spec.mgrid.n), dtype=complex)
    for n in range(N + 1):
        rhs = spec.F(n) * math.exp(n * lq)
        j = n - spec.d_D1
        if j >= 0:
            rhs = rhs + R1 * U[j] * math.exp((spec.d_D1 / k1 + 1) * j * lq)
        j = n - spec.d_D2
        if j >= 0:
            rhs = rhs + R2 * U[j] * math.exp((spec.d_D2 / k2 + 1) * j * lq)
        for i in range(spec.n_ell):
            d, de, Dl = spec.d_ell[i], spec.delta_ell[i], spec.Delta_ell[i]
            s = n - d
            if s < 0:
                continue
            acc = np.zeros(spec.mgrid.n, dtype=complex)
            for n1 in range(min(s, spec.p1) + 1):
                if K[i][n1] is not None:
                    acc += K[i][n1] @ U[s - n1]
            rhs = rhs + complex(eps) ** (Dl - d) * math.exp(s * de * lq) * acc / SQRT2PI
        U[n] = rhs / (Qv * math.exp(n * lq))
    norms = np.array([profile_norm(u, spec.mgrid, spec.beta, spec.mu) for u in U])
    return CoefficientSeries(U, complex(eps), norms)


# ---------------------------------------------------------------- forcing fit

@dataclass(frozen=True)
class ForcingData:
    F_profiles: np.ndarray
    norms: np.ndarray
    C_F: float
    T0: float
    level1_ok: bool
    level2_divergent: bool

    def as_dict(self) -> dict:
        return {"C_F": self.C_F, "T0": self.T0, "level1_ok": self.level1_ok,
                "level2_divergent": self.level2_divergent, "norms": [float(v) for v in self.norms]}


def fit_forcing(F: np.ndarray, frame, mgrid: MGrid, beta: float, mu: float) -> ForcingData:
    if F.shape[0] < 6:
        raise InsufficientData("forcing growth fit needs at least 6 coefficients")
    norms = np.array([profile_norm(f, mgrid, beta, mu) for f in F])
    n = np.arange(F.shape[0])
    l1 = math.log(frame.q) / frame.k1
    l2 = math.log(frame.q) / frame.k2
    nz = norms > 0
    if nz.sum() >= 2:
        y = np.log(norms[nz]) - 0.5 * n[nz] * (n[nz] - 1) * l1
        slope, intercept = np.polyfit(n[nz], y, 1)
        logT0 = -slope
        # raise the intercept until the envelope dominates every stored sample
        logC = float(np.max(y + n[nz] * logT0))
        C_F, T0 = math.exp(logC), math.exp(logT0)
        level1_ok = bool(np.all(np.log(norms[nz]) <= logC - n[nz] * logT0 + 0.5 * n[nz] * (n[nz] - 1) * l1 + 1e-12))
    elif nz.sum() == 1:
        C_F, T0, level1_ok = float(norms[nz][0]), 1.0, True
    else:
        C_F, T0, level1_ok = 0.0, 1.0, True
    # level-k2 Borel coefficients: divergence shows up as growth over the stored range
    b2 = np.where(nz, norms * np.exp(-0.5 * n * (n - 1) * l2), 0.0)
    idx = np.nonzero(nz)[0]
    level2_divergent = False
    if idx.size >= 3:
        tail = b2[idx]
        third = max(1, idx.size // 3)
        level2_divergent = bool(tail[-third:].max() > 10 * tail[:third].max()
                                and tail[-1] >= tail[-2] * 0.999)
    return ForcingData(F, norms, C_F, T0, level1_ok, level2_divergent)


def build_forcing(spec: ProblemSpec, N: int = 15) -> ForcingData:
    return fit_forcing(spec.F_series(N), spec.frame, spec.mgrid, spec.beta, spec.mu)


# ---------------------------------------------------------------- eps expansion

@dataclass
class EpsExpansion:
    """h_m(t, z) = sum_n t^n IF(H[m][n])(z); H stored as (N_eps+1, N_eps+1, n_m)."""

    H: np.ndarray
    Fh: np.ndarray
    t_samples: np.ndarray
    z_samples: np.ndarray
    h_profiles: np.ndarray      # h_m at the sample grid, shape (N_eps+1, n_t, n_z)
    f_profiles: np.ndarray
    residuals: np.ndarray       # max relative residual per m
    mgrid: MGrid

    def h_eval(self, m: int, t, z) -> np.ndarray:
        return _poly_eval(self.H[m], t, z, self.mgrid)

    def partial_sum(self, N: int, t, z, eps) -> complex:
        """sum_{m<=N} h_m(t,z) eps^m / m!."""
        total = 0j
        for m in range(N + 1):
            total += complex(self.h_eval(m, np.array([t]), np.array([z]))[0, 0]) * eps**m / math.factorial(m)
        return total


def _poly_eval(Hm: np.ndarray, t, z, mgrid: MGrid) -> np.ndarray:
    """sum_n t^n IF(Hm[n])(z) on the (t, z) product grid."""
    t = np.atleast_1d(np.asarray(t, dtype=complex))
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    prof = np.stack([inverse_fourier(Hm[n], z, mgrid, tol=np.inf) for n in range(Hm.shape[0])])  # (n, n_z)
    powers = t[:, None] ** np.arange(Hm.shape[0])[None, :]
    return powers @ prof


def _expansion_coefficients(spec: ProblemSpec, N: int, conv_tol: float):
    lq = spec.frame.logq
    k1, k2 = spec.frame.k1, spec.frame.k2
    Qv = spec.Q_im()
    R1, R2 = spec.R_im(1), spec.R_im(2)
    K = _conv_kernels(spec, conv_tol)
    nm = spec.mgrid.n
    H = np.zeros((N + 1, N + 1, nm), dtype=complex)
    Fh = np.zeros((N + 1, N + 1, nm), dtype=complex)
    for m in range(N + 1):
        Fh[m, m] = math.factorial(m) * spec.F(m)
        rhs = np.zeros((N + 1, nm), dtype=complex)
        rhs += Fh[m] * np.exp(np.arange(N + 1) * lq)[:, None]
        for Rv, dD, kk in ((R1, spec.d_D1, k1), (R2, spec.d_D2, k2)):
            if m - dD < 0:
                continue
            fac = math.factorial(m) / math.factorial(m - dD)
            g = dD / kk + 1
            for n in range(N + 1 - dD):
                rhs[n + dD] += fac * Rv * H[m - dD, n] * math.exp(g * n * lq)
        for i in range(spec.n_ell):
            d, de, Dl = spec.d_ell[i], spec.delta_ell[i], spec.Delta_ell[i]
            for m2 in range(0, min(m - Dl, spec.p1) + 1):
                m3 = m - Dl - m2
                if m3 < 0 or K[i][m2] is None:
                    continue
                fac = math.factorial(m) / math.factorial(m3)   # m!/(m2! m3!) * m2!
                for n in range(N + 1):
                    p = d + m2 + n
                    if p > N:
                        break
                    conv = K[i][m2] @ H[m3, n]
                    rhs[p] += fac * math.exp(de * (m2 + n) * lq) * conv / SQRT2PI
        H[m] = rhs / (Qv[None, :] * np.exp(np.arange(N + 1) * lq)[:, None])
    return H, Fh


def eps_expansion(spec: ProblemSpec, t_samples, z_samples, N_eps: int,
                  conv_tol: float = 1e-8, eps_dependent: bool = False) -> EpsExpansion:
    """Coefficients h_m of the eps-expansion by the Fourier-side recursion, with residuals
    of the physical-side recursion at every (t, z) sample."""
    if eps_dependent:
        raise ModeUnsupported("eps-dependent coefficient data is not supported")
    H, Fh = _expansion_coefficients(spec, N_eps, conv_tol)
    t = np.atleast_1d(np.asarray(t_samples, dtype=complex))
    z = np.atleast_1d(np.asarray(z_samples, dtype=complex))
    mg = spec.mgrid
    h_vals = np.stack([_poly_eval(H[m], t, z, mg) for m in range(N_eps + 1)])
    f_vals = np.stack([_poly_eval(Fh[m], t, z, mg) for m in range(N_eps + 1)])
    res = expansion_residuals(spec, H, Fh, t, z)
    return EpsExpansion(H, Fh, t, z, h_vals, f_vals, res, mg)


def expansion_residuals(spec: ProblemSpec, H, Fh, t, z) -> np.ndarray:
    """Relative residual of the physical-side recursion; products in z are taken pointwise."""
    mg = spec.mgrid
    q = spec.frame.q
    k1, k2 = spec.frame.k1, spec.frame.k2
    Qv = spec.Q_im()
    N = H.shape[0] - 1
    out = np.zeros(N + 1)

    def ev(prof_stack, tt):
        return _poly_eval(prof_stack, tt, z, mg)

    for m in range(N + 1):
        lhs = ev(Qv[None, :] * H[m], q * t)
        rhs = ev(Fh[m], q * t)
        for R, dD, kk in ((spec.R_D1, spec.d_D1, k1), (spec.R_D2, spec.d_D2, k2)):
            if m - dD < 0:
                continue
            Rv = polyval(R, 1j * mg.nodes)
            fac = math.factorial(m) / math.factorial(m - dD)
            rhs = rhs + fac * (t**dD)[:, None] * ev(Rv[None, :] * H[m - dD], q ** (dD / kk + 1) * t)
        for i in range(spec.n_ell):
            d, de, Dl = spec.d_ell[i], spec.delta_ell[i], spec.Delta_ell[i]
            Rl = polyval(spec.R_ell[i], 1j * mg.nodes)
            for m2 in range(0, min(m - Dl, spec.p1) + 1):
                m3 = m - Dl - m2
                if m3 < 0 or not np.any(spec.C_data[i, m2]):
                    continue
                ts = q**de * t
                c = math.factorial(m2) * (ts**m2)[:, None] * inverse_fourier(spec.C_data[i, m2], z, mg, tol=np.inf)[None, :]
                hz = ev(Rl[None, :] * H[m3], ts)
                fac = math.factorial(m) / (math.factorial(m2) * math.factorial(m3))
                rhs = rhs + fac * (t**d)[:, None] * c * hz
        scale = np.maximum(np.abs(lhs).max(), np.abs(rhs).max())
        out[m] = float(np.abs(lhs - rhs).max() / scale) if scale > 0 else 0.0
    return out
