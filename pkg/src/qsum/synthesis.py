"""From Borel data to actual functions: the order-k2 Laplace transform, assembly of
u and f on each sector, and residuals of the Fourier-side main equation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from .borelplane import (BorelSolution, PhiData, RayData, build_phi, in_R_domain_array,
                         ray_from_grid, ray_transform, solve_w_k1, solve_w_k2)
from .errors import AlignmentError, DomainError, ParameterError
from .formal import inverse_fourier, solve_recursion
from .geometry import AssociatedFamily
from .grids import GridFunction, make_sector_grid, make_taugrid, mconvolve, polyval
from .problem import ProblemSpec
from .qcore import FormalSeries, QFrame, qborel_formal

SQRT2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class SolverSettings:
    """Grid extents and tolerances shared by every Borel direction."""

    L: int = 80
    r1_min: float = 1e-14
    r1_max: float = 1e8
    r2_min: float = 1e-12
    r2_max: float = 1e12
    psi_min: float = 1e-22
    psi_max: float = 1e18
    n_angles: int = 8
    tol: float = 1e-13
    max_iter: int = 200
    conv_tol: float = 1e-8
    laplace_tol: float = 1e-8

    def check(self, spec: ProblemSpec) -> None:
        if self.L % spec.alignment_L():
            raise AlignmentError(f"L={self.L} is not a multiple of {spec.alignment_L()}")
        if not (0 < self.r1_min < spec.rho < self.r1_max):
            raise ParameterError("level-1 ray must straddle rho")
        if not (0 < self.r2_min < self.r2_max) or not (0 < self.psi_min < self.psi_max):
            raise ParameterError("ray extents must be increasing and positive")


@dataclass
class DirectionData:
    """Both Borel-plane solutions and the accelerated forcing along one direction."""

    p: int
    direction: float
    w1: BorelSolution
    psi_k2: RayData
    w2: BorelSolution

    @property
    def w2_ray(self) -> RayData:
        return ray_from_grid(self.w2.w)


def level2_interior(spec: ProblemSpec, grid, r_max: float) -> np.ndarray:
    """Nodes whose outward dilation by q^{dD1/kappa} stays on the grid with room to spare."""
    reach = spec.frame.q ** (float(Fraction(spec.d_D1) / spec.kappa) + 1)
    return np.nonzero(np.abs(grid.tau) * reach <= r_max)[0]


def accelerated_forcing(spec: ProblemSpec, direction: float, radii: np.ndarray,
                        settings: SolverSettings) -> np.ndarray:
    """Order-kappa Laplace transform of the closed-form level-1 forcing along the direction."""
    q, L = spec.frame.q, settings.L
    g = make_sector_grid(direction, settings.psi_min, settings.psi_max, L, q, rho=spec.rho)
    ray = RayData(direction, g.radius(g.index), spec.psi_k1(g.tau), math.log(q) / L)
    vals, _ = ray_transform(spec.frame, spec.kappa, ray, radii * np.exp(1j * direction),
                            tol=settings.laplace_tol)
    return vals


def solve_direction(spec: ProblemSpec, direction: float, settings: SolverSettings = SolverSettings(),
                    eps: complex = 0.0, p: int = 0, phi: Optional[PhiData] = None) -> DirectionData:
    settings.check(spec)
    q, L = spec.frame.q, settings.L
    phi = phi or build_phi(spec)
    g1 = make_taugrid(direction, spec.rho, settings.r1_max, L, 0, q=q,
                      n_angles=settings.n_angles, r_min=settings.r1_min)
    w1 = solve_w_k1(spec, phi, eps, g1, tol=settings.tol, max_iter=settings.max_iter,
                    conv_tol=settings.conv_tol)
    g2 = make_sector_grid(direction, settings.r2_min, settings.r2_max, L, q, rho=spec.rho)
    psi2 = accelerated_forcing(spec, direction, np.abs(g2.tau), settings)
    phi2 = phi.with_psi_k2(GridFunction(psi2, g2, spec.mgrid, "borel_k2_domain"))
    w2 = solve_w_k2(spec, phi2, eps, g2, tol=settings.tol, max_iter=settings.max_iter,
                    conv_tol=settings.conv_tol,
                    interior=level2_interior(spec, g2, settings.r2_max))
    psi_ray = RayData(direction, np.abs(g2.tau), psi2, math.log(q) / L)
    return DirectionData(p, direction, w1, psi_ray, w2)


def recursion_consistency(spec: ProblemSpec, w1: BorelSolution, N: int, conv_tol: float = 1e-8,
                          radius: Optional[float] = None) -> dict:
    """Compare the Borel transform of the truncated formal solution with the level-1
    fixed point on the nodes of the disc |tau| < radius (rho by default)."""
    radius = spec.rho if radius is None else radius
    coeffs = solve_recursion(spec, 0.0, N, conv_tol)
    series = qborel_formal(FormalSeries(coeffs.profiles), spec.frame, spec.frame.k1)
    grid = w1.w.taugrid
    nodes = np.nonzero(np.abs(grid.tau) < radius)[0]
    if nodes.size == 0:
        raise ParameterError("no grid nodes inside the comparison disc")
    a = series.evaluate(grid.tau[nodes])
    b = w1.w.values[nodes]
    rel = float(np.abs(a - b).max() / np.abs(b).max())
    return {"N": N, "radius": radius, "n_nodes": int(nodes.size), "sup_rel_diff": rel}


# ---------------------------------------------------------------- Laplace transform

def extend_inward(ray: RayData, borel_coeffs: np.ndarray, r_min: float, tol: float = 1e-12):
    """Prepend radii down to r_min using a truncated Borel series (coefficients (N+1, n_m)).

    Returns (extended ray, relative mismatch of series and ray data on the first
    few stored nodes).
    """
    series = FormalSeries(borel_coeffs)
    n_new = int(math.ceil(math.log(ray.radii[0] / r_min) / ray.log_step))
    if n_new <= 0:
        return ray, 0.0
    r_new = ray.radii[0] * np.exp(-ray.log_step * np.arange(n_new, 0, -1))
    u = r_new * np.exp(1j * ray.direction)
    vals = series.evaluate(u)
    k = min(4, ray.radii.size)
    check = series.evaluate(ray.radii[:k] * np.exp(1j * ray.direction))
    scale = np.abs(ray.values[:k]).max()
    mismatch = float(np.abs(check - ray.values[:k]).max() / scale) if scale > 0 else 0.0
    ext = RayData(ray.direction, np.concatenate([r_new, ray.radii]),
                  np.concatenate([vals, ray.values]), ray.log_step)
    return ext, mismatch


def qlaplace(frame: QFrame, k, wray: RayData, T, delta_tilde: float, tol: float = 1e-8,
             radius: Optional[float] = None):
    """Order-k q-Laplace transform of ray data at T; returns (values (n_T, n_m), tail)."""
    T = np.atleast_1d(np.asarray(T, dtype=complex))
    if np.any(T == 0):
        raise DomainError("the Laplace transform is evaluated at T != 0 only")
    if not np.all(in_R_domain_array(T, wray.direction, delta_tilde)):
        raise DomainError("T lies too close to the zero set of the kernel for this direction")
    if radius is not None and np.any(np.abs(T) > radius):
        raise DomainError(f"|T| exceeds the admissible radius {radius:.3g}")
    return ray_transform(frame, k, wray, T, tol)


@dataclass
class SectorialSolution:
    """u and f on one sector, evaluated from the level-2 Borel data along direction p."""

    spec: ProblemSpec
    p: int
    direction: float
    w2_ray: RayData
    psi_ray: RayData
    family: Optional[AssociatedFamily] = None
    tol: float = 1e-8
    picard_tol: float = 1e-13
    cache: dict = field(default_factory=dict)

    @classmethod
    def from_direction(cls, spec: ProblemSpec, data: DirectionData,
                       family: Optional[AssociatedFamily] = None, tol: float = 1e-8):
        return cls(spec, data.p, data.direction, data.w2_ray, data.psi_k2, family, tol)

    @property
    def frame(self) -> QFrame:
        return self.spec.frame

    def check_points(self, T) -> None:
        if self.family is None:
            return
        if not np.all(self.family.R_b_contains(self.p, T)):
            raise DomainError(f"eps*t leaves the bounded domain of direction {self.p}")

    def _transform(self, ray: RayData, T):
        vals, tail = qlaplace(self.frame, self.frame.k2, ray, T, self.spec.delta_tilde, self.tol)
        return vals, tail

    def U(self, T, strict: bool = False) -> np.ndarray:
        """Fourier-side solution U(T, m) at every m node, shape (n_T, n_m)."""
        if strict:
            self.check_points(T)
        return self._transform(self.w2_ray, T)[0]

    def F(self, T, strict: bool = False) -> np.ndarray:
        if strict:
            self.check_points(T)
        return self._transform(self.psi_ray, T)[0]

    def error_estimate(self, T) -> np.ndarray:
        """Per-T absolute error bound: tail plus the Picard tolerance on the absolute integral."""
        from .borelplane import laplace_matrix
        T = np.atleast_1d(np.asarray(T, dtype=complex))
        K = laplace_matrix(self.frame, self.frame.k2, self.w2_ray, T)
        absint = np.abs(K) @ np.abs(self.w2_ray.values).max(axis=1)
        _, tail = self._transform(self.w2_ray, T)
        return absint * (self.picard_tol + tail) + 1e-15 * absint

    def u(self, t, z, eps) -> np.ndarray:
        """u(t, z, eps) on the product of t (or eps) samples with z samples."""
        T = np.atleast_1d(np.asarray(eps, dtype=complex) * np.asarray(t, dtype=complex))
        self.check_points(T)
        return inverse_fourier(self.U(T), z, self.spec.mgrid, self.spec.beta_prime)

    def f(self, t, z, eps) -> np.ndarray:
        T = np.atleast_1d(np.asarray(eps, dtype=complex) * np.asarray(t, dtype=complex))
        self.check_points(T)
        return inverse_fourier(self.F(T), z, self.spec.mgrid, self.spec.beta_prime)

    def dump_rows(self, t, z, eps) -> List[str]:
        """CSV rows p,re_t,im_t,re_z,im_z,re_eps,im_eps,re_u,im_u,est_err."""
        rows = []
        zs = np.atleast_1d(np.asarray(z, dtype=complex))
        for e in np.atleast_1d(np.asarray(eps, dtype=complex)):
            for tt in np.atleast_1d(np.asarray(t, dtype=complex)):
                vals = self.u(np.array([tt]), zs, e)[0]
                err = float(self.error_estimate(e * tt)[0])
                for zz, v in zip(zs, vals):
                    nums = (tt.real, tt.imag, zz.real, zz.imag, e.real, e.imag, v.real, v.imag, err)
                    rows.append(f"{self.p}," + ",".join(f"{x:.17g}" for x in nums))
        return rows


def assemble_u(sol: SectorialSolution, t, z, eps) -> np.ndarray:
    return sol.u(t, z, eps)


def assemble_f(sol: SectorialSolution, t, z, eps) -> np.ndarray:
    return sol.f(t, z, eps)


# ---------------------------------------------------------------- residual

def _coefficient_profile(spec: ProblemSpec, i: int, T: complex) -> np.ndarray:
    """C_l(T, m) = sum_h C_{l,h}(m) T^h."""
    h = np.arange(spec.C_data.shape[1])
    return (spec.C_data[i] * (complex(T) ** h)[:, None]).sum(axis=0)


def equation_terms(spec: ProblemSpec, Ufun, Ffun, T: complex, eps: complex = 0.0,
                   conv_tol: float = 1e-8) -> dict:
    """Both sides of the Fourier-side main equation at T, each of shape (n_m,)."""
    q = spec.frame.q
    k1, k2 = spec.frame.k1, spec.frame.k2
    mg = spec.mgrid
    lhs = spec.Q_im() * Ufun(q * T)
    terms = {}
    terms["R_D1"] = T**spec.d_D1 * spec.R_im(1) * Ufun(q ** (spec.d_D1 / k1 + 1) * T)
    terms["R_D2"] = T**spec.d_D2 * spec.R_im(2) * Ufun(q ** (spec.d_D2 / k2 + 1) * T)
    for i in range(spec.n_ell):
        d, de, Dl = spec.d_ell[i], spec.delta_ell[i], spec.Delta_ell[i]
        Ts = q**de * T
        C = _coefficient_profile(spec, i, Ts)
        conv = mconvolve(C, Ufun(Ts), spec.R_ell[i], mg, conv_tol) if np.any(C) else np.zeros(mg.n)
        fac = complex(eps) ** (Dl - d) if Dl != d else 1.0
        terms[f"ell{i + 1}"] = fac * T**d * conv / SQRT2PI
    terms["forcing"] = Ffun(q * T)
    return {"lhs": lhs, "rhs": terms}


def residual_check(spec: ProblemSpec, sol: SectorialSolution, sample_T, m_index=None,
                   tol: float = 1e-4, eps: complex = 0.0, perturb: float = 0.0) -> dict:
    """Max relative residual of the Fourier-side main equation over the samples.

    ``perturb`` scales the level-2 Borel data by (1 + perturb) before evaluating,
    as a fault-injection probe.
    """
    ray = sol.w2_ray
    if perturb:
        ray = RayData(ray.direction, ray.radii, ray.values * (1 + perturb), ray.log_step)
    frame = spec.frame
    dt = spec.delta_tilde

    def Ufun(T):
        return qlaplace(frame, frame.k2, ray, np.array([T]), dt, sol.tol)[0][0]

    def Ffun(T):
        return qlaplace(frame, frame.k2, sol.psi_ray, np.array([T]), dt, sol.tol)[0][0]

    sample_T = np.atleast_1d(np.asarray(sample_T, dtype=complex))
    if m_index is None:
        m_index = [None] * sample_T.size
    rows = []
    worst = 0.0
    for T, mi in zip(sample_T, m_index):
        parts = equation_terms(spec, Ufun, Ffun, complex(T), eps)
        rhs = sum(parts["rhs"].values())
        res = np.abs(parts["lhs"] - rhs)
        scale = np.abs(parts["lhs"]) + sum(np.abs(v) for v in parts["rhs"].values())
        sel = slice(None) if mi is None else [int(mi)]
        top = scale[sel].max()
        rel = float(res[sel].max() / top) if top > 0 else 0.0
        rows.append({"T": [T.real, T.imag], "m_index": mi, "relative_residual": rel})
        worst = max(worst, rel)
    return {"max_relative_residual": worst, "passed": worst <= tol, "tol": tol, "samples": rows}
