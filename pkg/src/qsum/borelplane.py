"""Fixed points in the two Borel planes, the q-convolution and the acceleration transform.

Both fixed-point operators are sums of terms of the form

    coefficient(tau, m) * [ (dilated w) convolved in m ](tau, m)

so they are assembled once per grid as coefficient arrays, dilation shifts and
convolution matrices, and a Picard step is a handful of gathers and matrix
products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DomainError, GeometryViolation, NonContraction, QuadratureError
from .grids import (GridFunction, MGrid, NormSpec, TauGrid, convolution_matrix,
                    dilate_values, polyval, shift_exponent, weighted_norm)
from .problem import ProblemSpec, divisor_on_grid
from .qcore import QFrame, laplace_norm, log_theta

SQRT2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class PhiData:
    """Coefficient data of the q-convolution kernels and the forcing in both Borel planes."""

    C: np.ndarray                 # raw C_{l,h}(m), shape (D-1, p1+1, n_m)
    phi_k1: np.ndarray            # C_{l,h} / (q^{1/k1})^{h(h-1)/2}
    phi_k2: np.ndarray
    Psi_k2: Optional[GridFunction] = None

    def with_psi_k2(self, psi: GridFunction) -> "PhiData":
        return PhiData(self.C, self.phi_k1, self.phi_k2, psi)


def build_phi(spec: ProblemSpec) -> PhiData:
    h = np.arange(spec.p1 + 1)
    lq = spec.frame.logq
    w1 = np.exp(-0.5 * h * (h - 1) * lq / spec.frame.k1)
    w2 = np.exp(-0.5 * h * (h - 1) * lq / spec.frame.k2)
    C = spec.C_data
    return PhiData(C, C * w1[None, :, None], C * w2[None, :, None])


def phi_eval(phi_coeffs: np.ndarray, tau) -> np.ndarray:
    """Evaluate one row sum_h phi_h(m) tau^h, shape tau.shape + (n_m,)."""
    tau = np.asarray(tau, dtype=complex)
    powers = tau[..., None] ** np.arange(phi_coeffs.shape[0])
    return np.tensordot(powers, phi_coeffs, axes=([-1], [0]))


def qconvolve_phi(C_row: np.ndarray, f: GridFunction, k, R_ell, frame: QFrame,
                  tol: float = 1e-8) -> GridFunction:
    """sum_h tau^h / (q^{1/k})^{h(h-1)/2} * (c_h conv_R dilate(f, -h/k))."""
    grid = f.taugrid
    tau = grid.tau
    lk = frame.logq / float(k)
    out = np.zeros_like(f.values)
    flags = f.flags.copy()
    for h in range(C_row.shape[0]):
        if not np.any(C_row[h]):
            continue
        K = convolution_matrix(C_row[h], R_ell, f.mgrid, tol)
        vals, fl = dilate_values(f.values, grid, Fraction(-h) / Fraction(k), f.flags)
        coef = tau**h * math.exp(-0.5 * h * (h - 1) * lk)
        out += coef[:, None] * (vals @ K.T)
        flags |= fl
    return f.with_values(out, flags)


# ---------------------------------------------------------------- operator assembly

@dataclass
class Term:
    name: str
    shift: int
    coef: np.ndarray              # (n_nodes, n_m)
    kernel: Optional[np.ndarray]  # convolution matrix or None for pointwise terms
    ell: int = -1
    h: int = 0


@dataclass
class BorelOperator:
    """w -> sum of terms + forcing on a fixed tau grid."""

    level: int
    grid: TauGrid
    mgrid: MGrid
    terms: List[Term]
    forcing: np.ndarray
    divisor: np.ndarray
    kind: str
    frame: QFrame

    def apply_term(self, t: Term, W: np.ndarray, flags=None):
        src, fl = dilate_values(W, self.grid, Fraction(t.shift, self.grid.L), flags)
        if t.kernel is not None:
            src = src @ t.kernel.T
        return t.coef * src, fl

    def apply(self, W: np.ndarray, flags=None):
        out = self.forcing.copy()
        new_flags = np.zeros(W.shape[0], dtype=bool)
        for t in self.terms:
            v, fl = self.apply_term(t, W, flags)
            out += v
            new_flags |= fl
        return out, new_flags

    def linear_part(self, W: np.ndarray, flags=None):
        out = np.zeros_like(W)
        new_flags = np.zeros(W.shape[0], dtype=bool)
        for t in self.terms:
            v, fl = self.apply_term(t, W, flags)
            out += v
            new_flags |= fl
        return out, new_flags


def _eps_factor(eps: complex, power: int) -> complex:
    return complex(eps) ** power if power else 1.0


def build_operator(spec: ProblemSpec, phi: PhiData, grid: TauGrid, level: int, eps: complex = 0.0,
                   forcing_values: Optional[np.ndarray] = None, conv_tol: float = 1e-8,
                   divisor_floor: float = 0.0) -> BorelOperator:
    """Assemble the level-1 (order k1) or level-2 (order k2) fixed-point operator."""
    frame = spec.frame
    k = frame.k1 if level == 1 else frame.k2
    lk = frame.logq / k
    kap = spec.kappa
    tau = grid.tau
    P = divisor_on_grid(spec, level, tau)
    if np.min(np.abs(P)) <= divisor_floor:
        raise GeometryViolation(f"divisor {level} vanishes on the grid")
    pref = lambda d: math.exp(-0.5 * (d + k) * (d + k - 1) * lk)
    terms: List[Term] = []
    # the other divisor term: R_D2 (inward) at level 1, R_D1 (outward) at level 2
    other = 2 if level == 1 else 1
    d_o = spec.d_D(other)
    gamma = (Fraction(-spec.d_D2) / kap) if level == 1 else (Fraction(spec.d_D1) / kap)
    R_o = spec.R_im(other)
    coef = R_o[None, :] * (tau ** d_o * pref(d_o))[:, None] / P
    terms.append(Term(f"R_D{other}", shift_exponent(grid, gamma), coef, None))
    phis = phi.phi_k1 if level == 1 else phi.phi_k2
    for i in range(spec.n_ell):
        d, de, Dl = spec.d_ell[i], spec.delta_ell[i], spec.Delta_ell[i]
        g = Fraction(de) - Fraction(d, k) - 1
        scale = _eps_factor(eps, Dl - d) / SQRT2PI * pref(d)
        for h in range(phis.shape[1]):
            c = spec.C_data[i, h]
            if not np.any(c):
                continue
            K = convolution_matrix(c, spec.R_ell[i], spec.mgrid, conv_tol)
            qg = math.exp(float(g) * frame.logq * h)
            tt = tau ** (d + h) * qg * math.exp(-0.5 * h * (h - 1) * lk)
            coef = scale * tt[:, None] / P
            terms.append(Term(f"ell{i+1}_h{h}", shift_exponent(grid, g - Fraction(h, k)), coef, K, i, h))
    if forcing_values is None:
        if level != 1:
            raise ValueError("level-2 operator needs the accelerated forcing values")
        forcing_values = spec.psi_k1(tau)
    forcing = forcing_values * math.exp(-0.5 * k * (k - 1) * lk) / P
    kind = "borel_k1_domain" if level == 1 else "borel_k2_domain"
    return BorelOperator(level, grid, spec.mgrid, terms, forcing, P, kind, frame)


def norm_spec(spec: ProblemSpec, level: int) -> NormSpec:
    if level == 1:
        return NormSpec("exp_q_alpha_rho", k=float(spec.kappa), beta=spec.beta, mu=spec.mu,
                        q=spec.frame.q, alpha=spec.alpha, rho=spec.rho, delta=spec.delta)
    return NormSpec("exp_q_nu", k=float(spec.frame.k2), beta=spec.beta, mu=spec.mu,
                    q=spec.frame.q, nu=spec.nu)


# ---------------------------------------------------------------- Picard

@dataclass
class BorelSolution:
    w: GridFunction
    level: int
    direction: float
    eps: complex
    norm: float
    contraction_ratio: float
    iterations: int
    history: List[float] = field(default_factory=list)
    operator: Optional[BorelOperator] = None

    @property
    def frame(self) -> QFrame:
        return self.operator.frame

    def sidecar(self) -> dict:
        return {"level": self.level, "direction": self.direction,
                "eps": [self.eps.real, self.eps.imag], "norm": self.norm,
                "contraction_ratio": self.contraction_ratio, "iterations": self.iterations,
                "history": self.history}


def picard(op: BorelOperator, nspec: NormSpec, tol: float = 1e-12, max_iter: int = 200,
           start: Optional[np.ndarray] = None, direction: float = 0.0, eps: complex = 0.0,
           interior: Optional[np.ndarray] = None) -> BorelSolution:
    """Iterate w <- H(w) until the weighted norm of the update is below tol times the norm of w.

    ``interior`` restricts the monitoring norm to nodes unaffected by the outer
    grid extension.
    """
    W = np.zeros((op.grid.size, op.mgrid.n), dtype=complex) if start is None else start.copy()
    flags = np.zeros(op.grid.size, dtype=bool)
    hist: List[float] = []
    ratios: List[float] = []
    high = 0
    it = 0

    def norm(V, fl):
        return weighted_norm(GridFunction(V, op.grid, op.mgrid, op.kind, fl), nspec, interior)

    for it in range(1, max_iter + 1):
        Wn, fl = op.apply(W, flags)
        diff = norm(Wn - W, fl)
        size = norm(Wn, fl)
        if hist and hist[-1] > 0:
            r = diff / hist[-1]
            ratios.append(r)
            high = high + 1 if r > 0.95 else 0
            if high >= 5:
                raise NonContraction(f"level-{op.level} Picard ratio above 0.95 for 5 iterations")
        hist.append(diff)
        W, flags = Wn, fl
        if diff <= tol * max(size, 1e-300):
            break
    else:
        raise NonContraction(f"level-{op.level} Picard did not reach tol {tol} in {max_iter} steps")
    # ratios near the rounding floor say nothing about the contraction
    useful = [r for r, d in zip(ratios, hist[1:]) if d > 1e3 * np.finfo(float).eps * max(hist[0], 1e-300)]
    ratio = float(np.median(useful)) if useful else 0.0
    w = GridFunction(W, op.grid, op.mgrid, op.kind, flags)
    return BorelSolution(w, op.level, direction, complex(eps), norm(W, flags), ratio, it, hist, op)


def solve_w_k1(spec: ProblemSpec, phi: PhiData, eps: complex, grid: TauGrid, tol: float = 1e-12,
               max_iter: int = 200, conv_tol: float = 1e-8) -> BorelSolution:
    op = build_operator(spec, phi, grid, 1, eps, conv_tol=conv_tol)
    return picard(op, norm_spec(spec, 1), tol, max_iter, direction=grid.direction, eps=eps)


def solve_w_k2(spec: ProblemSpec, phi: PhiData, eps: complex, grid: TauGrid, tol: float = 1e-12,
               max_iter: int = 200, conv_tol: float = 1e-8, interior=None) -> BorelSolution:
    if phi.Psi_k2 is None:
        raise ValueError("level-2 solve needs Psi_k2 from the acceleration stage")
    op = build_operator(spec, phi, grid, 2, eps, forcing_values=phi.Psi_k2.values, conv_tol=conv_tol)
    return picard(op, norm_spec(spec, 2), tol, max_iter, direction=grid.direction, eps=eps,
                  interior=interior)


def h1_apply(spec: ProblemSpec, phi: PhiData, w: GridFunction, eps: complex) -> GridFunction:
    op = build_operator(spec, phi, w.taugrid, 1, eps)
    vals, fl = op.apply(w.values, w.flags)
    return w.with_values(vals, fl)


def h2_apply(spec: ProblemSpec, phi: PhiData, w: GridFunction, eps: complex) -> GridFunction:
    op = build_operator(spec, phi, w.taugrid, 2, eps, forcing_values=phi.Psi_k2.values)
    vals, fl = op.apply(w.values, w.flags)
    return w.with_values(vals, fl)


# ---------------------------------------------------------------- ray transforms

def in_R_domain_array(T, d: float, delta_tilde: float) -> np.ndarray:
    T = np.asarray(T, dtype=complex)
    phase = d - np.angle(T)
    inf = np.where(np.cos(phase) < 0, np.abs(np.sin(phase)), 1.0)
    return inf > delta_tilde


@dataclass(frozen=True)
class RayData:
    """Samples of a function on the ray arg u = d at radii r_i = r0 q^{i/L}."""

    direction: float
    radii: np.ndarray
    values: np.ndarray      # (n_r, n_m)
    log_step: float


def ray_from_grid(f: GridFunction, line: int = 0) -> RayData:
    g = f.taugrid
    sl = g.line_slice(line)
    r = g.radius(g.index[sl])
    return RayData(g.lines[line].angle, r, f.values[sl], math.log(g.q) / g.L)


def laplace_matrix(frame: QFrame, k, ray: RayData, T):
    """Trapezoid weights in log r for the order-k q-Laplace transform at the points T."""
    T = np.asarray(T, dtype=complex)
    u = ray.radii * np.exp(1j * ray.direction)
    lt = log_theta(frame, k, u[None, :] / T[:, None])
    with np.errstate(over="ignore", under="ignore"):
        K = np.exp(-lt) * (ray.log_step / laplace_norm(frame, k))
    return K


def ray_transform(frame: QFrame, k, ray: RayData, T, tol: float = 1e-10, check_tail: bool = True):
    """Order-k q-Laplace transform of the ray samples at the points T.

    Returns (values (n_T, n_m), tail estimate). The tail estimate is the size of the
    integrand at the two ends of the ray relative to the transform.
    """
    T = np.atleast_1d(np.asarray(T, dtype=complex))
    K = laplace_matrix(frame, k, ray, T)
    out = K @ ray.values
    ends = np.maximum(np.abs(K[:, :2]) @ np.abs(ray.values[:2]).max(axis=1, keepdims=True),
                      np.abs(K[:, -2:]) @ np.abs(ray.values[-2:]).max(axis=1, keepdims=True))[:, 0]
    scale = np.maximum(np.abs(out).max(axis=1), np.abs(K) @ np.abs(ray.values).max(axis=1))
    tail = ends / np.where(scale > 0, scale, 1.0)
    if check_tail and np.any(tail > tol):
        raise QuadratureError(f"ray truncation leaves relative tail {tail.max():.2e} > {tol:.1e}")
    return out, tail


def accelerate(w1: BorelSolution, target: TauGrid, tol: float = 1e-10, delta_tilde: float = 0.1,
               nodes: Optional[np.ndarray] = None) -> GridFunction:
    """Order-kappa q-Laplace transform of the level-1 data along its main ray."""
    spec_frame = w1.frame
    kap = spec_frame.kappa
    ray = ray_from_grid(w1.w)
    tau = target.tau if nodes is None else target.tau[nodes]
    ok = in_R_domain_array(tau, ray.direction, delta_tilde)
    if not np.all(ok):
        raise DomainError("acceleration target outside the admissible domain")
    vals, _ = ray_transform(spec_frame, kap, ray, tau, tol)
    if nodes is not None:
        full = np.zeros((target.size, w1.w.mgrid.n), dtype=complex)
        full[nodes] = vals
        vals = full
    return GridFunction(vals, target, w1.w.mgrid, "borel_k2_domain")


def accelerate_function(frame: QFrame, ray: RayData, tau, tol: float = 1e-10) -> np.ndarray:
    vals, _ = ray_transform(frame, frame.kappa, ray, tau, tol)
    return vals


def check_accel_identity(accel: GridFunction, w2: GridFunction, nodes: np.ndarray,
                         tol: float = 1e-4) -> dict:
    a = accel.values[nodes]
    b = w2.values[nodes]
    rel = np.abs(a - b) / (1 + np.abs(b))
    i = int(np.argmax(rel.max(axis=1)))
    return {"sup_rel_diff": float(rel.max()), "passed": bool(rel.max() < tol),
            "worst_tau": complex(w2.taugrid.tau[nodes][i]), "n_nodes": int(len(nodes)), "tol": tol}


# ---------------------------------------------------------------- operator bounds

@dataclass
class TermBound:
    """Norm bound of one operator term: ||term(w)|| <= constant * ||w|| (or <= constant
    for the forcing term). ``envelope`` is the same bound routed through the
    divisor lower envelope C_P r^{1/d} |R(im)| (1+|tau|)^{d-1}."""

    name: str
    constant: float
    envelope: float
    measured: float = 0.0

    def holds(self, slack: float = 0.05) -> bool:
        return self.measured <= (1 + slack) * self.constant and self.measured <= (1 + slack) * self.envelope

    def as_dict(self) -> dict:
        return {"name": self.name, "constant": self.constant, "envelope": self.envelope,
                "measured": self.measured, "holds": self.holds()}


def _node_mask(op: BorelOperator, interior) -> np.ndarray:
    mask = np.ones(op.grid.size, dtype=bool)
    if interior is not None:
        mask[:] = False
        mask[interior] = True
    return mask


def _weighted(op: BorelOperator, nspec: NormSpec, V: np.ndarray, mask: np.ndarray) -> float:
    tw = nspec.tau_log_weight(op.grid.tau)
    mw = nspec.m_weight(op.mgrid.nodes)
    if not mask.any():
        return 0.0
    return float(np.max((np.abs(V[mask]) * mw).max(axis=1) * np.exp(tw[mask])))


def operator_bounds(spec: ProblemSpec, op: BorelOperator, nspec: NormSpec, interior=None,
                    tests: Sequence[np.ndarray] = (), cert=None) -> List[TermBound]:
    """Certified per-term constants on the grid and their measured counterparts."""
    from .grids import shift_plan
    from .problem import certify_lower_bound
    grid = op.grid
    tw = nspec.tau_log_weight(grid.tau)
    mw = nspec.m_weight(op.mgrid.nodes)
    mask = _node_mask(op, interior)
    cert = cert or certify_lower_bound(spec, op.level, grid)
    d = spec.d_D(op.level)
    Rabs = np.abs(spec.R_im(op.level))
    env_scale = 1.0 / (cert.C_P * cert.r_QR ** (1.0 / d))
    growth = (1 + np.abs(grid.tau)) ** (d - 1)
    out = []
    for t in op.terms:
        if t.shift:
            src, _, outer = shift_plan(grid, t.shift)
        else:
            src, outer = np.arange(grid.size), np.zeros(grid.size, bool)
        keep = mask & ~outer
        rho = (np.abs(t.kernel) * mw[:, None] / mw[None, :]).sum(axis=1) if t.kernel is not None \
            else np.ones(op.mgrid.n)
        ratio = np.exp(tw - tw[src])
        sharp = float(np.max((ratio[:, None] * np.abs(t.coef) * rho[None, :])[keep]))
        numer = np.abs(t.coef * op.divisor).max(axis=1)
        env = float(np.max((ratio * numer / growth)[keep]) * np.max(rho / Rabs) * env_scale)
        tb = TermBound(t.name, sharp, env)
        for W in tests:
            v, fl = op.apply_term(t, W)
            wn = _weighted(op, nspec, W, np.ones(grid.size, bool))
            if wn > 0:
                tb.measured = max(tb.measured, _weighted(op, nspec, v, keep & ~fl) / wn)
        out.append(tb)
    # forcing term: bounded by the norm of Psi over the divisor envelope
    k = op.frame.k1 if op.level == 1 else op.frame.k2
    pref = math.exp(-0.5 * k * (k - 1) * op.frame.logq / k)
    psi = op.forcing * op.divisor / pref
    sig_psi = _weighted(op, nspec, psi / growth[:, None], mask)
    f_norm = _weighted(op, nspec, op.forcing, mask)
    out.append(TermBound("forcing", f_norm, pref * env_scale * float(np.max(1 / Rabs)) * sig_psi, f_norm))
    return out


def smallness_report(bounds: Sequence[TermBound]) -> dict:
    """The two sufficient conditions of the fixed-point argument with their slack.

    Contraction: sum of the Lipschitz constants <= 1/2. Ball: with the radius
    varpi = 2 K_forcing / (1 - sum), sum * varpi + K_forcing <= varpi.
    """
    lip = sum(b.constant for b in bounds if b.name != "forcing")
    kf = sum(b.constant for b in bounds if b.name == "forcing")
    contraction_slack = 1.0 - lip / 0.5
    if lip < 1:
        varpi = 2 * kf / (1 - lip) if kf > 0 else 1.0
        ball_slack = 1.0 - (lip * varpi + kf) / varpi
    else:
        varpi, ball_slack = math.inf, -math.inf
    return {"lipschitz_sum": lip, "forcing_norm": kf, "contraction_slack": contraction_slack,
            "varpi": varpi, "ball_slack": ball_slack,
            "passed": contraction_slack >= 0.1 and ball_slack >= 0.1,
            "terms": [b.as_dict() for b in bounds]}


def growth_envelope(radii, values, q: float, r_min: float = 1.0) -> dict:
    """Fit log max_m |Y(r)| ~ c2 log^2 r + c1 log r + c0 over r >= r_min.

    A q-exponential bound of order k corresponds to c2 = k / (2 log q); ``k_fit`` is
    that order read back from the fitted coefficient.
    """
    r = np.asarray(radii, dtype=float)
    v = np.abs(np.asarray(values))
    if v.ndim > 1:
        v = v.max(axis=1)
    keep = (r >= r_min) & (v > 0)
    if keep.sum() < 3:
        raise ValueError("need at least three radii above r_min with nonzero data")
    s = np.log(r[keep])
    c2, c1, c0 = np.polyfit(s, np.log(v[keep]), 2)
    return {"c2": float(c2), "c1": float(c1), "c0": float(c0), "k_fit": float(2 * c2 * math.log(q)),
            "n_used": int(keep.sum())}
