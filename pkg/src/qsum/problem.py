"""Problem instances: polynomial data, assumption checks and the two divisor polynomials."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from .errors import DivisorDegenerate, GeometryViolation, ParameterError
from .grids import MGrid, TauGrid, make_mgrid, polyval
from .qcore import QFrame, as_exponent, lcm_denominator


def degree(coeffs) -> int:
    c = np.trim_zeros(np.asarray(coeffs, dtype=complex), "b")
    return max(len(c) - 1, 0) if c.size else -1


# ---------------------------------------------------------------- m-profiles

def make_profile(desc, mgrid: MGrid) -> np.ndarray:
    """Sample an m-profile from a generator description or an inline list."""
    m = mgrid.nodes
    if isinstance(desc, (list, tuple, np.ndarray)):
        arr = np.array([_complex(v) for v in desc], dtype=complex)
        if arr.size != m.size:
            raise ParameterError(f"inline profile has {arr.size} values, grid has {m.size}")
        return arr
    kind = desc.get("kind")
    amp = _complex(desc.get("amp", 1.0))
    if kind == "gaussian":
        c = float(desc.get("center", 0.0))
        w = float(desc.get("width", 1.0))
        return amp * np.exp(-((m - c) ** 2) / (2 * w * w))
    if kind == "rational_decay":
        p = float(desc.get("power", 2.0))
        s = float(desc.get("scale", 1.0))
        return amp / (1 + (m / s) ** 2) ** p
    if kind == "sech":
        w = float(desc.get("width", 1.0))
        return amp / np.cosh(m / w)
    if kind == "zero":
        return np.zeros(m.size, dtype=complex)
    raise ParameterError(f"unknown profile generator {kind!r}")


def _complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, dict):
        if "abs" in v:
            return complex(v["abs"] * np.exp(1j * float(v.get("arg", 0.0))))
        return complex(float(v.get("re", 0.0)), float(v.get("im", 0.0)))
    return complex(v)


# ---------------------------------------------------------------- forcing

@dataclass(frozen=True)
class ForcingTerm:
    """F_n = profile * weight_n with a closed-form level-k1 Borel transform.

    ``kind="rational"``: weight_n = a^{-n} (q^{1/k1})^{n(n-1)/2} for n >= start with
    n = start mod period, so the Borel sum is (tau/a)^start / (1 - (tau/a)^period).
    ``kind="polynomial"``: weight_n = weights[n] for the listed n only.
    """

    kind: str
    profile: np.ndarray
    pole: complex = 1.0
    period: int = 1
    start: int = 0
    weights: tuple = ()

    def weight(self, frame: QFrame, n: int) -> complex:
        if self.kind == "polynomial":
            return complex(self.weights[n]) if n < len(self.weights) else 0.0
        if n < self.start or (n - self.start) % self.period:
            return 0.0
        lk = frame.logq / frame.k1
        return complex(np.exp(-n * np.log(complex(self.pole)) + 0.5 * n * (n - 1) * lk))

    def borel_k1(self, frame: QFrame, tau) -> np.ndarray:
        """Closed-form sum over n of weight_n tau^n / (q^{1/k1})^{n(n-1)/2}."""
        tau = np.asarray(tau, dtype=complex)
        if self.kind == "polynomial":
            lk = frame.logq / frame.k1
            out = np.zeros(tau.shape, dtype=complex)
            for n, w in enumerate(self.weights):
                out += complex(w) * tau**n * math.exp(-0.5 * n * (n - 1) * lk)
            return out
        x = tau / self.pole
        return x**self.start / (1 - x**self.period)

    def singular_directions(self) -> List[float]:
        if self.kind == "polynomial":
            return []
        base = float(np.angle(self.pole))
        return [_wrap(base + 2 * math.pi * j / self.period) for j in range(self.period)]

    def singular_radius(self) -> float:
        return math.inf if self.kind == "polynomial" else abs(self.pole)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


# ---------------------------------------------------------------- spec

@dataclass(frozen=True)
class ProblemSpec:
    frame: QFrame
    mgrid: MGrid
    Q: np.ndarray
    R_D1: np.ndarray
    R_D2: np.ndarray
    R_ell: tuple
    d_D1: int
    d_D2: int
    d_ell: tuple
    delta_ell: tuple
    Delta_ell: tuple
    C_data: np.ndarray            # shape (D-1, p1+1, n_m)
    forcing: tuple                # ForcingTerm entries
    beta: float
    mu: float
    eps0: float
    beta_prime: float
    alpha: float
    nu: float
    rho: float
    delta: float
    delta_tilde: float
    r_T: float
    D: int

    @property
    def p1(self) -> int:
        return self.C_data.shape[1] - 1

    @property
    def n_ell(self) -> int:
        return len(self.d_ell)

    @property
    def kappa(self) -> Fraction:
        return self.frame.kappa

    def Q_im(self) -> np.ndarray:
        return polyval(self.Q, 1j * self.mgrid.nodes)

    def R_im(self, j: int) -> np.ndarray:
        return polyval(self.R_D1 if j == 1 else self.R_D2, 1j * self.mgrid.nodes)

    def d_D(self, j: int) -> int:
        return self.d_D1 if j == 1 else self.d_D2

    def k_of(self, j: int) -> int:
        return self.frame.k1 if j == 1 else self.frame.k2

    def F(self, n: int) -> np.ndarray:
        out = np.zeros(self.mgrid.n, dtype=complex)
        for term in self.forcing:
            w = term.weight(self.frame, n)
            if w != 0:
                out = out + w * term.profile
        return out

    def F_series(self, N: int) -> np.ndarray:
        return np.array([self.F(n) for n in range(N + 1)])

    def psi_k1(self, tau) -> np.ndarray:
        """Level-k1 Borel transform of the forcing, shape tau.shape + (n_m,)."""
        tau = np.asarray(tau, dtype=complex)
        out = np.zeros(tau.shape + (self.mgrid.n,), dtype=complex)
        for term in self.forcing:
            out += term.borel_k1(self.frame, tau)[..., None] * term.profile
        return out

    def forcing_singular_directions(self) -> List[float]:
        out = []
        for term in self.forcing:
            out.extend(term.singular_directions())
        return out

    def forcing_radius(self) -> float:
        return min([t.singular_radius() for t in self.forcing] + [math.inf])

    def dilation_exponents(self) -> List[Fraction]:
        """Every dilation exponent used by the Borel-plane operators and the main equation."""
        k1, k2 = self.frame.k1, self.frame.k2
        kap = self.kappa
        ex = [Fraction(-self.d_D2) / kap, Fraction(self.d_D1) / kap,
              Fraction(self.d_D1, k1) + 1, Fraction(self.d_D2, k2) + 1, Fraction(1)]
        for d, de in zip(self.d_ell, self.delta_ell):
            ex += [Fraction(de) - Fraction(d, k1) - 1, Fraction(de) - Fraction(d, k2) - 1, Fraction(de)]
        for h in range(self.p1 + 1):
            ex += [Fraction(-h, k1), Fraction(-h, k2)]
        return ex

    def alignment_L(self) -> int:
        return lcm_denominator(*self.dilation_exponents())


# ---------------------------------------------------------------- validation

@dataclass
class CheckItem:
    name: str
    value: float
    bound: float
    strict: bool
    note: str = ""

    @property
    def slack(self) -> float:
        return self.value - self.bound

    @property
    def passed(self) -> bool:
        return self.slack > 0 if self.strict else self.slack >= -1e-12

    def as_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "bound": self.bound,
                "slack": self.slack, "strict": self.strict, "passed": self.passed,
                "note": self.note}


@dataclass
class ValidationReport:
    items: List[CheckItem] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(i.passed for i in self.items)

    def failures(self) -> List[CheckItem]:
        return [i for i in self.items if not i.passed]

    def as_dict(self) -> dict:
        return {"passed": self.passed, "items": [i.as_dict() for i in self.items]}


def validate_assumptions(spec: ProblemSpec) -> ValidationReport:
    rep = ValidationReport()
    add = rep.items.append
    k1, k2 = spec.frame.k1, spec.frame.k2
    kap = float(spec.kappa)
    lq = spec.frame.logq
    n = spec.n_ell
    add(CheckItem("D >= 3", spec.D, 3, False))
    add(CheckItem("number of ell-terms = D-1", n, spec.D - 1, False))
    if n and n == spec.D - 1:
        add(CheckItem("(A) delta_1 = 1", -abs(spec.delta_ell[0] - 1), 0, False))
        for i in range(n - 1):
            add(CheckItem(f"(A) delta_{i+2} > delta_{i+1}", spec.delta_ell[i + 1], spec.delta_ell[i], True))
    for i in range(n):
        d, de, Dl = spec.d_ell[i], spec.delta_ell[i], spec.Delta_ell[i]
        tag = f"[ell={i+1}]"
        add(CheckItem(f"(B) Delta >= d {tag}", Dl, d, False))
        add(CheckItem(f"(B) d/k2 + 1 >= delta {tag}", d / k2 + 1, de, False))
        add(CheckItem(f"(B) (d_D1-1)/kappa - d/k2 >= delta-1 {tag}",
                      (spec.d_D1 - 1) / kap - d / k2, de - 1, False))
        add(CheckItem(f"(B) (d_D2-1)/k2 >= delta-1 {tag}", (spec.d_D2 - 1) / k2, de - 1, False))
        add(CheckItem(f"d_ell >= 1 {tag}", d, 1, False))
    add(CheckItem("(B) k1 d_D2 > k2 d_D1", k1 * spec.d_D2, k2 * spec.d_D1, True))
    dq, d1, d2 = degree(spec.Q), degree(spec.R_D1), degree(spec.R_D2)
    add(CheckItem("(C) deg R_D2 = deg R_D1", -abs(d2 - d1), 0, False))
    add(CheckItem("(C) deg Q >= deg R_D1", dq, d1, False))
    for i, R in enumerate(spec.R_ell):
        add(CheckItem(f"(C) deg R_D1 >= deg R_ell [ell={i+1}]", d1, degree(R), False))
    add(CheckItem("(C) min |Q(im)| > 0", float(np.min(np.abs(spec.Q_im()))), 0, True))
    add(CheckItem("(C) min |R_D1(im)| > 0", float(np.min(np.abs(spec.R_im(1)))), 0, True))
    add(CheckItem("(C) min |R_D2(im)| > 0", float(np.min(np.abs(spec.R_im(2)))), 0, True))
    add(CheckItem("(C) mu > deg R_Dj + 1", spec.mu, max(d1, d2) + 1, True))
    add(CheckItem("0 < eps0 < 1", min(spec.eps0, 1 - spec.eps0), 0, True))
    add(CheckItem("0 < r_T < 1", min(spec.r_T, 1 - spec.r_T), 0, True))
    add(CheckItem("0 < beta' < beta", min(spec.beta_prime, spec.beta - spec.beta_prime), 0, True))
    add(CheckItem("nu + k2 log(r_T)/log q < 0", 0, spec.nu + k2 * math.log(spec.r_T) / lq, True))
    add(CheckItem("alpha + kappa log(eps0 r_T)/log q < 0", 0,
                  spec.alpha + kap * math.log(spec.eps0 * spec.r_T) / lq, True))
    add(CheckItem("eps0 r_T <= q^{(1/2-nu)/k2}/2",
                  spec.frame.q ** ((0.5 - spec.nu) / k2) / 2, spec.eps0 * spec.r_T, False))
    add(CheckItem("rho > 0, delta > 0", min(spec.rho, spec.delta), 0, True))
    add(CheckItem("delta_tilde in (0,1)", min(spec.delta_tilde, 1 - spec.delta_tilde), 0, True))
    return rep


# ---------------------------------------------------------------- divisors

def _prefactors(spec: ProblemSpec, j: int):
    k = spec.k_of(j)
    d = spec.d_D(j)
    lk = spec.frame.logq / k
    a0 = math.exp(-0.5 * k * (k - 1) * lk)
    a1 = math.exp(-0.5 * (d + k) * (d + k - 1) * lk)
    return a0, a1


def divisor_eval(spec: ProblemSpec, j: int, m, tau) -> np.ndarray:
    """P_{m,j}(tau); m and tau broadcast against each other."""
    m = np.asarray(m, dtype=float)
    tau = np.asarray(tau, dtype=complex)
    a0, a1 = _prefactors(spec, j)
    R = spec.R_D1 if j == 1 else spec.R_D2
    return polyval(spec.Q, 1j * m) * a0 - polyval(R, 1j * m) * a1 * tau ** spec.d_D(j)


def divisor_on_grid(spec: ProblemSpec, j: int, tau) -> np.ndarray:
    """P_{m,j}(tau) as a (n_tau, n_m) matrix on the problem's m-grid."""
    a0, a1 = _prefactors(spec, j)
    tau = np.asarray(tau, dtype=complex)
    return spec.Q_im()[None, :] * a0 - spec.R_im(j)[None, :] * a1 * (tau ** spec.d_D(j))[:, None]


@dataclass(frozen=True)
class RootSet:
    j: int
    m: np.ndarray
    roots: np.ndarray       # (n_m, d)
    r_QR: float
    d_QR: float
    nu_QR: float

    def directions(self) -> np.ndarray:
        return np.angle(self.roots)

    def angular_range(self):
        """Per root index: (centre angle, half-width) of arg q_l(m) over the m-grid."""
        ang = np.unwrap(np.angle(self.roots), axis=0)
        lo, hi = ang.min(axis=0), ang.max(axis=0)
        return [(float(_wrap((a + b) / 2)), float((b - a) / 2)) for a, b in zip(lo, hi)]


def roots_qell(spec: ProblemSpec, j: int, m) -> np.ndarray:
    """The d_{D_j} roots of P_{m,j} for scalar m, principal branch, increasing l."""
    k = spec.k_of(j)
    d = spec.d_D(j)
    Rv = complex(polyval(spec.R_D1 if j == 1 else spec.R_D2, 1j * m))
    if Rv == 0:
        raise DivisorDegenerate(f"R_D{j}(im) vanishes at m={m}")
    ratio = complex(polyval(spec.Q, 1j * m)) / Rv
    base = ratio ** (1.0 / d) * spec.frame.q ** ((d + 2 * k - 1) / (2 * k))
    return base * np.exp(2j * math.pi * np.arange(d) / d)


def root_set(spec: ProblemSpec, j: int) -> RootSet:
    m = spec.mgrid.nodes
    R = spec.R_im(j)
    if np.any(R == 0):
        raise DivisorDegenerate(f"R_D{j}(im) vanishes on the m-grid")
    ratio = spec.Q_im() / R
    # continuous branch of arg(ratio) along the grid
    arg = np.unwrap(np.angle(ratio))
    d = spec.d_D(j)
    k = spec.k_of(j)
    base = np.abs(ratio) ** (1.0 / d) * np.exp(1j * arg / d) * spec.frame.q ** ((d + 2 * k - 1) / (2 * k))
    roots = base[:, None] * np.exp(2j * math.pi * np.arange(d) / d)[None, :]
    return RootSet(j, m.copy(), roots, float(np.min(np.abs(ratio))),
                   float(_wrap((arg.max() + arg.min()) / 2)), float((arg.max() - arg.min()) / 2))


@dataclass(frozen=True)
class BoundCertificate:
    j: int
    M1: float
    M2: float
    C_P: float
    worst_node: tuple
    r_QR: float

    def as_dict(self) -> dict:
        return {"j": self.j, "M1": self.M1, "M2": self.M2, "C_P": self.C_P,
                "worst_node": [str(self.worst_node[0]), float(self.worst_node[1])],
                "r_QR": self.r_QR}


def certify_lower_bound(spec: ProblemSpec, j: int, taugrid: TauGrid, roots: Optional[RootSet] = None,
                        floor: float = 1e-9, nodes=None) -> BoundCertificate:
    """Grid-certified constants for the divisor lower bound.

    C_P is the largest constant with |P| >= C_P r^{1/d} |R(im)| (1+|tau|)^{d-1}
    on every node, so the inequality holds by construction.
    """
    roots = roots or root_set(spec, j)
    tau = taugrid.tau if nodes is None else taugrid.tau[nodes]
    d = spec.d_D(j)
    dist = np.abs(tau[:, None, None] - roots.roots[None, :, :])        # (tau, m, l)
    rel1 = dist / (1 + np.abs(tau))[:, None, None]
    M1 = float(rel1.min())
    rel2 = dist / np.abs(roots.roots)[None, :, :]
    M2 = float(rel2.min(axis=(0, 1)).max())
    P = divisor_on_grid(spec, j, tau)
    R = np.abs(spec.R_im(j))
    denom = roots.r_QR ** (1.0 / d) * R[None, :] * (1 + np.abs(tau))[:, None] ** (d - 1)
    ratio = np.abs(P) / denom
    a, b = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
    C_P = float(ratio[a, b])
    if M1 <= floor or M2 <= floor or C_P <= 0:
        raise GeometryViolation(
            f"divisor {j}: M1={M1:.3g}, M2={M2:.3g} below floor {floor:g} near tau={tau[a]:.4g}")
    return BoundCertificate(j, M1, M2, C_P, (complex(tau[a]), float(spec.mgrid.nodes[b])), roots.r_QR)


# ---------------------------------------------------------------- construction

def build_spec(problem: dict, mgrid: MGrid) -> ProblemSpec:
    """Build a ProblemSpec from a plain (already schema-checked) mapping."""
    frame = QFrame(float(problem["q"]), int(problem["k1"]), int(problem["k2"]))
    poly = lambda v: np.array([_complex(c) for c in v], dtype=complex)
    ells = problem["ell_terms"]
    p1 = max(len(e.get("C", [])) for e in ells) - 1 if ells else 0
    p1 = max(p1, 0)
    C = np.zeros((len(ells), p1 + 1, mgrid.n), dtype=complex)
    for i, e in enumerate(ells):
        for h, prof in enumerate(e.get("C", [])):
            C[i, h] = make_profile(prof, mgrid)
    forcing = []
    for t in problem["forcing"]:
        prof = make_profile(t["profile"], mgrid)
        if t["kind"] == "rational":
            forcing.append(ForcingTerm("rational", prof, pole=_complex(t["pole"]),
                                       period=int(t.get("period", 1)), start=int(t.get("start", 0))))
        elif t["kind"] == "polynomial":
            forcing.append(ForcingTerm("polynomial", prof,
                                       weights=tuple(_complex(w) for w in t["weights"])))
        else:
            raise ParameterError(f"unknown forcing kind {t['kind']!r}")
    rho = float(problem["rho"])
    delta = problem.get("delta")
    return ProblemSpec(
        frame=frame, mgrid=mgrid,
        Q=poly(problem["Q"]), R_D1=poly(problem["R_D1"]), R_D2=poly(problem["R_D2"]),
        R_ell=tuple(poly(e["R"]) for e in ells),
        d_D1=int(problem["d_D1"]), d_D2=int(problem["d_D2"]),
        d_ell=tuple(int(e["d"]) for e in ells),
        delta_ell=tuple(int(e["delta"]) for e in ells),
        Delta_ell=tuple(int(e["Delta"]) for e in ells),
        C_data=C, forcing=tuple(forcing),
        beta=float(problem["beta"]), mu=float(problem["mu"]), eps0=float(problem["eps0"]),
        beta_prime=float(problem["beta_prime"]), alpha=float(problem["alpha"]),
        nu=float(problem["nu"]), rho=rho, delta=2 * rho if delta is None else float(delta),
        delta_tilde=float(problem.get("delta_tilde", 0.1)), r_T=float(problem["r_T"]),
        D=len(ells) + 1,
    )
