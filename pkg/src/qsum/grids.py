"""Discretisation of the Fourier variable m and of the Borel variable tau.

The tau grid is a union of angle lines with geometrically spaced radii
rho * q^{i/L}; a dilation by q^{p/L} is then an exact index shift along
each line. Values of a grid function are stored as a (node, m) matrix with
nodes ordered line by line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError, DomainMismatch, ParameterError, TruncationError
from .qcore import as_exponent

KINDS = ("borel_k1_domain", "borel_k2_domain", "m_only")


@dataclass(frozen=True)
class MGrid:
    nodes: np.ndarray
    weights: np.ndarray
    beta: float
    mu: float
    selftest_error: float = float("nan")
    declared_tol: float = float("nan")

    def __hash__(self):
        return hash((self.nodes.size, float(self.nodes[-1]), self.beta, self.mu))

    def __eq__(self, other):
        return (isinstance(other, MGrid) and self.beta == other.beta and self.mu == other.mu
                and np.array_equal(self.nodes, other.nodes))

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def step(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def uniform(self) -> bool:
        d = np.diff(self.nodes)
        return bool(np.allclose(d, d[0], rtol=1e-12, atol=0))

    def weight(self) -> np.ndarray:
        """The E_(beta,mu) weight (1+|m|)^mu e^{beta|m|}."""
        a = np.abs(self.nodes)
        return (1 + a) ** self.mu * np.exp(self.beta * a)


def make_mgrid(beta: float, mu: float, M_max: float, n_points: int) -> MGrid:
    if beta <= 0 or mu <= 0 or M_max <= 0 or n_points < 3:
        raise ParameterError("make_mgrid needs positive beta, mu, M_max and n_points >= 3")
    if n_points % 2 == 0:
        n_points += 1
    nodes = np.linspace(-M_max, M_max, n_points)
    h = nodes[1] - nodes[0]
    weights = np.full(n_points, h)
    weights[0] = weights[-1] = h / 2
    # the kink of e^{-beta|m|} at the centre node limits the trapezoid rule to
    # relative accuracy (beta h)^2/12, which is what the grid declares
    test = np.sum(weights * np.exp(-beta * np.abs(nodes)))
    exact = 2 / beta * (1 - math.exp(-beta * M_max))
    err = abs(test - exact) / exact
    declared = 1.05 * (beta * h) ** 2 / 12 + 1e-14
    if err > declared:
        raise ParameterError(f"m-grid quadrature self-test failed: {err:.2e} > {declared:.2e}")
    return MGrid(nodes, weights, float(beta), float(mu), float(err), float(declared))


@dataclass(frozen=True)
class AngleLine:
    angle: float
    i_lo: int
    i_hi: int

    @property
    def count(self) -> int:
        return self.i_hi - self.i_lo + 1


@dataclass(frozen=True)
class TauGrid:
    """Radial lines with radii rho * q^{i/L} for i in [i_lo, i_hi] on each line.

    The first line is the main direction; the remaining lines (if any) fill the
    disc D(0, rho) or a thin sector around the main direction.
    """

    direction: float
    q: float
    L: int
    rho: float
    lines: tuple

    @property
    def ratio(self) -> float:
        return self.q ** (1.0 / self.L)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([ln.count for ln in self.lines])])

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def radius(self, i) -> np.ndarray:
        return self.rho * np.exp(np.asarray(i, dtype=float) * math.log(self.q) / self.L)

    @property
    def index(self) -> np.ndarray:
        return np.concatenate([np.arange(ln.i_lo, ln.i_hi + 1) for ln in self.lines])

    @property
    def line_id(self) -> np.ndarray:
        return np.concatenate([np.full(ln.count, j) for j, ln in enumerate(self.lines)])

    @property
    def tau(self) -> np.ndarray:
        parts = []
        for ln in self.lines:
            i = np.arange(ln.i_lo, ln.i_hi + 1)
            parts.append(self.radius(i) * np.exp(1j * ln.angle))
        return np.concatenate(parts)

    def line_slice(self, j: int) -> slice:
        off = self.offsets
        return slice(int(off[j]), int(off[j + 1]))

    def ray_nodes(self) -> np.ndarray:
        """Node ids on the main line with radius >= rho."""
        sl = self.line_slice(0)
        idx = np.arange(sl.start, sl.stop)
        return idx[self.index[sl] >= 0]

    def disc_nodes(self) -> np.ndarray:
        return np.nonzero(self.index <= 0)[0]

    def main_line(self) -> np.ndarray:
        sl = self.line_slice(0)
        return np.arange(sl.start, sl.stop)


def make_taugrid(direction: float, rho: float, r_max: float, L: int, n_disc: int,
                 q: float = 2.0, n_angles: int = 8, r_min: Optional[float] = None) -> TauGrid:
    """Main ray from r_min to r_max plus ``n_angles - 1`` extra disc lines inside rho.

    ``n_disc`` counts the radial levels strictly inside rho; ``r_min`` (if given)
    overrides it.
    """
    if rho <= 0 or r_max <= 0 or L <= 0 or q <= 1 or n_disc < 0:
        raise ParameterError("make_taugrid needs positive rho, r_max, L and q > 1")
    if r_max <= rho:
        raise ParameterError("r_max must exceed rho")
    step = math.log(q) / L
    if r_min is not None:
        n_disc = max(0, int(math.ceil(math.log(rho / r_min) / step)))
    i_hi = int(math.floor(math.log(r_max / rho) / step + 1e-9))
    lines = [AngleLine(float(direction), -n_disc, i_hi)]
    for j in range(1, n_angles):
        lines.append(AngleLine(float(direction + 2 * math.pi * j / n_angles), -n_disc, 0))
    return TauGrid(float(direction), float(q), int(L), float(rho), tuple(lines))


def make_sector_grid(direction: float, r_min: float, r_max: float, L: int, q: float,
                     half_aperture: float = 0.0, n_side: int = 0, rho: float = 1.0) -> TauGrid:
    """Thin sector: main ray plus ``n_side`` lines on each side up to half_aperture."""
    if r_min <= 0 or r_max <= r_min:
        raise ParameterError("sector grid needs 0 < r_min < r_max")
    step = math.log(q) / L
    i_lo = int(math.floor(math.log(r_min / rho) / step))
    i_hi = int(math.ceil(math.log(r_max / rho) / step))
    lines = [AngleLine(float(direction), i_lo, i_hi)]
    for s in range(1, n_side + 1):
        a = half_aperture * s / n_side
        lines.append(AngleLine(float(direction + a), i_lo, i_hi))
        lines.append(AngleLine(float(direction - a), i_lo, i_hi))
    return TauGrid(float(direction), float(q), int(L), float(rho), tuple(lines))


@dataclass(frozen=True)
class GridFunction:
    values: np.ndarray
    taugrid: Optional[TauGrid]
    mgrid: MGrid
    kind: str
    flags: np.ndarray = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.ndim == 1:
            vals = vals[None, :]
        if not np.all(np.isfinite(vals)):
            raise ParameterError("grid function contains non-finite values")
        if self.kind not in KINDS:
            raise ParameterError(f"unknown grid function kind {self.kind}")
        object.__setattr__(self, "values", vals)
        if self.flags is None:
            object.__setattr__(self, "flags", np.zeros(vals.shape[0], dtype=bool))

    def with_values(self, values, flags=None) -> "GridFunction":
        return GridFunction(values, self.taugrid, self.mgrid, self.kind,
                            self.flags if flags is None else flags)

    def __add__(self, other):
        return self.with_values(self.values + other.values, self.flags | other.flags)

    def __sub__(self, other):
        return self.with_values(self.values - other.values, self.flags | other.flags)

    def scale(self, c):
        return self.with_values(c * self.values)


@dataclass(frozen=True)
class NormSpec:
    """Weighted sup norm parameters.

    ``exp_q_alpha_rho``: weight exp(-(k/2)log^2|tau+delta|/log q - alpha log|tau+delta|)
    ``exp_q_nu``: weight exp(-(k/2)log^2|tau|/log q - nu log|tau|)
    ``e_beta_mu``: m-weight only.
    """

    family: str
    k: float = 1.0
    beta: float = 1.0
    mu: float = 2.0
    q: float = 2.0
    alpha: float = 0.0
    nu: float = 0.0
    rho: float = 1.0
    delta: Optional[float] = None

    def __post_init__(self):
        if self.family not in ("exp_q_alpha_rho", "exp_q_nu", "e_beta_mu"):
            raise ParameterError(f"unknown norm family {self.family}")
        if self.family == "exp_q_alpha_rho" and self.delta is None:
            object.__setattr__(self, "delta", 2 * self.rho)

    def tau_log_weight(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=complex)
        lq = math.log(self.q)
        if self.family == "exp_q_alpha_rho":
            r = np.log(np.abs(tau + self.delta))
            return -0.5 * float(self.k) * r**2 / lq - self.alpha * r
        if self.family == "exp_q_nu":
            r = np.log(np.abs(tau))
            return -0.5 * float(self.k) * r**2 / lq - self.nu * r
        return np.zeros(tau.shape)

    def m_weight(self, m) -> np.ndarray:
        a = np.abs(np.asarray(m, dtype=float))
        return (1 + a) ** self.mu * np.exp(self.beta * a)


_COMPATIBLE = {
    "exp_q_alpha_rho": ("borel_k1_domain",),
    "exp_q_nu": ("borel_k2_domain",),
    "e_beta_mu": ("m_only", "borel_k1_domain", "borel_k2_domain"),
}


def weighted_norm(f: GridFunction, spec: NormSpec, nodes: Optional[np.ndarray] = None) -> float:
    """Discrete weighted sup norm; flagged (extrapolated) nodes are skipped."""
    if f.kind not in _COMPATIBLE[spec.family]:
        raise DomainMismatch(f"{f.kind} data cannot carry the {spec.family} norm")
    mw = spec.m_weight(f.mgrid.nodes)
    if f.taugrid is None:
        tw = np.zeros(f.values.shape[0])
    else:
        tw = spec.tau_log_weight(f.taugrid.tau)
    keep = ~f.flags
    if nodes is not None:
        mask = np.zeros_like(keep)
        mask[nodes] = True
        keep &= mask
    if not keep.any():
        return 0.0
    rows = np.abs(f.values[keep]) * mw[None, :]
    return float(np.max(rows.max(axis=1) * np.exp(tw[keep])))


def profile_norm(profile, grid: MGrid, beta=None, mu=None) -> float:
    beta = grid.beta if beta is None else beta
    mu = grid.mu if mu is None else mu
    a = np.abs(grid.nodes)
    return float(np.max(np.abs(profile) * (1 + a) ** mu * np.exp(beta * a)))


def _check_decay(profile, name, tol):
    p = np.abs(np.asarray(profile))
    top = p.max(initial=0.0)
    if top == 0:
        return
    edge = max(p[0], p[-1])
    if edge > tol * top:
        raise TruncationError(f"{name} carries {edge / top:.2e} relative mass at the m boundary")


def _sample_shifted(f, grid: MGrid) -> np.ndarray:
    """Matrix S[i, j] = f(m_i - m_j), zero outside the grid."""
    n = grid.n
    if grid.uniform:
        centre = n // 2
        k = np.arange(n)[:, None] - np.arange(n)[None, :] + centre
        ok = (k >= 0) & (k < n)
        out = np.zeros((n, n), dtype=complex)
        out[ok] = np.asarray(f, dtype=complex)[k[ok]]
        return out
    diff = grid.nodes[:, None] - grid.nodes[None, :]
    re = np.interp(diff, grid.nodes, np.real(f), left=0.0, right=0.0)
    im = np.interp(diff, grid.nodes, np.imag(f), left=0.0, right=0.0)
    return re + 1j * im


def polyval(coeffs, x):
    """Evaluate a polynomial given low-to-high coefficients."""
    return np.polynomial.polynomial.polyval(x, np.asarray(coeffs, dtype=complex))


def convolution_matrix(f, Qpoly, grid: MGrid, tol: float = 1e-8) -> np.ndarray:
    """K with (K g)_i = sum_j w_j f(m_i - m_j) Q(i m_j) g_j."""
    _check_decay(f, "kernel profile", tol)
    S = _sample_shifted(f, grid)
    return S * (grid.weights * polyval(Qpoly, 1j * grid.nodes))[None, :]


def mconvolve(f, g, Qpoly, grid: MGrid, tol: float = 1e-8) -> np.ndarray:
    """Quadrature of the integral of f(m - m1) Q(i m1) g(m1) dm1 at every node."""
    g = np.asarray(g, dtype=complex)
    if not np.any(g):
        return np.zeros(grid.n, dtype=complex)
    _check_decay(g, "convolved profile", tol)
    return convolution_matrix(f, Qpoly, grid, tol) @ g


def convolution_bound(grid: MGrid, mu: float, deg_Q: int, deg_R: int, Q_over_R_max: float,
                      n_inner: int = 4001, span: float = 400.0) -> float:
    """Sup over m of (1+|m|)^{mu-deg R} times the integral of
    (1+|m-m1|)^{-mu} (1+|m1|)^{deg Q - mu} dm1, scaled by sup|Q|/|R|-type constant."""
    m1 = np.linspace(-span, span, n_inner)
    w = np.full(m1.size, m1[1] - m1[0])
    best = 0.0
    for m in np.linspace(0, grid.nodes[-1], 41):
        val = np.sum(w * (1 + np.abs(m - m1)) ** (-mu) * (1 + np.abs(m1)) ** (deg_Q - mu))
        best = max(best, (1 + abs(m)) ** (mu - deg_R) * val)
    return Q_over_R_max * best


@lru_cache(maxsize=256)
def shift_plan(grid: TauGrid, p: int):
    """Index map for tau -> q^{p/L} tau.

    Returns (source, inner, outer): ``source[n]`` is the node read for node n,
    ``inner``/``outer`` mark nodes whose target falls off the line. Inner
    targets read the innermost node of the line, outer ones are left for the
    extrapolation rule.
    """
    size = grid.size
    source = np.empty(size, dtype=np.int64)
    inner = np.zeros(size, dtype=bool)
    outer = np.zeros(size, dtype=bool)
    off = grid.offsets
    for j, ln in enumerate(grid.lines):
        i = np.arange(ln.i_lo, ln.i_hi + 1)
        t = i + p
        lo = t < ln.i_lo
        hi = t > ln.i_hi
        tt = np.clip(t, ln.i_lo, ln.i_hi)
        source[off[j]:off[j + 1]] = off[j] + (tt - ln.i_lo)
        inner[off[j]:off[j + 1]] = lo
        outer[off[j]:off[j + 1]] = hi
    source.flags.writeable = False
    return source, inner, outer


def shift_exponent(grid: TauGrid, gamma) -> int:
    g = as_exponent(gamma) * grid.L
    if g.denominator != 1:
        raise AlignmentError(f"dilation exponent {gamma} is not a multiple of 1/{grid.L}")
    return int(g)


def _extrapolate_outer(values, grid: TauGrid, p: int, outer_nodes):
    """Log-quadratic envelope fit on the last five nodes of each affected line."""
    out = np.zeros((outer_nodes.size, values.shape[1]), dtype=complex)
    line_id = grid.line_id
    idx = grid.index
    step = math.log(grid.q) / grid.L
    for row, n in enumerate(outer_nodes):
        j = line_id[n]
        ln = grid.lines[j]
        sl = grid.line_slice(j)
        tail = values[sl][-5:]
        s_tail = (np.arange(ln.i_hi - tail.shape[0] + 1, ln.i_hi + 1)) * step
        s_new = (idx[n] + p) * step
        mag = np.abs(tail)
        with np.errstate(divide="ignore"):
            logmag = np.log(np.where(mag > 0, mag, 1e-300))
        phase = np.unwrap(np.angle(tail), axis=0)
        deg = min(2, tail.shape[0] - 1)
        cm = np.polyfit(s_tail, logmag, deg)
        cp = np.polyfit(s_tail, phase, min(1, deg))
        lm = np.polyval(cm, s_new) if cm.ndim == 1 else np.array(
            [np.polyval(cm[:, c], s_new) for c in range(cm.shape[1])])
        ph = np.array([np.polyval(cp[:, c], s_new) for c in range(cp.shape[1])])
        out[row] = np.exp(np.minimum(lm, 700.0) + 1j * ph)
    return out


def dilate_values(values: np.ndarray, grid: TauGrid, gamma, flags=None):
    """Array form of ``dilate``: returns (new_values, new_flags)."""
    p = shift_exponent(grid, gamma)
    if p == 0:
        return values, (np.zeros(values.shape[0], bool) if flags is None else flags)
    source, inner, outer = shift_plan(grid, p)
    out = values[source]
    new_flags = np.zeros(values.shape[0], dtype=bool) if flags is None else flags[source].copy()
    if outer.any():
        nodes = np.nonzero(outer)[0]
        out[nodes] = _extrapolate_outer(values, grid, p, nodes)
        new_flags[nodes] = True
    return out, new_flags


def dilate(f: GridFunction, gamma) -> GridFunction:
    """Exact dilation tau -> q^gamma tau by radial index shift."""
    if f.taugrid is None:
        raise DomainMismatch("m-only data cannot be dilated")
    vals, flags = dilate_values(f.values, f.taugrid, gamma, f.flags)
    return GridFunction(vals, f.taugrid, f.mgrid, f.kind, flags)


def write_csv(f: GridFunction, path) -> None:
    tau = f.taugrid.tau if f.taugrid is not None else np.zeros(f.values.shape[0])
    lines = ["re_tau,im_tau,m,re_val,im_val"]
    for a, t in enumerate(tau):
        for b, m in enumerate(f.mgrid.nodes):
            v = f.values[a, b]
            lines.append(f"{t.real:.17g},{t.imag:.17g},{m:.17g},{v.real:.17g},{v.imag:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path, taugrid: Optional[TauGrid], mgrid: MGrid, kind: str) -> GridFunction:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    vals = (data[:, 3] + 1j * data[:, 4]).reshape(-1, mgrid.n)
    return GridFunction(vals, taugrid, mgrid, kind)
