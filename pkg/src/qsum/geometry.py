"""Sectors in the epsilon plane, Borel directions and the domains of the Laplace kernels."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GeometryViolation, NoAdmissibleDirection, ParameterError
from .problem import ProblemSpec, RootSet, certify_lower_bound, root_set

TWO_PI = 2 * math.pi


def wrap(a: float) -> float:
    """Angle reduced to [-pi, pi)."""
    return (a + math.pi) % TWO_PI - math.pi


def ccw(a: float, b: float) -> float:
    """Counter-clockwise angular distance from a to b, in [0, 2pi)."""
    return (b - a) % TWO_PI


def angular_distance(a, b):
    d = np.abs((np.asarray(a) - np.asarray(b) + math.pi) % TWO_PI - math.pi)
    return d


@dataclass(frozen=True)
class Sector:
    direction: float
    half_aperture: float
    radius: Optional[float] = None      # None means unbounded

    def __post_init__(self):
        if not (0 < self.half_aperture < math.pi):
            raise ParameterError("sector half-aperture must lie in (0, pi)")
        if self.radius is not None and self.radius <= 0:
            raise ParameterError("sector radius must be positive")

    def contains_angle(self, a) -> np.ndarray:
        return angular_distance(a, self.direction) < self.half_aperture

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        ok = (z != 0) & self.contains_angle(np.angle(z))
        if self.radius is not None:
            ok &= np.abs(z) < self.radius
        return ok

    def intersects(self, other: "Sector") -> bool:
        return angular_distance(self.direction, other.direction) < self.half_aperture + other.half_aperture

    def boundary_args(self) -> Tuple[float, float]:
        return self.direction - self.half_aperture, self.direction + self.half_aperture

    def as_dict(self) -> dict:
        return {"direction": self.direction, "half_aperture": self.half_aperture,
                "radius": self.radius}


@dataclass(frozen=True)
class GoodCovering:
    sectors: Tuple[Sector, ...]

    @property
    def varsigma(self) -> int:
        return len(self.sectors)

    def overlap(self, p: int) -> Sector:
        """The intersection of sectors p and p+1 (cyclically)."""
        a = self.sectors[p]
        b = self.sectors[(p + 1) % self.varsigma]
        lo = a.direction - a.half_aperture
        hi = a.direction + a.half_aperture
        blo = a.direction + wrap(b.direction - b.half_aperture - a.direction)
        bhi = a.direction + wrap(b.direction + b.half_aperture - a.direction)
        lo, hi = max(lo, blo), min(hi, bhi)
        if hi <= lo:
            raise GeometryViolation(f"sectors {p} and {p + 1} do not overlap")
        radius = min(a.radius or math.inf, b.radius or math.inf)
        return Sector((lo + hi) / 2, (hi - lo) / 2, None if math.isinf(radius) else radius)


def check_covering(cov: GoodCovering) -> List[str]:
    """List every violated good-covering condition (empty when valid)."""
    problems = []
    n = cov.varsigma
    if n < 2:
        problems.append("a good covering needs at least two sectors")
    for j in range(n):
        for k in range(j + 1, n):
            adjacent = (k - j) in (1, n - 1)
            hit = cov.sectors[j].intersects(cov.sectors[k])
            if adjacent and not hit:
                problems.append(f"consecutive sectors {j},{k} do not overlap")
            if not adjacent and hit:
                problems.append(f"sectors {j},{k} overlap but are not consecutive")
    ang = np.linspace(-math.pi, math.pi, 4096, endpoint=False)
    covered = np.zeros(ang.shape, dtype=bool)
    for s in cov.sectors:
        covered |= s.contains_angle(ang)
    if not covered.all():
        problems.append("sectors leave directions uncovered")
    return problems


def build_good_covering(varsigma: int, eps0: float, overlap_frac: float) -> GoodCovering:
    """Equal sectors of aperture (2pi/varsigma)(1 + overlap_frac) centred at 2pi p/varsigma."""
    if varsigma < 2:
        raise ParameterError("varsigma must be at least 2")
    if not (0 < overlap_frac < 0.5):
        raise ParameterError("overlap_frac must lie in (0, 1/2)")
    if eps0 <= 0:
        raise ParameterError("eps0 must be positive")
    half = math.pi / varsigma * (1 + overlap_frac)
    if varsigma == 2:
        # two sectors are always adjacent; keep them from covering everything twice
        half = min(half, math.pi * 0.999)
    cov = GoodCovering(tuple(Sector(TWO_PI * p / varsigma, half, eps0) for p in range(varsigma)))
    problems = check_covering(cov)
    if problems:
        raise ParameterError("; ".join(problems))
    return cov


def in_R_domain(T: complex, d: float, delta_tilde: float) -> bool:
    """Whether |1 + r e^{id}/T| > delta_tilde for every r >= 0."""
    if T == 0:
        raise ParameterError("T must be nonzero")
    T = complex(T)
    phase = d - math.atan2(T.imag, T.real)
    inf = abs(math.sin(phase)) if math.cos(phase) < 0 else 1.0
    return inf > delta_tilde


# ---------------------------------------------------------------- singular directions

@dataclass(frozen=True)
class SingularArc:
    centre: float
    half_width: float
    level: int
    source: str

    def distance(self, a: float) -> float:
        return max(0.0, float(angular_distance(a, self.centre)) - self.half_width)


def singular_arcs(spec: ProblemSpec, rootsets: Dict[int, RootSet]) -> List[SingularArc]:
    """Root loci of both divisors plus the singular directions of the level-1 forcing."""
    arcs = []
    for j, rs in sorted(rootsets.items()):
        for c, w in rs.angular_range():
            arcs.append(SingularArc(c, w, j, f"P{j}"))
    for a in spec.forcing_singular_directions():
        arcs.append(SingularArc(a, 0.0, 1, "forcing"))
    return arcs


def _min_distance(arcs: Sequence[SingularArc], a: float) -> float:
    return min(arc.distance(a) for arc in arcs) if arcs else math.pi


def _best_in_arc(arcs: Sequence[SingularArc], lo: float, hi: float, n: int = 721) -> Tuple[float, float]:
    # dense scan refined by the exact gap midpoints falling inside [lo, hi]
    cand = list(np.linspace(lo, hi, n))
    edges = sorted(wrap(x.centre + s * x.half_width) for x in arcs for s in (-1, 1))
    for i, e in enumerate(edges):
        f = edges[(i + 1) % len(edges)]
        mid = e + ccw(e, f) / 2
        off = lo + ccw(lo, mid)
        if off <= hi:
            cand.append(off)
    scores = [_min_distance(arcs, c) for c in cand]
    i = int(np.argmax(scores))
    return float(cand[i]), float(scores[i])


def _free_arc(arcs: Sequence[SingularArc], d: float, level: int) -> Tuple[float, float]:
    """Angular extent (ccw from d backwards, ccw from d forwards) free of level-`level` arcs."""
    back, fwd = math.pi, math.pi
    for arc in arcs:
        if arc.level != level:
            continue
        fwd = min(fwd, ccw(d, arc.centre) - arc.half_width)
        back = min(back, ccw(arc.centre, d) - arc.half_width)
    return back, fwd


@dataclass
class AssociatedFamily:
    directions: List[float]
    borel_sectors: List[Sector]
    delta_tilde: float
    time_sector: Sector
    level_flags: List[int]            # per pair p: 1 (level-k1 pair) or 2 (level-k2 pair)
    covering: GoodCovering
    margins: List[float] = field(default_factory=list)
    certificates: List[dict] = field(default_factory=list)

    @property
    def varsigma(self) -> int:
        return len(self.directions)

    def R_b_contains(self, p: int, T) -> np.ndarray:
        """Membership of T in the bounded domain attached to direction p."""
        T = np.atleast_1d(np.asarray(T, dtype=complex))
        r = (self.covering.sectors[p].radius or math.inf) * (self.time_sector.radius or math.inf)
        ok = np.array([in_R_domain(complex(x), self.directions[p], self.delta_tilde) for x in T])
        return ok & (np.abs(T) < r)

    def as_dict(self) -> dict:
        return {
            "directions": self.directions,
            "directions_deg": [math.degrees(d) for d in self.directions],
            "borel_sectors": [s.as_dict() for s in self.borel_sectors],
            "delta_tilde": self.delta_tilde,
            "time_sector": self.time_sector.as_dict(),
            "level_flags": self.level_flags,
            "covering": [s.as_dict() for s in self.covering.sectors],
            "margins": self.margins,
            "certificates": self.certificates,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AssociatedFamily":
        sec = lambda s: Sector(s["direction"], s["half_aperture"], s["radius"])
        cov = GoodCovering(tuple(sec(s) for s in d["covering"]))
        return cls(list(d["directions"]), [sec(s) for s in d["borel_sectors"]], d["delta_tilde"],
                   sec(d["time_sector"]), list(d["level_flags"]), cov, list(d.get("margins", [])),
                   list(d.get("certificates", [])))


def offset_clearance(fam: AssociatedFamily, rho: float, delta: float) -> float:
    """Distance from -delta to the disc D(0, rho) and to every Borel sector.

    The level-1 weight involves log|tau + delta|, so it is only regular when this is positive.
    """
    out = delta - rho
    for s in fam.borel_sectors:
        gap = max(float(angular_distance(math.pi, s.direction)) - s.half_aperture, 0.0)
        out = min(out, delta * math.sin(gap) if gap < math.pi / 2 else delta)
    return out


def membership_samples(eps_sector: Sector, time_sector: Sector, n: int = 64) -> np.ndarray:
    """Products eps*t over the boundary extremes of both sectors (n points)."""
    ea = np.linspace(*eps_sector.boundary_args(), 4)
    ta = np.linspace(*time_sector.boundary_args(), 4)
    er = np.array([1e-3, 1.0]) * (eps_sector.radius or 1.0) * (1 - 1e-9)
    tr = np.array([1e-3, 1.0]) * (time_sector.radius or 1.0) * (1 - 1e-9)
    pts = [r1 * r2 * np.exp(1j * (a1 + a2)) for a1 in ea for a2 in ta for r1 in er for r2 in tr]
    return np.array(pts[:n])


def check_family(fam: AssociatedFamily) -> List[str]:
    problems = []
    n = fam.varsigma
    for p in range(n):
        pts = membership_samples(fam.covering.sectors[p], fam.time_sector)
        if not np.all(fam.R_b_contains(p, pts)):
            problems.append(f"eps*t leaves the domain of direction {p}")
        # both bounded domains contain a small disc sector around the common bisector
        d0, d1 = fam.directions[p], fam.directions[(p + 1) % n]
        probe = 1e-3 * fam.time_sector.radius * np.exp(1j * (d0 + ccw(d0, d1) / 2))
        if not (fam.R_b_contains(p, probe)[0] and fam.R_b_contains((p + 1) % n, probe)[0]):
            problems.append(f"domains {p} and {p + 1} do not intersect")
    return problems


def choose_directions(spec: ProblemSpec, covering: GoodCovering,
                      rootsets: Optional[Dict[int, RootSet]] = None,
                      time_sector: Optional[Sector] = None, delta_tilde: Optional[float] = None,
                      min_gap: float = math.radians(2.0), certify_grid=None) -> AssociatedFamily:
    """Pick one Borel direction per covering sector and classify consecutive pairs.

    Direction p is searched inside the core arc of sector p (its aperture minus the
    overlaps with its neighbours) so the directions are distinct and cyclically
    ordered; within the core arc it maximises the distance to all singular arcs.
    A pair is a level-k2 pair when no level-1 singular direction separates the two
    directions, and a level-k1 pair otherwise.
    """
    rootsets = rootsets or {1: root_set(spec, 1), 2: root_set(spec, 2)}
    dt = spec.delta_tilde if delta_tilde is None else delta_tilde
    ts = time_sector or Sector(0.0, math.radians(5.0), spec.r_T)
    arcs = singular_arcs(spec, rootsets)
    n = covering.varsigma
    dirs, margins = [], []
    for p, s in enumerate(covering.sectors):
        core = math.pi / n
        d, margin = _best_in_arc(arcs, s.direction - core, s.direction + core)
        if margin < min_gap / 2:
            raise NoAdmissibleDirection(
                f"sector {p}: widest singular-free gap {2 * margin:.3g} rad is below {min_gap:.3g}")
        dirs.append(wrap(d))
        margins.append(margin)
    cap = math.pi / (4 * spec.d_D2)
    borel = [Sector(d, min(cap, m / 2)) for d, m in zip(dirs, margins)]
    flags = []
    for p in range(n):
        d0, d1 = dirs[p], dirs[(p + 1) % n]
        _, fwd = _free_arc(arcs, d0, 1)
        flags.append(2 if ccw(d0, d1) < fwd else 1)
    certs = []
    if certify_grid is not None:
        for p, d in enumerate(dirs):
            g = certify_grid(d)
            certs.append({j: certify_lower_bound(spec, j, g, rootsets[j]).as_dict() for j in (1, 2)})
    fam = AssociatedFamily(dirs, borel, dt, ts, flags, covering, margins, certs)
    problems = check_family(fam)
    if problems:
        raise NoAdmissibleDirection("; ".join(problems))
    return fam
