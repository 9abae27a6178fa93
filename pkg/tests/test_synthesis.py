import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsum.borelplane import RayData
from qsum.errors import DomainError
from qsum.qcore import QFrame
from qsum.synthesis import (SectorialSolution, SolverSettings, extend_inward, qlaplace,
                            recursion_consistency, residual_check, solve_direction)

FRAME = QFrame(16, 1, 2)
DIRECTION = 0.3


def borel_ray(frame, k, coeffs, direction=DIRECTION, r_min=1e-12, r_max=1e12, L=40):
    """Ray samples of the order-k Borel transform of sum_n coeffs[n] T^n."""
    step = frame.logq / L
    i = np.arange(math.floor(math.log(r_min) / step), math.ceil(math.log(r_max) / step) + 1)
    r = np.exp(i * step)
    u = r * np.exp(1j * direction)
    vals = sum(c * u**n / frame.qk(k) ** (n * (n - 1) / 2) for n, c in enumerate(coeffs))
    return RayData(direction, r, np.asarray(vals, dtype=complex)[:, None], step)


@pytest.mark.parametrize("k", [FRAME.k1, FRAME.kappa, FRAME.k2], ids=["k1", "kappa", "k2"])
@pytest.mark.parametrize("n", range(7))
def test_round_trip_monomials(k, n):
    coeffs = [0] * n + [1]
    ray = borel_ray(FRAME, k, coeffs)
    T = np.array([0.01, 0.1, 0.4]) * np.exp(1j * DIRECTION)
    got, tail = qlaplace(FRAME, k, ray, T, delta_tilde=0.1)
    rel = np.abs(got[:, 0] - T**n) / np.abs(T**n)
    assert rel.max() <= 1e-6
    assert tail.max() <= 1e-8


def test_round_trip_other_q():
    frame = QFrame(2.0, 1, 3)
    for k in (frame.k1, frame.kappa, frame.k2):
        ray = borel_ray(frame, k, [1, -2, 0.5], L=64, r_min=1e-14, r_max=1e14)
        T = np.array([0.05, 0.2]) * np.exp(1j * DIRECTION)
        got, _ = qlaplace(frame, k, ray, T, 0.1)
        assert np.allclose(got[:, 0], 1 - 2 * T + 0.5 * T**2, rtol=1e-6, atol=0)


def test_laplace_of_zero():
    ray = borel_ray(FRAME, 2, [0.0])
    got, _ = qlaplace(FRAME, 2, ray, np.array([0.1j + 0.05]), 0.1)
    assert not np.any(got)


def test_laplace_domain_errors():
    ray = borel_ray(FRAME, 2, [1.0])
    with pytest.raises(DomainError):
        qlaplace(FRAME, 2, ray, np.array([0.0]), 0.1)
    # opposite to the ray the kernel has its zeros
    with pytest.raises(DomainError):
        qlaplace(FRAME, 2, ray, np.array([0.1 * np.exp(1j * (DIRECTION + np.pi))]), 0.1)
    with pytest.raises(DomainError):
        qlaplace(FRAME, 2, ray, np.array([2.0 * np.exp(1j * DIRECTION)]), 0.1, radius=1.0)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=2, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=5),
       st.sampled_from([1, 2]),
       st.floats(0.005, 0.05))
def test_dilation_commutes_with_multiplication(coeffs, k, r):
    # T L[w](q^{1/k} T) = L[tau w](T)
    step = FRAME.logq / 40
    ray = borel_ray(FRAME, k, coeffs)
    shifted = RayData(ray.direction, ray.radii, ray.values * (ray.radii * np.exp(1j * DIRECTION))[:, None], step)
    T = np.array([r * np.exp(1j * DIRECTION)])
    left = T * qlaplace(FRAME, k, ray, T * FRAME.qk(k), 0.1)[0][:, 0]
    right = qlaplace(FRAME, k, shifted, T, 0.1)[0][:, 0]
    scale = max(np.abs(right).max(), np.abs(T).max() * sum(abs(c) for c in coeffs) * 1e-3)
    assert np.abs(left - right).max() <= 1e-9 * scale + 1e-300


def test_extend_inward_matches_series():
    coeffs = np.array([[1.0], [0.5], [-0.25]], dtype=complex)
    full = borel_ray(FRAME, 2, coeffs[:, 0])
    cut = RayData(full.direction, full.radii[400:], full.values[400:], full.log_step)
    borel = coeffs / FRAME.qk(2) ** (np.arange(3) * (np.arange(3) - 1) / 2)[:, None]
    ext, mismatch = extend_inward(cut, borel, r_min=full.radii[0] * 1.0001)
    assert mismatch < 1e-14
    assert ext.radii.size == full.radii.size
    assert np.allclose(ext.radii, full.radii, rtol=1e-12)
    assert np.allclose(ext.values, full.values, rtol=1e-12)


# ---------------------------------------------------------------- one Borel direction of the problem

@pytest.fixture(scope="module")
def direction_data(make_spec):
    spec = make_spec(n_m=41)
    return spec, solve_direction(spec, 0.0, SolverSettings(L=80))


def test_recursion_consistency_small_grid(direction_data):
    spec, dd = direction_data
    rep = recursion_consistency(spec, dd.w1, 12)
    assert rep["n_nodes"] > 0
    assert rep["sup_rel_diff"] <= 1e-5


def test_residual_and_fault_injection(direction_data):
    spec, dd = direction_data
    sol = SectorialSolution.from_direction(spec, dd)
    rng = np.random.default_rng(1)
    T = np.exp(rng.uniform(math.log(1e-4), math.log(0.2), 6)) * np.exp(1j * rng.uniform(-0.3, 0.3, 6))
    ok = residual_check(spec, sol, T, list(rng.integers(0, spec.mgrid.n, 6)))
    assert ok["passed"], ok["max_relative_residual"]
    bad = residual_check(spec, sol, T, perturb=0.01)
    assert bad["max_relative_residual"] >= 1e-3


def test_solution_is_linear_in_ray_data(direction_data):
    spec, dd = direction_data
    sol = SectorialSolution.from_direction(spec, dd)
    T = np.array([0.01, 0.05j + 0.02])
    U = sol.U(T)
    doubled = SectorialSolution(spec, 0, 0.0, RayData(dd.w2_ray.direction, dd.w2_ray.radii,
                                                      2 * dd.w2_ray.values, dd.w2_ray.log_step),
                                dd.psi_k2)
    assert np.allclose(doubled.U(T), 2 * U, rtol=1e-13, atol=0)


def test_pipeline_sums_agree_with_stored_table(pipeline_run):
    out, _ = pipeline_run
    rows = (out / "sum_u.csv").read_text().splitlines()
    assert rows[0].startswith("p,re_t")
    vals = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    assert np.all(np.isfinite(vals))
    # the quadrature error estimate is small against the values themselves
    u = np.hypot(vals[:, 7], vals[:, 8])
    assert np.all(vals[:, 9] <= 1e-6 * np.maximum(u, 1e-30) + 1e-12)
    summary = json.loads((out / "sum.json").read_text())
    assert summary["summary"]["status"] == "pass"
