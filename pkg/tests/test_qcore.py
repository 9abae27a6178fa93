import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsum.errors import NonConvergence, ParameterError, PreconditionViolated
from qsum.qcore import (FormalSeries, QFrame, as_exponent, log_theta, pi_q, qborel_formal,
                        qborel_inverse, qborel_shift_composite, qborel_shift_image, theta_eval,
                        theta_growth_check, theta_vec)


def brute_theta(q, k, x, n_max=100):
    n = np.arange(-n_max, n_max + 1)
    return complex(np.sum(np.exp(-0.5 * n * (n - 1) * math.log(q) / k + n * np.log(complex(x)))))


def off_zero_points(q, k, count, rng):
    # keep clear of the zero rays -q^{Z/k}
    r = np.exp(rng.uniform(-3, 3, count))
    a = rng.uniform(-2.6, 2.6, count)
    return r * np.exp(1j * a)


def test_qframe_rejects_bad_parameters():
    with pytest.raises(ParameterError):
        QFrame(1.0, 1, 2)
    with pytest.raises(ParameterError):
        QFrame(2.0, 2, 2)
    assert QFrame(16, 1, 2).kappa == Fraction(2)
    assert QFrame(2, 2, 3).kappa == Fraction(6)


def test_theta_two_dominant_terms():
    # at q = 1e6 every term other than n = 0, 1 carries a factor of at most 1e-6
    f = QFrame(1e6, 1, 2)
    for x in (1.0, 0.5, 0.8j):
        val, N = theta_eval(f, 1, x, tol=1e3, return_index=True)
        assert N >= 1
        assert abs(val - (1 + x)) <= 3e-6 * abs(1 + x)


def test_theta_matches_brute_force_at_one():
    f = QFrame(2, 1, 2)
    assert theta_eval(f, 1, 1.0, tol=1e-16) == pytest.approx(brute_theta(2, 1, 1.0), rel=1e-14)


def test_theta_first_shift():
    f = QFrame(2, 1, 2)
    qk = f.qk(2)
    for x in [0.3 + 0.2j, 2.0, -1.7j]:
        ratio = theta_eval(f, 2, qk * x) / (qk * x * theta_eval(f, 2, x))
        assert abs(ratio - 1) < 1e-12


@pytest.mark.parametrize("q,k", [(2, 1), (2, 2), (4, 2)])
def test_theta_functional_equation(q, k):
    f = QFrame(q, 1, 3)
    rng = np.random.default_rng(1)
    qk = f.qk(k)
    for x in off_zero_points(q, k, 50, rng):
        tx = theta_eval(f, k, x)
        for m in range(-3, 4):
            lhs = theta_eval(f, k, qk**m * x)
            rhs = qk ** (m * (m + 1) / 2) * x**m * tx
            assert abs(lhs - rhs) <= 1e-9 * abs(lhs)


def test_log_theta_matches_direct_sum():
    f = QFrame(4, 1, 2)
    rng = np.random.default_rng(2)
    x = off_zero_points(4, 2, 30, rng)
    direct = np.array([theta_eval(f, 2, v) for v in x])
    assert np.allclose(theta_vec(f, 2, x), direct, rtol=1e-11, atol=0)
    assert np.allclose(np.exp(log_theta(f, 2, x)), direct, rtol=1e-11, atol=0)


def test_theta_cap_and_bad_input():
    f = QFrame(2, 1, 2)
    with pytest.raises(ParameterError):
        theta_eval(f, 1, 0)
    with pytest.raises(ParameterError):
        theta_eval(f, 1, 1.0, tol=0)
    with pytest.raises(NonConvergence):
        theta_eval(f, 1, 1e300, cap=5)


def test_growth_check_off_zero_ray():
    f = QFrame(2, 1, 2)
    out = theta_growth_check(f, 1, 1.5j, 0.1)
    assert out["holds"]
    # the bound is checked against a direct evaluation of both sides
    C = out["C"]
    lx = math.log(1.5)
    bound = C * 0.1 * math.exp(lx**2 / (2 * math.log(2))) * math.sqrt(1.5)
    assert abs(theta_eval(f, 1, 1.5j)) / bound == pytest.approx(out["ratio"], rel=1e-9)


def test_growth_check_zero_direction():
    f = QFrame(2, 1, 2)
    with pytest.raises(PreconditionViolated):
        theta_growth_check(f, 1, -f.qk(1), 0.1)


def test_growth_check_sweep():
    f = QFrame(2, 1, 2)
    ratios = [theta_growth_check(f, 1, r * np.exp(0.5j), 0.1)["ratio"] for r in (1.0, 10.0, 100.0)]
    assert all(r >= 1.0 for r in ratios)


def test_pi_q_long_product():
    f = QFrame(2, 1, 2)
    direct = math.log(2) * np.prod([1 / (1 - 2.0 ** (-(n + 1))) for n in range(200)])
    assert pi_q(f, 1, tol=1e-14) == pytest.approx(direct, rel=1e-13)


def test_pi_q_large_q():
    f = QFrame(1e6, 1, 2)
    assert pi_q(f, 1) == pytest.approx(math.log(1e6), rel=1e-5)
    assert pi_q(f, 1) > math.log(1e6)
    with pytest.raises(ParameterError):
        pi_q(f, 1, tol=-1)


@given(q=st.floats(1.1, 50), k=st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_pi_q_product_increases_in_k(q, k):
    # log(q)/k falls with k while every product factor grows, so pi_q itself is not monotone
    f = QFrame(q, 1, 2)
    prod = lambda kk: pi_q(f, kk) * kk / math.log(q)
    assert prod(k + 1) > prod(k) > 1.0


def test_pi_q_not_monotone_in_k():
    assert pi_q(QFrame(2, 1, 2), 2) > pi_q(QFrame(2, 1, 2), 1)
    assert pi_q(QFrame(50, 1, 2), 2) < pi_q(QFrame(50, 1, 2), 1)


def test_borel_small_examples():
    f = QFrame(4, 1, 2)
    assert np.allclose(qborel_formal(FormalSeries([1.0]), f, 2).coeffs, [1.0])
    assert np.allclose(qborel_formal(FormalSeries([0, 1.0]), f, 2).coeffs, [0, 1.0])
    assert np.allclose(qborel_formal(FormalSeries([0, 0, 1.0]), f, 2).coeffs, [0, 0, 0.5])


coeff_lists = st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
                       min_size=1, max_size=9)


@given(a=coeff_lists, b=coeff_lists, alpha=st.floats(-10, 10), beta=st.floats(-10, 10))
@settings(max_examples=60, deadline=None)
def test_borel_linear(a, b, alpha, beta):
    n = min(len(a), len(b))
    A, B = FormalSeries(a[:n]), FormalSeries(b[:n])
    f = QFrame(3, 1, 2)
    lhs = qborel_formal(A.scale(alpha) + B.scale(beta), f, 2).coeffs
    rhs = qborel_formal(A, f, 2).coeffs * alpha + qborel_formal(B, f, 2).coeffs * beta
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


@given(a=coeff_lists)
@settings(max_examples=40, deadline=None)
def test_borel_inverse_round_trip(a):
    f = QFrame(5, 1, 3)
    s = FormalSeries(a)
    back = qborel_inverse(qborel_formal(s, f, 3), f, 3)
    assert np.allclose(back.coeffs, s.coeffs, rtol=1e-12, atol=0)


def test_shift_image_identity_case():
    f = QFrame(2, 1, 2)
    s = FormalSeries([1.0, 2.0, 3.0])
    assert np.allclose(qborel_shift_image(s, f, 1, 0, 0).coeffs, qborel_formal(s, f, 1).coeffs)


def test_shift_image_symbolic_T():
    # T * (T) at q=2, k=1: Borel image of T^2 is tau^2/2; composite: tau * 2^0 * sigma^{-1} of tau
    f = QFrame(2, 1, 2)
    s = FormalSeries([0, 1.0, 0, 0, 0, 0])
    img = qborel_shift_image(s, f, 1, 1, 0).coeffs
    comp = qborel_shift_composite(s, f, 1, 1, 0).coeffs
    assert img[2] == pytest.approx(0.5)
    assert np.allclose(img, comp, rtol=1e-14, atol=0)


@given(a=st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
                  min_size=1, max_size=9),
       sigma=st.integers(0, 4),
       j=st.sampled_from([Fraction(0), Fraction(1, 2), Fraction(1), Fraction(-1, 2), Fraction(1, 3),
                          Fraction(2, 3)]),
       k=st.sampled_from([1, 2, 3]))
@settings(max_examples=80, deadline=None)
def test_shift_image_matches_composite(a, sigma, j, k):
    f = QFrame(2, 1, 3)
    s = FormalSeries(a)
    img = qborel_shift_image(s, f, k, sigma, j).coeffs
    comp = qborel_shift_composite(s, f, k, sigma, j).coeffs
    scale = max(np.abs(img).max(), 1e-300)
    assert np.abs(img - comp).max() <= 1e-12 * scale


def test_as_exponent():
    assert as_exponent(0.5) == Fraction(1, 2)
    assert as_exponent("2/3") == Fraction(2, 3)
