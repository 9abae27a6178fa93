import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsum.errors import AlignmentError, DomainMismatch, ParameterError, TruncationError
from qsum.grids import (GridFunction, NormSpec, convolution_bound, dilate, make_mgrid, make_taugrid,
                        mconvolve, polyval, read_csv, weighted_norm, write_csv)


@pytest.fixture(scope="module")
def mgrid():
    return make_mgrid(1.0, 3.0, 12.0, 241)


@pytest.fixture(scope="module")
def taugrid():
    return make_taugrid(0.3, 0.5, 2.0**6, 4, 3, q=2.0, n_angles=3)


def random_gf(rng, taugrid, mgrid, kind="borel_k2_domain"):
    v = rng.normal(size=(taugrid.size, mgrid.n)) + 1j * rng.normal(size=(taugrid.size, mgrid.n))
    return GridFunction(v, taugrid, mgrid, kind)


def test_mgrid_kink_self_test():
    # the closed form 2 is the target; a uniform trapezoid rule through the kink at m=0
    # carries an O(h^2) error here, see the ledger entry on the m-quadrature self-test
    g = make_mgrid(1.0, 3.0, 40.0, 801)
    assert abs(np.sum(g.weights * np.exp(-np.abs(g.nodes))) - 2) < 1e-8


def test_mgrid_declared_tolerance():
    g = make_mgrid(1.0, 3.0, 40.0, 801)
    assert g.selftest_error <= g.declared_tol
    # trapezoid through a kink: h coth(h/2) = 2 + h^2/6 + O(h^4)
    h = g.step
    total = np.sum(g.weights * np.exp(-np.abs(g.nodes)))
    assert total == pytest.approx(h / math.tanh(h / 2) - h * math.exp(-40.0) / math.tanh(h / 2), rel=1e-12)


def test_mgrid_smooth_integrand_is_spectral():
    g = make_mgrid(1.0, 3.0, 12.0, 241)
    assert abs(np.sum(g.weights * np.exp(-g.nodes**2)) - math.sqrt(math.pi)) < 1e-13


def test_mgrid_bad_parameters():
    with pytest.raises(ParameterError):
        make_mgrid(0.0, 3.0, 40.0, 801)
    with pytest.raises(ParameterError):
        make_mgrid(1.0, 3.0, -1.0, 801)


def test_taugrid_ray_count():
    g = make_taugrid(0.0, 1.0, 2.0**8, 6, 0, q=2.0)
    assert g.ray_nodes().size == 49
    assert np.allclose(np.abs(g.tau[g.ray_nodes()]), 2.0 ** (np.arange(49) / 6))


def test_taugrid_degenerate():
    with pytest.raises(ParameterError):
        make_taugrid(0.0, 1.0, 1.0, 6, 0)
    with pytest.raises(ParameterError):
        make_taugrid(0.0, -1.0, 8.0, 6, 0)


def test_norm_of_zero(taugrid, mgrid):
    z = GridFunction(np.zeros((taugrid.size, mgrid.n)), taugrid, mgrid, "borel_k2_domain")
    assert weighted_norm(z, NormSpec("exp_q_nu", k=2, q=2.0)) == 0.0


def test_norm_cancelled_m_weight(taugrid, mgrid):
    spec = NormSpec("exp_q_alpha_rho", k=1.0, beta=1.0, mu=3.0, q=2.0, alpha=0.0, rho=0.5, delta=1.0)
    m = mgrid.nodes
    prof = np.exp(-np.abs(m)) * (1 + np.abs(m)) ** -3.0
    f = GridFunction(np.tile(prof, (taugrid.size, 1)), taugrid, mgrid, "borel_k1_domain")
    r = np.log(np.abs(taugrid.tau + 1.0))
    expect = np.exp(-0.5 * r**2 / math.log(2.0)).max()
    assert weighted_norm(f, spec) == pytest.approx(expect, rel=1e-12)


def test_norm_matches_double_loop(taugrid, mgrid):
    rng = np.random.default_rng(3)
    f = random_gf(rng, taugrid, mgrid, "borel_k1_domain")
    spec = NormSpec("exp_q_alpha_rho", k=2.0, beta=1.0, mu=3.0, q=2.0, alpha=0.9, rho=0.5, delta=1.0)
    best = 0.0
    lq = math.log(2.0)
    for a, t in enumerate(taugrid.tau):
        lt = math.log(abs(t + 1.0))
        tw = math.exp(-lt**2 / lq - 0.9 * lt)
        for b, m in enumerate(mgrid.nodes):
            best = max(best, (1 + abs(m)) ** 3 * math.exp(abs(m)) * tw * abs(f.values[a, b]))
    assert weighted_norm(f, spec) == pytest.approx(best, rel=1e-13)


def test_norm_kind_mismatch(taugrid, mgrid):
    f = GridFunction(np.ones((taugrid.size, mgrid.n)), taugrid, mgrid, "borel_k1_domain")
    with pytest.raises(DomainMismatch):
        weighted_norm(f, NormSpec("exp_q_nu"))


@given(k1=st.floats(0.5, 3.0), dk=st.floats(0.0, 3.0), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_norm_monotone_in_k_outside_unit_disc(k1, dk, seed):
    mg = make_mgrid(1.0, 2.0, 6.0, 61)
    tg = make_taugrid(0.0, 1.0, 2.0**5, 3, 0, q=2.0, n_angles=1)
    rng = np.random.default_rng(seed)
    f = random_gf(rng, tg, mg)
    a = weighted_norm(f, NormSpec("exp_q_nu", k=k1, q=2.0, mu=2.0))
    b = weighted_norm(f, NormSpec("exp_q_nu", k=k1 + dk, q=2.0, mu=2.0))
    assert b <= a


def test_gaussian_convolution(mgrid):
    m = mgrid.nodes
    g = np.exp(-m**2)
    out = mconvolve(g, g, [1.0], mgrid)
    assert np.abs(out - math.sqrt(math.pi / 2) * np.exp(-m**2 / 2)).max() < 1e-12


def test_convolution_zero_and_truncation(mgrid):
    m = mgrid.nodes
    assert not np.any(mconvolve(np.exp(-m**2), np.zeros(mgrid.n), [1.0], mgrid))
    with pytest.raises(TruncationError):
        mconvolve(np.exp(-m**2), np.exp(-np.abs(m) / 10), [1.0], mgrid)


@given(c=st.complex_numbers(max_magnitude=100, allow_nan=False, allow_infinity=False),
       s1=st.floats(0.3, 2.0), s2=st.floats(0.3, 2.0), shift=st.floats(-2, 2))
@settings(max_examples=40, deadline=None)
def test_convolution_bilinear_and_scaling(c, s1, s2, shift):
    mg = make_mgrid(1.0, 3.0, 12.0, 121)
    m = mg.nodes
    f = np.exp(-((m - shift) ** 2) / s1)
    g1 = np.exp(-(m**2) / s2)
    g2 = np.exp(-((m + 1) ** 2))
    Q = [1.0, 0.5]
    lhs = mconvolve(f, g1 + c * g2, Q, mg)
    rhs = mconvolve(f, g1, Q, mg) + c * mconvolve(f, g2, Q, mg)
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + abs(c)))
    assert np.allclose(mconvolve(f, g1, [c], mg), c * mconvolve(f, g1, [1.0], mg), atol=1e-12 * (1 + abs(c)))


def test_convolution_norm_bound():
    mg = make_mgrid(1.0, 3.0, 12.0, 241)
    m = mg.nodes
    b = 1.0 / (1 + m**2)                      # 1/R(im) with R(X) = 1 - X^2
    f = np.exp(-np.abs(m)) * (1 + np.abs(m)) ** -3 * np.exp(-m**2 / 8)
    g = np.exp(-np.abs(m)) * (1 + np.abs(m)) ** -3 * np.cos(m) * np.exp(-m**2 / 8)
    Q = [1.0, 1.0]
    conv = b * mconvolve(f, g, Q, mg)
    w = lambda v: np.max(np.abs(v) * (1 + np.abs(m)) ** 3 * np.exp(np.abs(m)))
    qr = np.max(np.abs(polyval(Q, 1j * m)) / (1 + np.abs(m)) ** 1 * (1 + np.abs(m)) ** 2 * np.abs(b))
    C2 = convolution_bound(mg, 3.0, 1, 2, qr)
    assert w(conv) <= C2 * w(f) * w(g)


def test_dilate_zero_and_one_step(taugrid, mgrid):
    rng = np.random.default_rng(4)
    f = random_gf(rng, taugrid, mgrid)
    assert np.array_equal(dilate(f, 0).values, f.values)
    g = dilate(f, f"1/{taugrid.L}")
    sl = taugrid.line_slice(0)
    # node i now holds the value from node i + 1 on the same line
    assert np.array_equal(g.values[sl][:-1], f.values[sl][1:])
    assert g.flags[sl][-1] and not g.flags[sl][:-1].any()


def test_dilate_alignment(taugrid, mgrid):
    f = random_gf(np.random.default_rng(5), taugrid, mgrid)
    with pytest.raises(AlignmentError):
        dilate(f, "1/3")


@given(a=st.integers(-8, 8), b=st.integers(-8, 8), seed=st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_dilate_composition(a, b, seed):
    mg = make_mgrid(1.0, 2.0, 4.0, 21)
    tg = make_taugrid(0.0, 0.5, 2.0**6, 4, 6, q=2.0, n_angles=1)
    f = random_gf(np.random.default_rng(seed), tg, mg)
    L = tg.L
    two = dilate(dilate(f, f"{a}/{L}"), f"{b}/{L}")
    one = dilate(f, f"{a + b}/{L}")
    # compare where neither path clamped or extrapolated
    idx = tg.index
    inside = lambda i: (i >= idx.min()) & (i <= idx.max())
    ok = inside(idx + b) & inside(idx + a + b)
    assert np.array_equal(two.values[ok], one.values[ok])


def test_csv_round_trip(tmp_path, taugrid, mgrid):
    f = random_gf(np.random.default_rng(6), taugrid, mgrid)
    path = tmp_path / "f.csv"
    write_csv(f, path)
    g = read_csv(path, taugrid, mgrid, f.kind)
    assert np.array_equal(g.values, f.values)
