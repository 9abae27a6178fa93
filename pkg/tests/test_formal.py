import math

import numpy as np
import pytest

from qsum.errors import InsufficientData, ModeUnsupported, ParameterError, TruncationError
from qsum.formal import (build_forcing, eps_expansion, fit_forcing, inverse_fourier, solve_recursion)
from qsum.grids import make_mgrid, mconvolve
from qsum.qcore import QFrame

ZERO_FORCING = [{"kind": "polynomial", "profile": {"kind": "zero"}, "weights": [0.0]}]


@pytest.fixture(scope="module")
def mg():
    return make_mgrid(1.0, 3.0, 12.0, 241)


def test_inverse_fourier_gaussian(mg):
    z = np.linspace(-3, 3, 13)
    got = inverse_fourier(np.exp(-mg.nodes**2), z, mg)
    assert np.abs(got - np.exp(-z**2 / 4) / math.sqrt(2)).max() < 1e-12


def test_inverse_fourier_even_is_real(mg):
    f = np.exp(-mg.nodes**2) * (1 + mg.nodes**2)
    got = inverse_fourier(f, np.linspace(-2, 2, 9), mg)
    assert np.abs(got.imag).max() < 1e-12


def test_inverse_fourier_convolution_product(mg):
    m = mg.nodes
    f = np.exp(-(m - 0.5) ** 2)
    g = np.exp(-m**2 / 2) * np.cos(m)
    psi = mconvolve(f, g, [1.0], mg) / math.sqrt(2 * math.pi)
    z = np.array([0.0, 0.4, 1.1 + 0.2j, -0.8 - 0.3j])
    lhs = inverse_fourier(psi, z, mg)
    rhs = inverse_fourier(f, z, mg) * inverse_fourier(g, z, mg)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_inverse_fourier_errors(mg):
    with pytest.raises(ParameterError):
        inverse_fourier(np.exp(-mg.nodes**2), 1j, mg, beta_prime=0.5)
    with pytest.raises(TruncationError):
        inverse_fourier(np.ones(mg.n), 0.0, mg)


def test_forcing_fit_theta_growth(mg):
    f = QFrame(2, 1, 2)
    g = np.exp(-mg.nodes**2)
    n = np.arange(12)
    F = (2.0 ** (n * (n - 1) / 2))[:, None] * g[None, :]
    fd = fit_forcing(F, f, mg, 1.0, 3.0)
    gnorm = np.max(np.abs(g) * (1 + np.abs(mg.nodes)) ** 3 * np.exp(np.abs(mg.nodes)))
    assert fd.C_F == pytest.approx(gnorm, rel=1e-9)
    assert fd.T0 == pytest.approx(1.0, rel=1e-9)
    assert fd.level1_ok and fd.level2_divergent


def test_forcing_fit_polynomial_and_factorial(mg):
    f = QFrame(2, 1, 2)
    g = np.exp(-mg.nodes**2)
    F = np.zeros((10, mg.n))
    F[0] = g
    assert not fit_forcing(F, f, mg, 1.0, 3.0).level2_divergent
    F = np.array([g / math.factorial(n) for n in range(10)])
    fd = fit_forcing(F, f, mg, 1.0, 3.0)
    assert fd.level1_ok and not fd.level2_divergent
    with pytest.raises(InsufficientData):
        fit_forcing(F[:5], f, mg, 1.0, 3.0)


def test_bundled_forcing(bundled_spec):
    fd = build_forcing(bundled_spec, 15)
    assert fd.level1_ok and fd.level2_divergent


def direct_recursion(spec, eps, N):
    """Second implementation: explicit quadrature loops, no convolution matrices."""
    q = spec.frame.q
    k1, k2 = spec.frame.k1, spec.frame.k2
    m = spec.mgrid.nodes
    w = spec.mgrid.weights
    h = m[1] - m[0]
    n_m = m.size
    pv = lambda c, x: sum(complex(a) * x**i for i, a in enumerate(c))
    Q = np.array([pv(spec.Q, 1j * x) for x in m])
    R1 = np.array([pv(spec.R_D1, 1j * x) for x in m])
    R2 = np.array([pv(spec.R_D2, 1j * x) for x in m])
    U = [None] * (N + 1)

    def conv(C, R, V):
        out = np.zeros(n_m, dtype=complex)
        for i in range(n_m):
            acc = 0j
            for j in range(n_m):
                k = i - j + n_m // 2
                if 0 <= k < n_m:
                    acc += w[j] * C[k] * pv(R, 1j * m[j]) * V[j]
            out[i] = acc
        return out

    for n in range(N + 1):
        rhs = spec.F(n) * q**n
        if n >= spec.d_D1:
            rhs = rhs + R1 * U[n - spec.d_D1] * q ** ((spec.d_D1 / k1 + 1) * (n - spec.d_D1))
        if n >= spec.d_D2:
            rhs = rhs + R2 * U[n - spec.d_D2] * q ** ((spec.d_D2 / k2 + 1) * (n - spec.d_D2))
        for l in range(spec.n_ell):
            d, de, Dl = spec.d_ell[l], spec.delta_ell[l], spec.Delta_ell[l]
            if n - d < 0:
                continue
            acc = np.zeros(n_m, dtype=complex)
            for n1 in range(0, min(n - d, spec.p1) + 1):
                if np.any(spec.C_data[l, n1]):
                    acc += conv(spec.C_data[l, n1], spec.R_ell[l], U[n - d - n1])
            rhs = rhs + eps ** (Dl - d) * q ** ((n - d) * de) * acc / math.sqrt(2 * math.pi)
        U[n] = rhs / (Q * q**n)
    return np.array(U)


def test_recursion_against_second_implementation(make_spec):
    spec = make_spec(n_m=41, M_max=10.0)
    eps = 0.2 + 0.1j
    got = solve_recursion(spec, eps, 12).profiles
    ref = direct_recursion(spec, eps, 12)
    for n in range(13):
        scale = np.abs(ref[n]).max()
        if scale:
            assert np.abs(got[n] - ref[n]).max() <= 1e-10 * scale


def test_recursion_two_delay_case(make_spec):
    forcing = [{"kind": "polynomial", "profile": {"kind": "gaussian"}, "weights": [1.0]}]
    no_kernels = [{"d": 1, "delta": 1, "Delta": 1, "R": [1], "C": []},
                  {"d": 2, "delta": 2, "Delta": 2, "R": [1], "C": []}]
    spec = make_spec(ell_terms=no_kernels, forcing=forcing)
    U = solve_recursion(spec, 0.0, 12).profiles
    assert np.allclose(U[0], spec.F(0) / spec.Q_im())
    assert not np.any(U[1:spec.d_D1])
    assert np.allclose(U[spec.d_D1], spec.R_im(1) * U[0] / (spec.Q_im() * spec.frame.q ** spec.d_D1))
    scaled = make_spec(ell_terms=no_kernels, forcing=[dict(forcing[0], weights=[3.0])])
    assert np.allclose(solve_recursion(scaled, 0.0, 12).profiles, 3 * U, rtol=1e-14)


def test_recursion_deterministic_and_finite(bundled_spec):
    a = solve_recursion(bundled_spec, 0.1, 12)
    b = solve_recursion(bundled_spec, 0.1, 12)
    assert np.array_equal(a.profiles, b.profiles)
    assert np.all(np.isfinite(a.norms))
    with pytest.raises(ParameterError):
        solve_recursion(bundled_spec, 0.9, 4)


def test_expansion_zero_forcing(make_spec):
    spec = make_spec(forcing=ZERO_FORCING)
    ex = eps_expansion(spec, [0.3], [0.0, 0.2], 6)
    assert not np.any(ex.H)


def test_expansion_low_orders(bundled_spec):
    # m = 0 sits below every delay
    ex = eps_expansion(bundled_spec, [0.45], [0.0], 3)
    assert np.allclose(ex.H[0], ex.Fh[0] / bundled_spec.Q_im()[None, :])


def test_expansion_residual(bundled_spec):
    t = np.array([0.45, 0.3 + 0.015j, 0.1])
    z = np.array([0.0, 0.3 + 0.1j, -0.5])
    ex = eps_expansion(bundled_spec, t, z, 10)
    assert ex.residuals.max() < 1e-9
    with pytest.raises(ModeUnsupported):
        eps_expansion(bundled_spec, t, z, 2, eps_dependent=True)
