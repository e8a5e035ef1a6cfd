import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm

from specpred.numerics import (
    exp_moments,
    matrix_exp_norm,
    segment_exp_integral,
    simpson_integrate,
    simpson_weights,
)


def quad_moment(lam, h, power):
    re = quad(lambda t: (t**power * np.exp(-lam * t)).real, 0, h, limit=200)[0]
    im = quad(lambda t: (t**power * np.exp(-lam * t)).imag, 0, h, limit=200)[0]
    return re + 1j * im


@pytest.mark.parametrize("lam", [2.5, -7.0, 0.3, 1e-12, -1e-10, 3 + 4j, -5 - 2j])
@pytest.mark.parametrize("h", [0.01, 0.5, 2.0])
def test_exp_moments_against_quadrature(lam, h):
    m0, m1 = exp_moments(lam, h)
    assert m0 == pytest.approx(quad_moment(lam, h, 0), rel=1e-11, abs=1e-14)
    assert m1 == pytest.approx(quad_moment(lam, h, 1), rel=1e-11, abs=1e-14)


def test_exp_moments_series_branch_continuity():
    # The closed form and the Taylor branch must agree around the threshold.
    h = 1.0
    for lam in (2e-3, 5e-4, -2e-3, -5e-4):
        m0, m1 = exp_moments(lam, h)
        assert m0 == pytest.approx(quad_moment(lam, h, 0), rel=1e-11)
        assert m1 == pytest.approx(quad_moment(lam, h, 1), rel=1e-11)


def test_exp_moments_broadcasting():
    lam = np.array([1.0, -2.0, 0.0])
    m0, m1 = exp_moments(lam, 0.5)
    assert m0.shape == (3,)
    assert m0[2] == pytest.approx(0.5)
    assert m1[2] == pytest.approx(0.125)
    # Array h against a lam column.
    m0g, _ = exp_moments(lam[np.newaxis, :], np.array([[0.5], [1.0]]))
    assert m0g.shape == (2, 3)
    assert m0g[0, 0] == pytest.approx(m0[0])


def test_segment_exp_integral_linear_u():
    lam, t_ref, s0, s1 = -3.0, 1.0, 0.2, 0.7
    u0, u1 = 0.4, -1.1

    def u(s):
        return u0 + (u1 - u0) * (s - s0) / (s1 - s0)

    expected = quad(lambda s: np.exp(lam * (t_ref - s)) * u(s), s0, s1)[0]
    got = segment_exp_integral(lam, t_ref, s0, s1, u0, u1)
    assert got == pytest.approx(expected, rel=1e-12)


def test_segment_exp_integral_zero_width():
    assert segment_exp_integral(2.0, 0.0, 0.5, 0.5, 1.0, 2.0) == 0.0


def test_simpson_weights_sum_and_parity():
    w = simpson_weights(5, 0.25)
    assert np.sum(w) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        simpson_weights(4, 0.1)


def test_simpson_exact_on_cubics():
    x = np.linspace(0, 2, 9)
    vals = 3 * x**3 - x**2 + 5
    exact = 3 * 2**4 / 4 - 2**3 / 3 + 5 * 2
    assert simpson_integrate(vals, x[1] - x[0]) == pytest.approx(exact, rel=1e-14)


def test_simpson_fourth_order_convergence():
    def err(n):
        x = np.linspace(0, np.pi, n)
        return abs(simpson_integrate(np.sin(x), x[1] - x[0]) - 2.0)

    assert err(41) / err(81) > 12.0  # ~16 for fourth order


def test_matrix_exp_norm_matches_expm(rng):
    for _ in range(5):
        A = rng.normal(size=(4, 4))
        ts = rng.uniform(0, 2, size=6)
        got = matrix_exp_norm(A, ts)
        want = [np.linalg.norm(expm(A * t), 2) for t in ts]
        assert got == pytest.approx(want, rel=1e-9)


def test_matrix_exp_norm_defective_fallback():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])  # Jordan block, defective
    got = matrix_exp_norm(A, [1.0])
    want = np.linalg.norm(expm(A), 2)
    assert got[0] == pytest.approx(want, rel=1e-9)
