import numpy as np
import pytest
from scipy.integrate import quad

from specpred.controller import (
    ControlHistory,
    ControllerError,
    PredictorController,
    TransitionSignal,
    control_step,
    final_segment_weight,
    picard_contraction_factor,
    predictor_integral,
    transition_eval,
    windowed_exp_integral,
)


def test_transition_values_and_slope():
    sig = TransitionSignal(t0=2.0)
    phi, dphi = transition_eval(sig, -1.0)
    assert phi == 0.0 and dphi == 0.0
    phi, dphi = transition_eval(sig, 2.0)
    assert phi == 1.0 and dphi == 0.0
    phi, dphi = transition_eval(sig, 1.0)  # midpoint of the ramp
    assert phi == pytest.approx(0.5)
    assert dphi == pytest.approx(0.75)  # 6 s (1-s) / t0 at s = 1/2
    with pytest.raises(ValueError):
        TransitionSignal(t0=0.0)


def test_transition_c1_at_endpoints():
    sig = TransitionSignal(t0=1.0)
    for t in (1e-9, 1.0 - 1e-9):
        _, dphi = transition_eval(sig, t)
        assert abs(dphi) < 1e-7 or dphi > 0  # slope continuous, vanishing at ends
    _, d_lo = transition_eval(sig, 1e-8)
    assert d_lo == pytest.approx(0.0, abs=1e-6)


def make_history(dt=0.01, D0=0.5, delta=0.05, T=3.0, m=1):
    return ControlHistory(dt, D0, delta, T, m=m)


def test_history_preload_and_append():
    h = make_history()
    assert h.latest_time == pytest.approx(0.0)
    assert np.all(h.samples[: h.filled + 1] == 0.0)
    h.append(0.01, [2.0])
    assert h.latest_time == pytest.approx(0.01)
    assert h.interp(0.005)[0] == pytest.approx(1.0)
    with pytest.raises(ControllerError):
        h.append(0.05, [1.0])  # off grid
    with pytest.raises(ControllerError):
        h.interp(1.0)  # beyond the filled prefix


def test_history_interp_preload_zone():
    h = make_history()
    assert np.all(h.interp(np.array([-0.3, -0.55, 0.0])) == 0.0)


def fill_history_with(h, fn, T):
    t = h.dt
    while t <= T + 1e-12:
        h.append(t, [fn(t)])
        t += h.dt


def test_predictor_integral_against_quadrature():
    # u(s) = sin(3 s) sampled on a fine grid; the piecewise-linear quadrature
    # must converge to the continuous integral at second order.
    lam = np.array([1.7, -4.0])
    B = np.array([[2.0], [-1.0]])
    D0 = 0.5
    t = 1.2

    def continuous(lam_n, b_n):
        return b_n * quad(
            lambda s: np.exp(lam_n * (t - s - D0)) * np.sin(3 * s),
            t - D0, t, limit=200,
        )[0]

    want = np.array([continuous(lam[i], B[i, 0]) for i in range(2)])
    errs = []
    for dt in (2e-3, 1e-3):
        h = ControlHistory(dt, D0, 0.05, 2.0, m=1)
        fill_history_with(h, lambda s: np.sin(3 * s), 1.5)
        got = predictor_integral(h, t, lam, B, D0)
        errs.append(np.max(np.abs(got - want)))
    assert errs[1] < errs[0] / 3.5
    assert errs[1] < 1e-6


def test_predictor_integral_clips_at_zero():
    lam = np.array([0.5])
    B = np.array([[1.0]])
    h = ControlHistory(0.01, 0.5, 0.05, 2.0, m=1)
    fill_history_with(h, lambda s: 1.0, 0.3)
    # t < D0: the window is [0, t]; u = 1 on (0, 0.3] with a step at 0.
    t = 0.3
    got = predictor_integral(h, t, lam, B, 0.5)
    want = quad(lambda s: np.exp(0.5 * (t - s - 0.5)) * 1.0, 0.01, t)[0] \
        + quad(lambda s: np.exp(0.5 * (t - s - 0.5)) * (s / 0.01), 0.0, 0.01)[0]
    assert got[0] == pytest.approx(want, rel=1e-10)


def test_windowed_integral_splits_additively():
    lam = np.array([1.0, -2.0])
    B = np.array([[1.0], [0.3]])
    h = ControlHistory(0.01, 0.5, 0.05, 2.0, m=1)
    fill_history_with(h, lambda s: np.cos(2 * s), 1.0)
    t = 0.9
    whole = windowed_exp_integral(h, 0.4, t, t, lam, B, 0.5)
    parts = windowed_exp_integral(h, 0.4, 0.683, t, lam, B, 0.5) \
        + windowed_exp_integral(h, 0.683, t, t, lam, B, 0.5)
    assert np.allclose(whole, parts, rtol=1e-12)


def test_final_segment_weight_is_integral_slope():
    lam = np.array([2.0])
    B = np.array([[3.0]])
    D0, h = 0.5, 0.01
    W = final_segment_weight(lam, B, D0, h)
    want = 3.0 * quad(
        lambda s: np.exp(2.0 * (h - s - D0)) * (s / h), 0.0, h)[0]
    assert W[0, 0] == pytest.approx(want, rel=1e-10)


def test_contraction_factor_small_at_fine_steps(exact_cert):
    rho = picard_contraction_factor(exact_cert.K, exact_cert.lambdas,
                                    exact_cert.B, exact_cert.D0, 1e-3)
    assert rho < 1.0
    rho2 = picard_contraction_factor(exact_cert.K, exact_cert.lambdas,
                                     exact_cert.B, exact_cert.D0, 2e-3)
    assert rho < rho2 < 1.0  # shrinks with dt


def test_control_step_residual_direct(exact_cert):
    cert = exact_cert
    dt = 1e-3
    hist = ControlHistory(dt, cert.D0, cert.delta_max, 3.0, m=1)
    trans = TransitionSignal(cert.t0)
    K = np.atleast_2d(cert.K)
    t = 0.0
    Y = np.array([0.7])
    d2 = np.array([0.05])
    for _ in range(1500):
        t += dt
        u = control_step(Y * np.cos(t), d2, t, cert, hist, trans)
        hist.append(t, u)
    phi, _ = transition_eval(trans, t)
    I = predictor_integral(hist, t, cert.lambdas, cert.B, cert.D0)
    res = hist.samples[hist.filled] - phi * (K @ (Y * np.cos(t)) + d2 + K @ I)
    assert np.linalg.norm(res) < 1e-10


def test_control_step_zero_before_ramp(exact_cert):
    hist = ControlHistory(1e-3, exact_cert.D0, exact_cert.delta_max, 1.0, m=1)
    u = control_step(np.array([5.0]), np.array([1.0]), 0.0, exact_cert, hist,
                     TransitionSignal(exact_cert.t0))
    assert u[0] == 0.0


def test_predictor_controller_guards(exact_cert):
    with pytest.raises(ControllerError):
        PredictorController(exact_cert, dt=exact_cert.D0 * 1.5, T_final=1.0)
