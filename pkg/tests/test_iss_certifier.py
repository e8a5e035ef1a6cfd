import math

import numpy as np
import pytest

from specpred import cli
from specpred.iss_certifier import (
    CertifierError,
    Lemma2Problem,
    causal_lag_steps,
    check_envelopes,
    fading_memory_sup,
    fading_memory_sup_brute,
    fit_decay_rate,
    lemma2_validate,
    simulate_delay_difference,
    windowed_fading_sup,
)
from specpred.sim_engine import (
    DelaySignal,
    DisturbanceSignal,
    Scenario,
    Trajectory,
    simulate,
)


def test_fading_memory_recursion_equals_brute(rng):
    norms = np.abs(rng.normal(size=200))
    fast = fading_memory_sup(norms, kappa=0.8, dt=0.01)
    slow = fading_memory_sup_brute(norms, kappa=0.8, dt=0.01)
    assert np.array_equal(fast, slow)


def test_fading_memory_monotone_decay_between_events():
    norms = np.zeros(50)
    norms[0] = 3.0
    s = fading_memory_sup(norms, kappa=1.0, dt=0.1)
    assert np.all(np.diff(s) < 0)
    assert s[10] == pytest.approx(3.0 * math.exp(-1.0))


def test_fading_memory_rejects_bad_kappa():
    with pytest.raises(ValueError):
        fading_memory_sup([1.0, 2.0], kappa=0.0, dt=0.1)


def test_causal_lag_steps():
    assert causal_lag_steps(0.5, 0.004, 1e-3) == 496
    assert causal_lag_steps(0.5, 0.0, 1e-3) == 500
    assert causal_lag_steps(0.5, 0.1, 0.1) == 4


def test_windowed_sup_ignores_recent_samples(rng):
    norms = np.abs(rng.normal(size=300))
    kappa, dt, lag = 0.7, 0.01, 40
    w = windowed_fading_sup(norms, kappa, dt, lag)
    # Zeroing samples inside the excluded window leaves w[j] unchanged.
    for j in (50, 120, 299):
        mod = norms.copy()
        mod[max(j - lag + 1, 1): j + 1] = 0.0
        w2 = windowed_fading_sup(mod, kappa, dt, lag)
        assert w2[j] == w[j]
    # Before the window opens only the initial sample contributes.
    assert w[10] == math.exp(-kappa * dt * 10) * norms[0]


def test_windowed_sup_matches_direct_maximum(rng):
    norms = np.abs(rng.normal(size=120))
    kappa, dt, lag = 0.9, 0.02, 15
    w = windowed_fading_sup(norms, kappa, dt, lag)
    for j in range(lag + 1, 120):
        direct = max(math.exp(-kappa * dt * (j - i)) * norms[i]
                     for i in range(0, j - lag + 1))
        assert w[j] == pytest.approx(direct, rel=1e-12)


def test_check_envelopes_requires_fitted_constants(descriptor, exact_cert):
    scen = cli.builtin_scenarios(descriptor, exact_cert, dt=5e-3, T=1.0)[0]
    traj = simulate(scen)
    with pytest.raises(CertifierError):
        check_envelopes(traj, exact_cert)


def test_check_envelopes_vacuous_on_zero_run(descriptor, fitted_cert):
    zero = DisturbanceSignal(kind="zero", m=1)
    scen = Scenario(descriptor=descriptor, certificate=fitted_cert,
                    delay=DelaySignal(kind="constant", D0=fitted_cert.D0),
                    d1=zero, d2=zero, X0_coeffs=np.zeros(4), dt=5e-3,
                    T_final=1.0, N_modes=4)
    traj = simulate(scen)
    report = check_envelopes(traj, fitted_cert)
    assert report.all_pass
    assert all(c.vacuous for c in report.checks.values())


def test_check_envelopes_in_sample(descriptor, fitted_cert):
    scens = cli.fitting_ensemble(descriptor, fitted_cert, seed=7,
                                 n_members=12, dt=4e-3, T=6.0)
    report = check_envelopes(simulate(scens[0]), fitted_cert)
    assert report.all_pass
    d = report.to_dict()
    assert set(d) == {"state", "control", "head_state", "transformed_state"}
    assert all("worst_ratio" in v for v in d.values())


def test_fit_info_recorded(fitted_cert):
    info = fitted_cert.fit_info
    assert info["ensemble_size"] == 12
    assert sum(info["channels"].values()) == 12
    assert min(info["channels"].values()) >= 1
    assert info["inflation"] == pytest.approx(1.1)
    for bank in (fitted_cert.u_constants, fitted_cert.y_constants,
                 fitted_cert.z_constants, fitted_cert.x_constants):
        assert all(v > 0 for v in bank.values())


def synthetic_decay_trajectory(cert, rate, T=10.0, dt=1e-2):
    ts = np.arange(0.0, T + dt / 2, dt)
    norm = np.exp(-rate * ts)
    n = len(ts)
    return Trajectory(
        t=ts, coeffs=norm[:, np.newaxis], u=np.zeros((n, 1)),
        v=np.zeros((n, 1)), Z=norm[:, np.newaxis],
        norm_lower=norm, norm_upper=norm, scenario=None,
    )


def test_fit_decay_rate_recovers_synthetic_rate(exact_cert):
    traj = synthetic_decay_trajectory(exact_cert, rate=2.0)
    kappa_hat, truncated = fit_decay_rate(traj, exact_cert)
    assert kappa_hat == pytest.approx(2.0, rel=1e-9)
    assert not truncated


def test_fit_decay_rate_rejects_disturbed_runs(descriptor, exact_cert):
    scen = cli.builtin_scenarios(descriptor, exact_cert, dt=5e-3, T=2.0)[2]
    traj = simulate(scen)
    with pytest.raises(CertifierError):
        fit_decay_rate(traj, exact_cert)


# ---------------------------------------------------------------------------
# Delay-difference lemma machinery

def test_delay_difference_reduces_to_ode_when_C_zero():
    prob = Lemma2Problem(
        A=np.array([[-1.0]]), C=np.array([[0.0]]), r=0.5, eps=0.05,
        d=lambda t: math.sin(t), q=lambda t: 1.0,
        p=lambda t: np.array([0.7]), x0=lambda t: np.array([2.0]))
    ts, xs = simulate_delay_difference(prob, 5e-3, 4.0)
    want = np.exp(-ts) * 2.0 + 0.7 * (1.0 - np.exp(-ts))
    assert np.max(np.abs(xs[:, 0] - want)) < 1e-8


def test_smallgain_ok_threshold():
    prob = Lemma2Problem(
        A=np.array([[-1.0]]), C=np.array([[2.0]]), r=0.5, eps=0.05,
        d=lambda t: 0.0, q=lambda t: 0.0, p=lambda t: np.zeros(1),
        x0=lambda t: np.zeros(1))
    assert prob.smallgain_ok(1.0, 1.0)
    big = Lemma2Problem(
        A=np.array([[-1.0]]), C=np.array([[10.0]]), r=0.5, eps=0.35,
        d=lambda t: 0.0, q=lambda t: 0.0, p=lambda t: np.zeros(1),
        x0=lambda t: np.zeros(1))
    assert not big.smallgain_ok(1.0, 1.0)


def test_lemma2_validate_small_ensemble():
    probs = cli.lemma2_suite(seed=11, n_members=6)
    report = lemma2_validate(probs, sigma=0.5, M_lambda=1.0, lam=1.0, T=8.0)
    assert report["finite"]
    assert report["M"] >= 1.0
    assert report["N"] > 0.0
    channels = {m["channel"] for m in report["members"]}
    assert channels == {"x0", "p"}


def test_lemma2_validate_enforces_precondition():
    bad = Lemma2Problem(
        A=np.array([[-1.0]]), C=np.array([[10.0]]), r=0.5, eps=0.35,
        d=lambda t: 0.0, q=lambda t: 0.0, p=lambda t: np.zeros(1),
        x0=lambda t: np.array([1.0]))
    with pytest.raises(CertifierError):
        lemma2_validate([bad], sigma=0.5, M_lambda=1.0, lam=1.0, T=1.0)
    report = lemma2_validate([bad], sigma=0.5, M_lambda=1.0, lam=1.0, T=1.0,
                             enforce_smallgain=False)
    assert report["finite"]
