"""Closed-loop simulation of the modal system with delayed boundary input.

Two engines share one output schema:

* ``simulate`` advances every mode with the exact variation-of-constants step
  (unconditionally stable for the stiff tail), with the boundary input
  piecewise-linear on each step;
* ``oracle_simulate`` is an independent cross-check: classical RK4 at dt/20
  with its own fixed-point control solve (Simpson quadrature of the predictor
  integral) and cubic history interpolation.

Both evaluate the same implicit predictor feedback through the delayed
channel v(t) = u(t - D(t)) + d1(t).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controller import (
    ControlHistory,
    ControllerError,
    PredictorController,
    TransitionSignal,
    transition_eval,
    windowed_exp_integral,
)
from .numerics import exp_moments
from .spectral_model import SystemDescriptor
from .synthesis import Certificate

DEFAULT_MODE_DECAY_FACTOR = 50.0
MAX_MODES = 400


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Signal library

def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class DelaySignal:
    """Time-varying input delay D(t) within [D0 - amplitude, D0 + amplitude]."""

    kind: str              # constant | sinusoid | table
    D0: float
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    table: Optional[tuple] = None   # (times, values) knots, PCHIP interpolated

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.broadcast_to(self.D0, t.shape).copy() if t.ndim else self.D0
        if self.kind == "sinusoid":
            return self.D0 + self.amplitude * np.sin(self.omega * t + self.phase)
        if self.kind == "table":
            from scipy.interpolate import PchipInterpolator

            knots_t, knots_v = self.table
            f = PchipInterpolator(np.asarray(knots_t), np.asarray(knots_v))
            return f(t)
        raise ScenarioError(f"unknown delay kind {self.kind!r}")

    def max_amplitude(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "sinusoid":
            return abs(self.amplitude)
        if self.kind == "table":
            return float(np.max(np.abs(np.asarray(self.table[1]) - self.D0)))
        raise ScenarioError(f"unknown delay kind {self.kind!r}")


@dataclass(frozen=True)
class DisturbanceSignal:
    """C^1 boundary disturbance with values in K^m.

    kinds: zero | sinusoid | smoothed_step | exp_decay.  ``amplitude`` is a
    length-m vector (scalars are broadcast).
    """

    kind: str
    m: int = 1
    amplitude: tuple = (0.0,)
    omega: float = 0.0
    phase: float = 0.0
    t_on: float = 0.0
    ramp: float = 1.0      # smoothed_step rise time (smoothstep kernel)
    rate: float = 1.0      # exp_decay rate

    def _amp(self):
        a = np.asarray(self.amplitude, dtype=float)
        if a.ndim == 0:
            a = np.full(self.m, float(a))
        return a

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        a = self._amp()
        if self.kind == "zero":
            shape = t.shape + (self.m,)
            return np.zeros(shape)
        if self.kind == "sinusoid":
            base = np.sin(self.omega * t + self.phase)
        elif self.kind == "smoothed_step":
            base = _smoothstep((t - self.t_on) / self.ramp)
        elif self.kind == "exp_decay":
            base = np.exp(-self.rate * np.maximum(t, 0.0))
        else:
            raise ScenarioError(f"unknown disturbance kind {self.kind!r}")
        return np.asarray(base)[..., np.newaxis] * a

    def sup_norm_bound(self, T: float) -> float:
        return float(np.linalg.norm(self._amp()))


def make_delay(spec: dict) -> DelaySignal:
    """Build a delay signal from its config mapping."""
    kind = spec.get("kind", "constant")
    sig = DelaySignal(
        kind=kind,
        D0=float(spec["D0"]),
        amplitude=float(spec.get("amplitude", 0.0)),
        omega=float(spec.get("omega", 0.0)),
        phase=float(spec.get("phase", 0.0)),
        table=(tuple(spec["times"]), tuple(spec["values"])) if kind == "table" else None,
    )
    if np.any(np.asarray(sig(np.linspace(0, 100, 1001))) <= 0):
        raise ScenarioError("delay signal must stay positive")
    return sig


def make_disturbance(spec: dict, m: int = 1) -> DisturbanceSignal:
    """Build a disturbance signal from its config mapping."""
    amp = spec.get("amplitude", 0.0)
    amp = tuple(np.atleast_1d(np.asarray(amp, dtype=float)).tolist())
    return DisturbanceSignal(
        kind=spec.get("kind", "zero"),
        m=m,
        amplitude=amp,
        omega=float(spec.get("omega", 0.0)),
        phase=float(spec.get("phase", 0.0)),
        t_on=float(spec.get("t_on", 0.0)),
        ramp=float(spec.get("ramp", 1.0)),
        rate=float(spec.get("rate", 1.0)),
    )


# ---------------------------------------------------------------------------
# Scenario / trajectory containers

@dataclass(frozen=True)
class Scenario:
    descriptor: SystemDescriptor
    certificate: Certificate
    delay: DelaySignal
    d1: DisturbanceSignal
    d2: DisturbanceSignal
    X0_coeffs: np.ndarray
    dt: float
    T_final: float
    N_modes: int
    certified: bool = True
    label: str = ""

    def __post_init__(self):
        cert = self.certificate
        if self.N_modes < cert.N0:
            raise ScenarioError("N_modes must be at least N0")
        if self.dt <= 0 or self.T_final <= 0:
            raise ScenarioError("dt and T_final must be positive")
        if self.certified and self.delay.max_amplitude() > cert.delta_max * (1 + 1e-12):
            raise ScenarioError(
                f"delay amplitude {self.delay.max_amplitude():.4g} exceeds "
                f"certified delta_max {cert.delta_max:.4g}; "
                "set certified=False for an uncertified run"
            )
        amp = self.delay.max_amplitude()
        if self.dt > cert.D0 - amp:
            raise ScenarioError("dt must be smaller than the minimum delay D0 - delta")


@dataclass
class Trajectory:
    t: np.ndarray                 # (J+1,)
    coeffs: np.ndarray            # (J+1, N_modes)
    u: np.ndarray                 # (J+1, m)
    v: np.ndarray                 # (J+1, m)
    Z: np.ndarray                 # (J+1, N0)
    norm_lower: np.ndarray
    norm_upper: np.ndarray
    scenario: Optional[Scenario] = None
    engine: str = "exp"
    meta: dict = field(default_factory=dict)

    @property
    def Y(self) -> np.ndarray:
        n0 = self.Z.shape[1]
        return self.coeffs[:, :n0]


def default_mode_count(descriptor: SystemDescriptor, alpha: float,
                       factor: float = DEFAULT_MODE_DECAY_FACTOR,
                       cap: int = MAX_MODES) -> int:
    """Smallest n with Re(lambda_n) <= -factor*alpha, capped."""
    target = -factor * alpha
    for n in range(1, cap + 1):
        if complex(descriptor.eigenvalue_law(n)).real <= target:
            return n
    return cap


def state_norm(coeffs, m_R: float, M_R: float):
    """Riesz sandwich bounds on ||X||_H from modal coefficients.

    Returns (lower, upper) = (sqrt(m_R S), sqrt(M_R S)) with S = sum |c_n|^2,
    evaluated along the leading axis if ``coeffs`` is 2-D.
    """
    coeffs = np.asarray(coeffs)
    S = np.sum(np.abs(coeffs) ** 2, axis=-1)
    return np.sqrt(m_R * S), np.sqrt(M_R * S)


# ---------------------------------------------------------------------------
# Primary engine: exact exponential per-mode stepping

def simulate(scenario: Scenario) -> Trajectory:
    """Integrate the closed loop with the exponential per-mode stepper."""
    cert = scenario.certificate
    desc = scenario.descriptor
    dt = scenario.dt
    J = int(round(scenario.T_final / dt))
    ts = dt * np.arange(J + 1)
    n_modes = scenario.N_modes
    m = desc.num_inputs
    lam_all = desc.eigenvalues(n_modes)
    B_all = desc.input_matrix(n_modes)
    is_complex = desc.field == "complex"
    cdtype = complex if is_complex else float

    c = np.zeros((J + 1, n_modes), dtype=cdtype)
    X0 = np.asarray(scenario.X0_coeffs, dtype=cdtype)
    c[0, : len(X0)] = X0
    u = np.zeros((J + 1, m), dtype=cdtype)
    v = np.zeros((J + 1, m), dtype=cdtype)

    controller = PredictorController(cert, dt, scenario.T_final)
    history = controller.history

    # Per-mode propagators and forcing weights for linear v on each step:
    # c_{j+1} = E c_j + W0 (B v_j) + W1 (B v_{j+1}).
    E = np.exp(lam_all * dt)
    m0, m1 = exp_moments(lam_all, dt)
    W1 = E * (m1 / dt)
    W0 = E * m0 - W1

    D_ts = np.asarray(scenario.delay(ts), dtype=float)
    d1_ts = np.asarray(scenario.d1(ts))
    d2_ts = np.asarray(scenario.d2(ts))

    def delayed_u(j):
        s = ts[j] - D_ts[j]
        return history.interp(np.asarray(s))

    v[0] = delayed_u(0) + d1_ts[0]
    # u(0) = 0 (phi(0) = 0); history already holds the zero sample at t=0.
    for j in range(J):
        tn = ts[j + 1]
        # Delayed read at t_{j+1} only needs history up to t_j (dt <= D0-delta).
        v[j + 1] = delayed_u(j + 1) + d1_ts[j + 1]
        f0 = B_all @ v[j]
        f1 = B_all @ v[j + 1]
        c[j + 1] = E * c[j] + W0 * f0 + W1 * f1
        if not np.all(np.isfinite(c[j + 1])):
            raise ScenarioError(f"non-finite state at step {j + 1} (t={tn:.6g})")
        u[j + 1] = controller.step(tn, c[j + 1, : cert.N0], d2_ts[j + 1])

    lower, upper = state_norm(c, desc.riesz_lower, desc.riesz_upper)
    traj = Trajectory(
        t=ts, coeffs=c, u=u, v=v,
        Z=np.zeros((J + 1, cert.N0), dtype=cdtype),
        norm_lower=lower, norm_upper=upper,
        scenario=scenario, engine="exp",
        meta={"dt": dt, "N_modes": n_modes},
    )
    traj.Z = artstein_transform(traj, cert)
    return traj


def artstein_transform(trajectory: Trajectory, certificate: Certificate) -> np.ndarray:
    """Z(t) = Y(t) + int_{t-D0}^t exp((t-D0-s)A) B u(s) ds on the trajectory grid.

    Uses the same exact per-segment exponential quadrature as the controller;
    u vanishes on [-D0-delta, 0], so the lower limit clips at 0.
    """
    cert = certificate
    ts = trajectory.t
    dt = ts[1] - ts[0]
    scen = trajectory.scenario
    delta = scen.delay.max_amplitude() if scen is not None else cert.delta_max
    hist = ControlHistory(dt, cert.D0, delta, ts[-1], m=trajectory.u.shape[1],
                          dtype=trajectory.u.dtype)
    for j in range(1, len(ts)):
        hist.append(ts[j], trajectory.u[j])
    n0 = cert.N0
    Z = np.array(trajectory.coeffs[:, :n0])
    for j, t in enumerate(ts):
        Z[j] += windowed_exp_integral(hist, max(t - cert.D0, 0.0), t, t,
                                      cert.lambdas, cert.B, cert.D0)
    return Z


def artstein_residual(trajectory: Trajectory, certificate: Certificate):
    """Central-difference residual of the transformed dynamics at interior points.

    Returns (t_interior, residual_norms).  The residual compares dZ/dt with
    the delay-difference dynamics that the transformation satisfies in
    continuous time; both sides are O(dt^2) accurate, so halving dt should
    shrink the residual about fourfold.
    """
    from scipy.linalg import expm

    cert = certificate
    scen = trajectory.scenario
    if scen is None:
        raise ValueError("trajectory must carry its scenario")
    ts = trajectory.t
    dt = ts[1] - ts[0]
    Z = trajectory.Z
    A = np.diag(cert.lambdas)
    B = cert.B
    K = np.atleast_2d(cert.K)
    E = expm(-cert.D0 * A)
    BK = B @ K
    EB = E @ B
    transition = TransitionSignal(cert.t0)

    def phiZ(x):
        """[phi Z](x) with Z linearly interpolated; zero for x < 0."""
        if x < 0.0:
            return np.zeros(Z.shape[1], dtype=Z.dtype)
        idx = min(x / dt, len(ts) - 1.001)
        j0 = int(idx)
        w = idx - j0
        zx = (1.0 - w) * Z[j0] + w * Z[j0 + 1]
        phi, _ = transition_eval(transition, x)
        return phi * zx

    def phid2(x):
        if x < 0.0:
            return np.zeros(B.shape[1])
        phi, _ = transition_eval(transition, x)
        return phi * np.asarray(scen.d2(np.asarray(x)))

    res = []
    interior = range(1, len(ts) - 1)
    d1_ts = np.asarray(scen.d1(ts))
    d2_ts = np.asarray(scen.d2(ts))
    D_ts = np.asarray(scen.delay(ts), dtype=float)
    for j in interior:
        t = ts[j]
        dZ = (Z[j + 1] - Z[j - 1]) / (2.0 * dt)
        phi, _ = transition_eval(transition, t)
        rhs = (A + phi * (E @ BK)) @ Z[j]
        rhs = rhs + BK @ (phiZ(t - D_ts[j]) - phiZ(t - cert.D0))
        rhs = rhs + B @ d1_ts[j] + phi * (EB @ d2_ts[j])
        rhs = rhs + B @ (phid2(t - D_ts[j]) - phid2(t - cert.D0))
        res.append(np.linalg.norm(dZ - rhs))
    return ts[1:-1], np.asarray(res)


# ---------------------------------------------------------------------------
# Independent oracle engine: RK4 + Simpson predictor quadrature

class _CubicHistory:
    """Uniform-grid sample store with local cubic (Catmull-Rom) interpolation."""

    def __init__(self, dt, n_pre, n_total, m):
        self.dt = dt
        self.n_pre = n_pre
        self.samples = np.zeros((n_total, m))
        self.filled = n_pre
        self.start_time = -n_pre * dt

    def append(self, value):
        self.filled += 1
        self.samples[self.filled] = value

    def eval(self, t):
        x = np.asarray((np.asarray(t) - self.start_time) / self.dt)
        x = np.clip(x, 0.0, self.filled)
        j = np.clip(x.astype(int), 1, self.filled - 2)
        w = (x - j)[..., np.newaxis]
        p0 = self.samples[j - 1]
        p1 = self.samples[j]
        p2 = self.samples[j + 1]
        p3 = self.samples[j + 2]
        # Catmull-Rom basis
        return (
            p1
            + 0.5 * w * (p2 - p0)
            + w * w * (p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3)
            + w * w * w * (1.5 * (p1 - p2) + 0.5 * (p3 - p0))
        )


def oracle_simulate(scenario: Scenario, refine: int = 20) -> Trajectory:
    """Cross-check engine: classical RK4 at dt/refine on the modal ODE.

    The control law is solved on the coarse grid by fixed-point iteration with
    the predictor integral evaluated by composite Simpson over the coarse
    history samples (cubically interpolated where the window is clipped);
    delayed reads use cubic interpolation throughout.
    """
    cert = scenario.certificate
    desc = scenario.descriptor
    if desc.field != "real":
        raise ScenarioError("the RK4 oracle supports real-field plants")
    dt = scenario.dt
    J = int(round(scenario.T_final / dt))
    ts = dt * np.arange(J + 1)
    n_modes = scenario.N_modes
    m = desc.num_inputs
    lam_all = desc.eigenvalues(n_modes)
    B_all = desc.input_matrix(n_modes)
    K = np.atleast_2d(cert.K)
    lam_head = cert.lambdas
    B_head = cert.B
    D0 = cert.D0
    transition = TransitionSignal(cert.t0)

    hf = dt / refine
    c = np.zeros((J + 1, n_modes), dtype=float if desc.field == "real" else complex)
    X0 = np.asarray(scenario.X0_coeffs)
    c[0, : len(X0)] = X0
    u = np.zeros((J + 1, m))
    v = np.zeros((J + 1, m))
    n_pre = int(np.ceil((D0 + cert.delta_max) / dt)) + 2
    hist = _CubicHistory(dt, n_pre, n_pre + J + 2, m)

    D_ts = np.asarray(scenario.delay(ts), dtype=float)
    d1 = scenario.d1
    d2_ts = np.asarray(scenario.d2(ts))

    def solve_u(j, Yj):
        """Fixed-point solve of the implicit law at coarse time ts[j]."""
        t = ts[j]
        phi, _ = transition_eval(transition, t)
        if phi == 0.0:
            return np.zeros(m)
        lo = max(t - D0, 0.0)
        # Simpson nodes: refine the coarse grid 4x inside the window for the
        # clipped portion; on grid-aligned windows use coarse nodes directly.
        n_seg = int(np.ceil((t - lo) / dt * 2)) * 2  # even panel count
        n_seg = max(n_seg, 4)
        s = np.linspace(lo, t, n_seg + 1)
        w = np.ones(n_seg + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= (s[1] - s[0]) / 3.0
        kernel = np.exp(np.multiply.outer(lam_head, t - s - D0))  # (N0, S+1)
        u_nodes = hist.eval(s)                                    # (S+1, m)
        # The final node is the candidate; iterate on it.
        u_c = hist.samples[hist.filled].copy()
        drive = K @ Yj + d2_ts[j]
        for _ in range(100):
            u_nodes[-1] = u_c
            integral = np.einsum("ns,sn->n", kernel,
                                 w[:, np.newaxis] * (u_nodes @ B_head.T))
            u_new = phi * (drive + K @ integral)
            if np.linalg.norm(u_new - u_c) < 1e-12:
                u_c = u_new
                break
            u_c = u_new
        return u_c

    v[0] = hist.eval(ts[0] - D_ts[0]) + np.asarray(d1(ts[0]))
    for j in range(J):
        t = ts[j]
        # Exogenous forcing table on the half-fine grid of this coarse step.
        tf = t + (hf / 2.0) * np.arange(2 * refine + 1)
        Df = np.asarray(scenario.delay(tf), dtype=float)
        vf = hist.eval(tf - Df) + np.asarray(d1(tf))
        ff = vf @ B_all.T            # (2*refine+1, n_modes)
        x = c[j].copy()
        for i in range(refine):
            f0 = ff[2 * i]
            fm = ff[2 * i + 1]
            f1 = ff[2 * i + 2]
            k1 = lam_all * x + f0
            k2 = lam_all * (x + 0.5 * hf * k1) + fm
            k3 = lam_all * (x + 0.5 * hf * k2) + fm
            k4 = lam_all * (x + hf * k3) + f1
            x = x + (hf / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        c[j + 1] = x
        if not np.all(np.isfinite(x)):
            raise ScenarioError(f"oracle: non-finite state at step {j + 1}")
        v[j + 1] = vf[-1]
        uj1 = solve_u(j + 1, c[j + 1, : cert.N0])
        u[j + 1] = uj1
        hist.append(uj1)

    lower, upper = state_norm(c, desc.riesz_lower, desc.riesz_upper)
    traj = Trajectory(
        t=ts, coeffs=c, u=u, v=v,
        Z=np.zeros((J + 1, cert.N0)),
        norm_lower=lower, norm_upper=upper,
        scenario=scenario, engine="rk4",
        meta={"dt": dt, "refine": refine, "N_modes": n_modes},
    )
    traj.Z = artstein_transform(traj, cert)
    return traj


# ---------------------------------------------------------------------------
# CSV export / import

def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write the trajectory with the fixed header schema (round-trip floats)."""
    n = traj.coeffs.shape[1]
    n0 = traj.Z.shape[1]
    m = traj.u.shape[1]
    cols = (
        ["t"]
        + [f"c_{i}" for i in range(1, n + 1)]
        + [f"Y_{i}" for i in range(1, n0 + 1)]
        + [f"Z_{i}" for i in range(1, n0 + 1)]
        + [f"u_{i}" for i in range(1, m + 1)]
        + [f"v_{i}" for i in range(1, m + 1)]
        + ["norm_lower", "norm_upper"]
    )
    data = np.column_stack([
        traj.t, traj.coeffs.real, traj.Y.real, traj.Z.real,
        traj.u, traj.v, traj.norm_lower, traj.norm_upper,
    ])
    with open(path, "w") as fh:
        fh.write(", ".join(cols) + "\n")
        for row in data:
            fh.write(", ".join(repr(float(x)) for x in row) + "\n")


def trajectory_from_csv(path) -> Trajectory:
    with open(path) as fh:
        header = [h.strip() for h in fh.readline().split(",")]
        data = np.array([[float(x) for x in line.split(",")] for line in fh])
    n = sum(1 for h in header if h.startswith("c_"))
    n0 = sum(1 for h in header if h.startswith("Y_"))
    m = sum(1 for h in header if h.startswith("u_"))
    i = 1
    coeffs = data[:, i:i + n]; i += n
    i += n0  # Y is a view of coeffs
    Z = data[:, i:i + n0]; i += n0
    u = data[:, i:i + m]; i += m
    v = data[:, i:i + m]; i += m
    return Trajectory(
        t=data[:, 0], coeffs=coeffs, u=u, v=v, Z=Z,
        norm_lower=data[:, i], norm_upper=data[:, i + 1],
        engine="csv",
    )


# ---------------------------------------------------------------------------
# Scenario config files

def scenario_to_dict(scen: Scenario) -> dict:
    from .spectral_model import descriptor_to_dict

    def sig_dict(s):
        d = {"kind": s.kind}
        if isinstance(s, DelaySignal):
            d.update({"D0": s.D0, "amplitude": s.amplitude,
                      "omega": s.omega, "phase": s.phase})
            if s.table is not None:
                d.update({"times": list(s.table[0]), "values": list(s.table[1])})
        else:
            d.update({"amplitude": list(s._amp()), "omega": s.omega,
                      "phase": s.phase, "t_on": s.t_on, "ramp": s.ramp,
                      "rate": s.rate})
        return d

    return {
        "system": descriptor_to_dict(scen.descriptor),
        "certificate": None,   # stored separately; path patched in by the CLI
        "delay": sig_dict(scen.delay),
        "disturbance_d1": sig_dict(scen.d1),
        "disturbance_d2": sig_dict(scen.d2),
        "initial": {"X0_coeffs": np.asarray(scen.X0_coeffs).real.tolist()},
        "integration": {"dt": scen.dt, "T_final": scen.T_final,
                        "N_modes": scen.N_modes, "certified": scen.certified},
    }


def scenario_from_dict(d: dict, certificate: Certificate) -> Scenario:
    from .spectral_model import descriptor_from_dict

    desc = descriptor_from_dict(d["system"])
    integ = d["integration"]
    return Scenario(
        descriptor=desc,
        certificate=certificate,
        delay=make_delay(d["delay"]),
        d1=make_disturbance(d["disturbance_d1"], m=desc.num_inputs),
        d2=make_disturbance(d["disturbance_d2"], m=desc.num_inputs),
        X0_coeffs=np.asarray(d["initial"]["X0_coeffs"], dtype=float),
        dt=float(integ["dt"]),
        T_final=float(integ["T_final"]),
        N_modes=int(integ["N_modes"]),
        certified=bool(integ.get("certified", True)),
    )


def save_scenario(scen: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scen), fh, indent=2)


def load_scenario(path, certificate: Certificate) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh), certificate)
