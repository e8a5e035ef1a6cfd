"""Runtime implementation of the implicit predictor feedback law.

The control value at time t solves

    u(t) = phi(t) * { K Y(t) + d2(t) + K * I[u](t) },
    I[u](t) = int_{max(t-D0,0)}^t exp((t-s-D0) A) B u(s) ds,

where the integral is taken over the piecewise-linear interpolant of the
sampled control history, so the final segment depends on u(t) itself.  The
fixed point is solved by warm-started Picard iteration; the per-segment
integrals are exact exponential moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import exp_moments


class ControllerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransitionSignal:
    """C^1 smoothstep ramp: 0 on (-inf, 0], 1 on [t0, inf)."""

    t0: float

    def __post_init__(self):
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")


def transition_eval(signal: TransitionSignal, t: float):
    """Return (phi(t), phi'(t)) for the cubic smoothstep transition."""
    s = np.clip(np.asarray(t, dtype=float) / signal.t0, 0.0, 1.0)
    phi = s * s * (3.0 - 2.0 * s)
    dphi = 6.0 * s * (1.0 - s) / signal.t0
    if phi.ndim == 0:
        return float(phi), float(dphi)
    return phi, dphi


class ControlHistory:
    """Uniformly sampled control history with linear interpolation.

    Samples live on the grid start_time + j*dt.  The history is pre-loaded
    with zeros on [-(D0 + delta) - dt, 0], matching the zero initial control.
    Storage is a flat array sized for the whole run (trajectories keep the
    full control record anyway); reads are clamped to the filled prefix.
    """

    def __init__(self, dt: float, D0: float, delta: float, T_final: float,
                 m: int = 1, dtype=float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        self.m = int(m)
        # Grid reaches back one sample beyond -(D0+delta) so any delayed read
        # falls inside the covered span.
        self.n_pre = int(np.ceil((D0 + delta) / dt - 1e-12)) + 1
        n_total = self.n_pre + int(np.ceil(T_final / dt - 1e-12)) + 2
        self.samples = np.zeros((n_total, self.m), dtype=dtype)
        self.start_time = -self.n_pre * self.dt
        self.filled = self.n_pre  # index of the latest valid sample (t = 0)

    @property
    def latest_time(self) -> float:
        return self.start_time + self.filled * self.dt

    def index_of(self, t: float) -> float:
        return (t - self.start_time) / self.dt

    def append(self, t: float, u) -> None:
        j = self.filled + 1
        expected = self.start_time + j * self.dt
        if abs(t - expected) > 1e-9 * max(1.0, abs(t)):
            raise ControllerError(
                f"history append off-grid: got t={t}, expected {expected}"
            )
        if j >= len(self.samples):
            raise ControllerError("history capacity exceeded")
        self.samples[j] = u
        self.filled = j

    def interp(self, t):
        """Linear interpolation of the recorded control at time(s) t."""
        t = np.asarray(t, dtype=float)
        x = (t - self.start_time) / self.dt
        if np.any(x < -1e-9) or np.any(x > self.filled + 1e-9):
            raise ControllerError("history read outside covered span")
        x = np.clip(x, 0.0, self.filled)
        j0 = np.minimum(x.astype(int), self.filled - 1)
        w = x - j0
        vals = (1.0 - w)[..., np.newaxis] * self.samples[j0] \
            + w[..., np.newaxis] * self.samples[j0 + 1]
        return vals


def windowed_exp_integral(history: ControlHistory, lo: float, hi: float,
                          t_ref: float, lambdas, B, D0: float):
    """Exact integral of exp((t_ref-s-D0) A) B u(s) over [lo, hi].

    u is the piecewise-linear interpolant of the history; partial end
    segments are clipped exactly.  Returns a length-N0 vector.
    """
    lambdas = np.asarray(lambdas)
    B = np.atleast_2d(np.asarray(B))
    if hi <= lo + 1e-15:
        return np.zeros(len(lambdas), dtype=B.dtype)
    if history.latest_time < hi - 1e-9 * max(1.0, abs(hi)):
        raise ControllerError("insufficient history for predictor integral")
    dt = history.dt
    # Segment boundaries: lo, then every grid point in (lo, hi), then hi.
    j_lo = int(np.floor(history.index_of(lo) + 1e-12)) + 1
    j_hi = int(np.ceil(history.index_of(hi) - 1e-12))
    grid_times = history.start_time + dt * np.arange(j_lo, j_hi)
    bounds = np.concatenate([[lo], grid_times, [hi]])
    u_nodes = history.interp(bounds)                      # (S+1, m)
    f_nodes = u_nodes @ B.T                               # (S+1, N0): (B u)_n
    a = bounds[:-1]
    h = np.diff(bounds)
    keep = h > 1e-15
    a, h = a[keep], h[keep]
    f0 = f_nodes[:-1][keep]
    f1 = f_nodes[1:][keep]
    lam_col = lambdas[np.newaxis, :]
    m0, m1 = exp_moments(lam_col, h[:, np.newaxis])
    pre = np.exp(lam_col * (t_ref - D0 - a[:, np.newaxis]))
    seg = pre * (f0 * m0 + (f1 - f0) * (m1 / h[:, np.newaxis]))
    return seg.sum(axis=0)


def predictor_integral(history: ControlHistory, t: float, lambdas, B, D0: float):
    """Exact integral of exp((t-s-D0) A) B u(s) over [max(t-D0,0), t]."""
    return windowed_exp_integral(history, max(t - D0, 0.0), t, t, lambdas, B, D0)


def final_segment_weight(lambdas, B, D0: float, h: float):
    """Weight matrix W with I[u](t) = I_known + W @ u(t) for the last segment."""
    lambdas = np.asarray(lambdas)
    B = np.atleast_2d(np.asarray(B))
    _, m1 = exp_moments(lambdas, h)
    return (np.exp(lambdas * (h - D0)) * (m1 / h))[:, np.newaxis] * B


def picard_contraction_factor(K, lambdas, B, D0: float, dt: float) -> float:
    """Norm of K W: the actual contraction factor of the implicit iteration.

    The crude sufficient bound dt * ||K|| ||B|| e^{||A|| D0} is far too
    conservative for unstable modes (the kernel on the final segment is
    e^{(t-s-D0) A} with t-s-D0 ~ -D0, which *shrinks* unstable modes); the
    exact final-segment weight is what the iteration actually sees.
    """
    W = final_segment_weight(lambdas, B, D0, dt)
    return float(np.linalg.norm(np.atleast_2d(np.asarray(K)) @ W, 2))


def control_step(Y_t, d2_t, t: float, certificate, history: ControlHistory,
                 transition: TransitionSignal, max_iters: int = 50,
                 tol: float = 1e-12):
    """Solve the implicit control law at time t and return u(t).

    The history must be valid up to t - dt; the candidate u(t) enters the
    predictor integral only through the final interpolation segment, so the
    integral splits as I_known + W u(t) and the Picard iteration is cheap.
    The converged residual of the implicit equation is checked against
    ``tol`` and a ControllerError is raised on non-convergence.
    """
    K = np.atleast_2d(np.asarray(certificate.K))
    lambdas = certificate.lambdas
    B = certificate.B
    D0 = certificate.D0
    phi, _ = transition_eval(transition, t)
    m = K.shape[0]
    if phi == 0.0:
        return np.zeros(m, dtype=K.dtype)
    dt = history.dt
    Y_t = np.atleast_1d(np.asarray(Y_t))
    d2_t = np.zeros(m) if d2_t is None else np.atleast_1d(np.asarray(d2_t))
    lower = max(t - D0, 0.0)
    t_prev = t - dt
    s_break = max(t_prev, lower)
    I_known = windowed_exp_integral(history, lower, s_break, t, lambdas, B, D0)
    h = t - s_break
    u_prev = history.samples[history.filled]
    # Final segment from s0 = t-h to t: linear from u(s0) to the candidate.
    if h > 1e-15:
        s0 = t - h
        u_s0 = history.interp(np.asarray(s0))
        lam = lambdas
        m0, m1 = exp_moments(lam, h)
        pre = np.exp(lam * (h - D0))
        base = pre * m0
        slope = pre * (m1 / h)
        f_s0 = B @ u_s0
        I_fixed = I_known + (base - slope) * f_s0
        W = slope[:, np.newaxis] * B
    else:
        I_fixed = I_known
        W = np.zeros((len(lambdas), m), dtype=B.dtype)
    drive = K @ Y_t + d2_t
    KW = K @ W
    u = np.array(u_prev, dtype=float if not np.iscomplexobj(K) else complex)
    converged = False
    for _ in range(max_iters):
        u_new = phi * (drive + K @ (I_fixed + W @ u))
        step = np.linalg.norm(u_new - u)
        u = u_new
        if step < tol:
            converged = True
            break
    if not converged:
        raise ControllerError(
            f"implicit control solve did not converge at t={t} "
            f"(contraction factor {np.linalg.norm(phi * KW, 2):.3g}); reduce dt"
        )
    if not np.all(np.isfinite(u)):
        raise ControllerError(f"non-finite control value at t={t}")
    residual = np.linalg.norm(u - phi * (drive + K @ (I_fixed + W @ u)))
    if residual > 10 * tol:
        raise ControllerError(f"implicit equation residual {residual:.3g} at t={t}")
    return u


class PredictorController:
    """Stateful wrapper advancing the implicit law on a uniform grid."""

    def __init__(self, certificate, dt: float, T_final: float,
                 max_iters: int = 50, tol: float = 1e-12):
        self.cert = certificate
        self.dt = float(dt)
        self.transition = TransitionSignal(certificate.t0)
        self.history = ControlHistory(
            dt, certificate.D0, certificate.delta_max, T_final,
            m=np.atleast_2d(certificate.K).shape[0],
            dtype=complex if np.iscomplexobj(certificate.K) else float,
        )
        self.max_iters = max_iters
        self.tol = tol
        if dt > certificate.D0:
            raise ControllerError("controller dt must not exceed the nominal delay")
        rho = picard_contraction_factor(certificate.K, certificate.lambdas,
                                        certificate.B, certificate.D0, dt)
        if rho >= 1.0:
            raise ControllerError(
                f"Picard contraction factor {rho:.3g} >= 1 at dt={dt}; reduce dt"
            )

    def step(self, t: float, Y_t, d2_t):
        """Compute, record and return u(t); t must be the next grid time."""
        u = control_step(Y_t, d2_t, t, self.cert, self.history,
                         self.transition, self.max_iters, self.tol)
        self.history.append(t, u)
        return u

    def delayed_value(self, t: float):
        """u(t) read from the recorded history (linear interpolation)."""
        return self.history.interp(np.asarray(t))
