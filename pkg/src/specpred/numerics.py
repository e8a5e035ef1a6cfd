"""Shared low-level numerics: exponential quadrature moments and Simpson rule.

The exponential moments are the workhorse of both the predictor integral and
the per-mode exponential integrator: every integral of the form

    int_0^h exp(-lam * tau) * (a + b * tau) dtau

is expressed through m0(lam, h) and m1(lam, h).  A truncated Taylor series is
used when |lam * h| is tiny to avoid catastrophic cancellation in the
(1 - exp(-x)) / x type expressions.
"""

from __future__ import annotations

import numpy as np

# Below this threshold on |lam*h| the closed forms lose digits to cancellation
# (relative error ~eps/|lam h|) while the truncated Taylor series is accurate
# to ~|lam h|^5 / 720; 1e-3 balances the two at ~1e-12 relative error.
MOMENT_SERIES_THRESHOLD = 1e-3


def exp_moments(lam, h):
    """Return (m0, m1) with m0 = int_0^h e^{-lam t} dt, m1 = int_0^h t e^{-lam t} dt.

    ``lam`` may be a scalar or array (real or complex); ``h`` a scalar or an
    array broadcastable against ``lam``.
    """
    lam = np.asarray(lam)
    h = np.asarray(h)
    x = lam * h
    small = np.abs(x) < MOMENT_SERIES_THRESHOLD
    # Guard the divisions; the masked entries are overwritten below.
    lam_safe = np.where(small, 1.0, lam)
    em = np.exp(-lam_safe * h)
    if np.iscomplexobj(lam):
        one_minus_em = 1.0 - em
    else:
        # expm1 avoids the 1 - e^{-x} cancellation entirely for real rates.
        one_minus_em = -np.expm1(-lam_safe * h)
    m0 = one_minus_em / lam_safe
    # Integration by parts: m1 = (m0 - h e^{-lam h}) / lam.
    m1 = (m0 - h * em) / lam_safe
    # Taylor in x = lam*h around 0, terms through x^4.
    h2 = h * h
    x2 = x * x
    m0_s = h * (1.0 - x / 2.0 + x2 / 6.0 - x2 * x / 24.0 + x2 * x2 / 120.0)
    m1_s = h2 * (0.5 - x / 3.0 + x2 / 8.0 - x2 * x / 30.0 + x2 * x2 / 144.0)
    m0 = np.where(small, m0_s, m0)
    m1 = np.where(small, m1_s, m1)
    if m0.ndim == 0:
        return m0[()], m1[()]
    return m0, m1


def segment_exp_integral(lam, t_ref, s0, s1, u0, u1):
    """Exact integral of e^{lam (t_ref - s)} * u(s) over [s0, s1] for linear u.

    u is the linear interpolant with u(s0) = u0, u(s1) = u1.  ``lam`` may be
    an array of modes; u0/u1 scalars or arrays matching lam's shape.
    """
    h = np.asarray(s1 - s0)
    m0, m1 = exp_moments(lam, h)
    pre = np.exp(lam * (np.asarray(t_ref) - s0))
    slope_w = np.where(h != 0, m1 / np.where(h != 0, h, 1.0), 0.0)
    return pre * (u0 * m0 + (u1 - u0) * slope_w)


def simpson_weights(n_points, h):
    """Composite Simpson weights on a uniform grid with ``n_points`` samples.

    ``n_points`` must be odd (even panel count).
    """
    if n_points < 3 or n_points % 2 == 0:
        raise ValueError("composite Simpson needs an odd number of points >= 3")
    w = np.ones(n_points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


def simpson_integrate(values, h, axis=-1):
    """Composite Simpson integral of uniformly sampled values (odd count)."""
    values = np.asarray(values)
    n = values.shape[axis]
    w = simpson_weights(n, h)
    shape = [1] * values.ndim
    shape[axis] = n
    return np.sum(values * w.reshape(shape), axis=axis)


def matrix_exp_norm(A, ts):
    """2-norm of exp(A t) for each t in ``ts`` via eigendecomposition.

    Falls back to scipy.linalg.expm when the eigenvector matrix is close to
    singular (defective A).
    """
    from scipy.linalg import expm

    A = np.asarray(A, dtype=complex)
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    out = np.empty(ts.shape)
    mu, V = np.linalg.eig(A)
    use_eig = np.linalg.cond(V) < 1e12
    if use_eig:
        Vinv = np.linalg.inv(V)
        for i, t in enumerate(ts):
            out[i] = np.linalg.norm(V @ np.diag(np.exp(mu * t)) @ Vinv, 2)
    else:
        for i, t in enumerate(ts):
            out[i] = np.linalg.norm(expm(A * t), 2)
    return out
