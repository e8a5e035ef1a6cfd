"""Gain synthesis and certificate computation for the predictor feedback loop.

The certificate gathers everything the stability theory promises, made
numeric: the feedback gain K, the decay envelope (M_lambda, lambda) of the
delay-free closed-loop matrix, the admissible delay-uncertainty radius from
the small-gain inequality, the truncated-model decay rate sigma, and the
explicit tail constants.  Constants that the theory only proves to exist
(the u/Y/Z channel gains) are fitted from simulation ensembles by the
certifier and carry ``fitted`` provenance; everything else is ``exact``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .numerics import matrix_exp_norm
from .spectral_model import SystemDescriptor, TruncatedModel, lifting_norms


class SynthesisError(ValueError):
    pass


@dataclass
class Certificate:
    """Numeric stability certificate for one (plant, gain, delay) design."""

    # Plant head and gain
    lambdas: np.ndarray          # diagonal of A_{N0}
    B: np.ndarray                # N0 x m modal input matrix
    K: np.ndarray                # m x N0 feedback gain
    N0: int
    D0: float                    # nominal delay
    t0: float                    # transition horizon
    # Tail data
    alpha: float
    xi: float
    m_R: float
    M_R: float
    # Envelope of A_cl
    A_cl: np.ndarray
    M_lambda: float
    lam: float
    # Margins and rates
    delta_star: float            # equality point of the small-gain inequality
    delta_max: float             # certified delay radius (with safety margin)
    sigma: float
    delta_tilde: float           # contraction value at sigma
    kappa: float
    epsilon: float               # kappa / alpha
    # Explicit tail constants C~0..C~3
    tail_constants: dict = field(default_factory=dict)
    # Fitted constants (None until the certifier fills them in)
    u_constants: Optional[dict] = None    # Cbar4, Cbar5, Cbar6 (rate kappa)
    y_constants: Optional[dict] = None    # C1, C2, C3 (rate sigma)
    z_constants: Optional[dict] = None    # gamma3, gamma4, gamma5 (rate sigma)
    x_constants: Optional[dict] = None    # Cbar1..3 = sqrt(M_R)(Ci + sqrt(C~i))
    provenance: dict = field(default_factory=dict)
    fit_info: Optional[dict] = None
    degenerate_delta: bool = False        # BK = 0: unconstrained by small gain

    @property
    def A(self) -> np.ndarray:
        return np.diag(self.lambdas)

    @property
    def BK_norm(self) -> float:
        return float(np.linalg.norm(self.B @ self.K, 2))

    @property
    def has_fitted_constants(self) -> bool:
        return self.u_constants is not None and self.x_constants is not None


def place_gain(model: TruncatedModel, D0: float, target_poles) -> np.ndarray:
    """Single-input pole placement for A_cl = A + e^{-D0 A} B K.

    Placement runs on the pair (A, e^{-D0 A} B) via Ackermann's formula, which
    handles the diagonal-with-distinct-eigenvalues structure directly.
    """
    A = model.A
    B = model.B
    n = model.N0
    if B.shape[1] != 1:
        raise SynthesisError(
            "pole placement is implemented for single-input models; "
            "provide K manually for m > 1"
        )
    target = np.atleast_1d(np.asarray(target_poles))
    if target.size != n:
        raise SynthesisError(f"need exactly N0={n} target poles")
    if np.any(target.real >= 0):
        raise SynthesisError("target poles must have negative real parts")
    is_real = not (np.iscomplexobj(A) or np.iscomplexobj(B))
    if is_real and not np.allclose(np.sort_complex(target),
                                   np.sort_complex(np.conj(target))):
        raise SynthesisError("target poles must be closed under conjugation "
                             "for a real-field model")
    Bt = expm(-D0 * A) @ B
    # Hautus test for the diagonal pair: every head mode needs b_{n,1} != 0.
    if np.any(np.abs(B[:, 0]) == 0.0):
        dead = int(np.nonzero(np.abs(B[:, 0]) == 0.0)[0][0]) + 1
        raise SynthesisError(f"uncontrollable: b_{{{dead},1}} = 0")
    # Controllability matrix of (A, Bt).
    ctrb = np.column_stack([np.linalg.matrix_power(A, i) @ Bt for i in range(n)])
    if np.linalg.cond(ctrb) > 1e14:
        raise SynthesisError("uncontrollable pair (A, e^{-D0 A} B)")
    # Desired characteristic polynomial evaluated at A.
    coeffs = np.poly(target)
    pA = np.zeros_like(A)
    for c in coeffs:
        pA = pA @ A + c * np.eye(n, dtype=A.dtype)
    en = np.zeros((1, n), dtype=A.dtype)
    en[0, -1] = 1.0
    # A_cl = A + Bt K with K = -e_n^T ctrb^{-1} p(A)
    K = -en @ np.linalg.solve(ctrb, pA)
    if is_real:
        K = K.real
    A_cl = A + Bt @ K
    placed = np.sort_complex(np.linalg.eigvals(A_cl))
    if not np.allclose(placed, np.sort_complex(target.astype(complex)), atol=1e-8):
        raise SynthesisError(
            f"pole placement failed: got {placed}, wanted {target}"
        )
    return K


def scalar_gain(a: float, b: float, D0: float, pole: float) -> float:
    """Closed-form single-mode gain: A_cl = a + e^{-D0 a} b K = pole."""
    return (pole - a) * np.exp(D0 * a) / b


def decay_envelope(A_cl, lambda_fraction: float = 0.95, T_check: Optional[float] = None,
                   n_grid: int = 8192):
    """Certified envelope ||e^{A_cl t}|| <= M_lambda e^{-lam t}.

    lam is a fraction of the spectral abscissa; M_lambda is the dense-grid
    supremum of ||e^{A_cl t}|| e^{lam t}, inflated by 5% and clamped >= 1.
    T_check defaults to the time beyond which the conditioning-based tail
    bound kappa(V) e^{abscissa t} e^{lam t} has dropped below 1, so the grid
    maximum has provably passed its peak.
    """
    A_cl = np.asarray(A_cl)
    if not (0.0 < lambda_fraction < 1.0):
        raise ValueError("lambda_fraction must be in (0,1)")
    mu, V = np.linalg.eig(A_cl)
    abscissa = float(mu.real.max())
    if abscissa >= 0.0:
        raise SynthesisError("decay_envelope requires a Hurwitz matrix")
    lam = lambda_fraction * (-abscissa)
    if T_check is None:
        condV = float(np.linalg.cond(V))
        if not np.isfinite(condV):
            condV = 1e16
        # kappa(V) e^{(abscissa + lam) t} <= 1  for t >= T_tail; M_lambda >= 1
        # always (t = 0), so the supremum is attained on [0, T_tail].
        gap = (1.0 - lambda_fraction) * (-abscissa)
        T_check = max(1.0, np.log(max(condV, 1.0)) / gap * 1.1)
    ts = np.linspace(0.0, T_check, n_grid)
    norms = matrix_exp_norm(A_cl, ts)
    M = float(np.max(norms * np.exp(lam * ts)))
    M_lambda = max(1.0, M) * 1.05
    return M_lambda, float(lam), float(T_check)


def smallgain_lhs(delta, A_cl_norm: float, BK_norm: float, M_lambda: float, lam: float):
    """Left-hand side of the small-gain inequality at delay mismatch delta."""
    return M_lambda * BK_norm * (np.exp(A_cl_norm * delta) - np.exp(-lam * delta))


def delta_margin(A_cl, BK_norm: float, M_lambda: float, lam: float, D0: float):
    """Largest delay mismatch allowed by the small-gain inequality.

    Returns (delta_max, delta_star, degenerate): delta_star solves equality of
    the small-gain condition by bisection to 1e-10 relative accuracy;
    delta_max additionally respects delta < D0.
    """
    if BK_norm < 0:
        raise ValueError("BK_norm must be nonnegative")
    cap = D0 * (1.0 - 1e-6)
    if BK_norm == 0.0:
        return cap, np.inf, True
    A_norm = float(np.linalg.norm(np.asarray(A_cl), 2))

    def f(d):
        return smallgain_lhs(d, A_norm, BK_norm, M_lambda, lam) - lam

    lo, hi = 0.0, 1.0
    while f(hi) < 0.0:
        hi *= 2.0
        if hi > 1e12:
            raise SynthesisError("small-gain equality bracket not found")
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    delta_star = 0.5 * (lo + hi)
    # Polish with Newton steps; the LHS is smooth and strictly increasing.
    for _ in range(5):
        g = smallgain_lhs(delta_star, A_norm, BK_norm, M_lambda, lam)
        dg = M_lambda * BK_norm * (
            A_norm * np.exp(A_norm * delta_star) + lam * np.exp(-lam * delta_star)
        )
        delta_star -= (g - lam) / dg
    return min(delta_star, cap), float(delta_star), False


def delta_tilde(sigma, M_lambda: float, C_norm: float, A_norm: float,
                lam: float, r: float, eps: float):
    """Small-gain contraction value delta~ from the truncated-model analysis."""
    sigma = np.asarray(sigma, dtype=float)
    return (
        M_lambda * C_norm / (lam - sigma)
        * np.exp(sigma * r)
        * (np.exp(sigma * eps) * (np.exp(A_norm * eps) - 1.0)
           + 1.0 - np.exp(-(lam - sigma) * eps))
    )


def sigma_rate(M_lambda: float, lam: float, A_norm: float, C_norm: float,
               r: float, eps: float):
    """Largest decay rate sigma in (0, lambda) with delta~(sigma) <= 1 - 1e-6.

    Returns (sigma, delta_tilde_at_sigma).  delta~ is continuous, increasing
    in sigma and blows up at sigma -> lambda, so bisection on the threshold is
    well posed.  A 0.99 safety factor keeps the certified inequality strict.
    """
    threshold = 1.0 - 1e-6
    slack = 1e-9
    hi_cap = lam * (1.0 - slack)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0.0 or C_norm == 0.0:
        sigma = 0.99 * hi_cap
        return sigma, float(delta_tilde(sigma, M_lambda, C_norm, A_norm, lam, r, eps))
    d0 = float(delta_tilde(lam * 1e-12, M_lambda, C_norm, A_norm, lam, r, eps))
    if d0 >= threshold:
        raise SynthesisError(
            f"small-gain violated at sigma -> 0+: delta~ = {d0:.6g} >= {threshold}"
        )
    if float(delta_tilde(hi_cap, M_lambda, C_norm, A_norm, lam, r, eps)) <= threshold:
        sigma = 0.99 * hi_cap
    else:
        lo, hi = lam * 1e-12, hi_cap
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if float(delta_tilde(mid, M_lambda, C_norm, A_norm, lam, r, eps)) <= threshold:
                lo = mid
            else:
                hi = mid
        sigma = 0.99 * lo
    return sigma, float(delta_tilde(sigma, M_lambda, C_norm, A_norm, lam, r, eps))


def iss_constants(descriptor: SystemDescriptor, model: TruncatedModel,
                  sigma: float, D0: float, delta: float,
                  kappa_fraction: float = 0.5,
                  u_constants: Optional[dict] = None,
                  quad_panels: int = 4096):
    """Explicit tail constants C~0..C~3 and the rates kappa, epsilon.

    C~1..C~3 require the fitted u-channel constants Cbar4..Cbar6; when they
    are not yet available only C~0, kappa and epsilon are returned and the
    dependent entries are None.
    """
    if not (0.0 < kappa_fraction < 1.0):
        raise ValueError("kappa_fraction must be in (0,1)")
    alpha, xi, m_R = model.alpha, model.xi, descriptor.riesz_lower
    m = descriptor.num_inputs
    kappa = kappa_fraction * min(alpha, sigma)
    eps = kappa / alpha
    be2, abe2 = lifting_norms(descriptor, panels=quad_panels)
    C0 = float(alpha**2 * xi**2 * np.sum(be2) + np.sum(abe2))
    out = {"C0": C0, "kappa": kappa, "epsilon": eps,
           "C1": None, "C2": None, "C3": None}
    if u_constants is not None:
        C4, C5, C6 = (u_constants["Cbar4"], u_constants["Cbar5"],
                      u_constants["Cbar6"])
        ek = np.exp(kappa * (D0 + delta))
        denom = (alpha - kappa) ** 2
        out["C1"] = (4.0 / m_R) * (1.0 + 2.0 * m * C4**2 * ek**2 * C0 / denom)
        out["C2"] = 8.0 * m * (1.0 + C5 * ek) ** 2 * C0 / (m_R * denom)
        out["C3"] = 8.0 * m * C6**2 * ek**2 * C0 / (m_R * denom)
    return out


def assemble_x_constants(y_constants: dict, tail_constants: dict, M_R: float) -> dict:
    """Cbar_i = sqrt(M_R) (C_i + sqrt(C~_i)) for i = 1..3."""
    out = {}
    for i in (1, 2, 3):
        Ci = y_constants[f"C{i}"]
        Cti = tail_constants[f"C{i}"]
        out[f"Cbar{i}"] = float(np.sqrt(M_R) * (Ci + np.sqrt(Cti)))
    return out


def synthesize_certificate(
    descriptor: SystemDescriptor,
    model: TruncatedModel,
    D0: float = 0.5,
    t0: float = 1.0,
    target_poles=None,
    lambda_fraction: float = 0.95,
    delta_safety: float = 0.9,
    kappa_fraction: float = 0.5,
    K: Optional[np.ndarray] = None,
) -> Certificate:
    """Run the full synthesis pipeline up to the exactly-computable constants.

    ``delta_safety`` shrinks the small-gain equality point before it is used
    as the certified delay radius; without it the contraction value at the
    radius is exactly 1 and no positive sigma exists.
    """
    if K is None:
        if target_poles is None:
            target_poles = [-2.0] * model.N0
        K = place_gain(model, D0, target_poles)
    K = np.atleast_2d(np.asarray(K))
    A = model.A
    B = model.B
    A_cl = A + expm(-D0 * A) @ B @ K
    if np.iscomplexobj(A_cl) and np.allclose(A_cl.imag, 0.0):
        A_cl = A_cl.real
    M_lambda, lam, _ = decay_envelope(A_cl, lambda_fraction=lambda_fraction)
    BK_norm = float(np.linalg.norm(B @ K, 2))
    d_cap, delta_star, degenerate = delta_margin(A_cl, BK_norm, M_lambda, lam, D0)
    if degenerate:
        delta_max = d_cap
    else:
        delta_max = min(delta_star * delta_safety, D0 * (1.0 - 1e-6))
    A_cl_norm = float(np.linalg.norm(A_cl, 2))
    sigma, dtil = sigma_rate(M_lambda, lam, A_cl_norm, BK_norm, r=D0, eps=delta_max)
    tail = iss_constants(descriptor, model, sigma, D0, delta_max,
                         kappa_fraction=kappa_fraction)
    cert = Certificate(
        lambdas=np.diag(A), B=B, K=K, N0=model.N0, D0=float(D0), t0=float(t0),
        alpha=model.alpha, xi=model.xi,
        m_R=descriptor.riesz_lower, M_R=descriptor.riesz_upper,
        A_cl=A_cl, M_lambda=M_lambda, lam=lam,
        delta_star=delta_star, delta_max=float(delta_max),
        sigma=float(sigma), delta_tilde=dtil,
        kappa=tail["kappa"], epsilon=tail["epsilon"],
        tail_constants={"C0": tail["C0"], "C1": None, "C2": None, "C3": None},
        degenerate_delta=degenerate,
        provenance={
            "K": "exact", "M_lambda": "exact", "lambda": "exact",
            "delta_max": "exact", "sigma": "exact", "kappa": "exact",
            "C~0": "exact", "C~1": "exact", "C~2": "exact", "C~3": "exact",
            "Cbar1": "fitted", "Cbar2": "fitted", "Cbar3": "fitted",
            "Cbar4": "fitted", "Cbar5": "fitted", "Cbar6": "fitted",
            "C1": "fitted", "C2": "fitted", "C3": "fitted",
            "gamma3": "fitted", "gamma4": "fitted", "gamma5": "fitted",
        },
    )
    return cert


def finalize_tail_constants(cert: Certificate, descriptor: SystemDescriptor,
                            model: TruncatedModel) -> None:
    """Fill in C~1..C~3 and Cbar1..3 once the u/Y constants have been fitted."""
    if cert.u_constants is None or cert.y_constants is None:
        raise SynthesisError("fit the u/Y channel constants first")
    tail = iss_constants(descriptor, model, cert.sigma, cert.D0, cert.delta_max,
                         kappa_fraction=cert.kappa / min(model.alpha, cert.sigma),
                         u_constants=cert.u_constants)
    cert.tail_constants = {k: tail[k] for k in ("C0", "C1", "C2", "C3")}
    cert.x_constants = assemble_x_constants(cert.y_constants, cert.tail_constants,
                                            cert.M_R)


# ---------------------------------------------------------------------------
# Serialization

def _array_to_list(a):
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return {"real": a.real.tolist(), "imag": a.imag.tolist()}
    return a.tolist()


def _array_from_list(v):
    if isinstance(v, dict):
        return np.asarray(v["real"]) + 1j * np.asarray(v["imag"])
    return np.asarray(v, dtype=float)


def certificate_to_dict(cert: Certificate) -> dict:
    d = {
        "lambdas": _array_to_list(cert.lambdas),
        "B": _array_to_list(cert.B),
        "K": _array_to_list(cert.K),
        "A_cl": _array_to_list(cert.A_cl),
        "N0": cert.N0, "D0": cert.D0, "t0": cert.t0,
        "alpha": cert.alpha, "xi": cert.xi,
        "m_R": cert.m_R, "M_R": cert.M_R,
        "M_lambda": cert.M_lambda, "lambda": cert.lam,
        "delta_star": cert.delta_star, "delta_max": cert.delta_max,
        "sigma": cert.sigma, "delta_tilde": cert.delta_tilde,
        "kappa": cert.kappa, "epsilon": cert.epsilon,
        "tail_constants": cert.tail_constants,
        "u_constants": cert.u_constants,
        "y_constants": cert.y_constants,
        "z_constants": cert.z_constants,
        "x_constants": cert.x_constants,
        "provenance": cert.provenance,
        "fit_info": cert.fit_info,
        "degenerate_delta": cert.degenerate_delta,
    }
    return d


def certificate_from_dict(d: dict) -> Certificate:
    return Certificate(
        lambdas=_array_from_list(d["lambdas"]),
        B=_array_from_list(d["B"]),
        K=_array_from_list(d["K"]),
        A_cl=_array_from_list(d["A_cl"]),
        N0=int(d["N0"]), D0=float(d["D0"]), t0=float(d["t0"]),
        alpha=float(d["alpha"]), xi=float(d["xi"]),
        m_R=float(d["m_R"]), M_R=float(d["M_R"]),
        M_lambda=float(d["M_lambda"]), lam=float(d["lambda"]),
        delta_star=float(d["delta_star"]), delta_max=float(d["delta_max"]),
        sigma=float(d["sigma"]), delta_tilde=float(d["delta_tilde"]),
        kappa=float(d["kappa"]), epsilon=float(d["epsilon"]),
        tail_constants=d["tail_constants"],
        u_constants=d.get("u_constants"),
        y_constants=d.get("y_constants"),
        z_constants=d.get("z_constants"),
        x_constants=d.get("x_constants"),
        provenance=d.get("provenance", {}),
        fit_info=d.get("fit_info"),
        degenerate_delta=bool(d.get("degenerate_delta", False)),
    )


def save_certificate(cert: Certificate, path) -> None:
    with open(path, "w") as fh:
        json.dump(certificate_to_dict(cert), fh, indent=2)


def load_certificate(path) -> Certificate:
    with open(path) as fh:
        return certificate_from_dict(json.load(fh))
