"""Closed-form correlation/response kernels for the fixed Gaussian prior.

All kernels are integrals against the Marcenko-Pastur law mu of the limiting
spectrum of X^T X / delta (entry variance 1/d, n/d -> delta):

    bulk support [(1 - delta^{-1/2})^2, (1 + delta^{-1/2})^2],
    density delta * sqrt((edge_hi - x)(x - edge_lo)) / (2 pi x),
    plus an atom of mass max(0, 1 - delta) at x = 0.

The drift scale is pinned to beta = 1/sigma2 (posterior sampling), which is
the regime where these closed forms hold.

Sign convention: the closed-form eta-side kernels beta_mp / gamma_mp are
expressed for the process written with a flipped Gaussian-field sign, so the
lab-wide (simulator / DMFT-engine) response kernels are

    R_theta(t, s)  = alpha_mp(t - s)
    R_eta(t, s)    = -(delta / sigma2) * beta_mp(t - s)   (>= 0 near diagonal)
    R_eta(t, *)    = -(delta / sigma2) * gamma_mp(t)      (<= 0)

`response_eta` / `response_eta_star` apply that mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

_EXP_CAP = 745.0  # exp(-745) underflows to 0; larger exponents are treated as 0


class UnsupportedOracleError(ValueError):
    """Raised when a closed form is requested outside its validity domain."""


@dataclass
class OracleParams:
    """Parameters of the Gaussian-prior oracle: g = N(0, 1/lam)."""

    lam: float
    sigma2: float
    delta: float
    tau_star2: float

    def __post_init__(self):
        for name in ("lam", "sigma2", "delta", "tau_star2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def beta(self) -> float:
        return 1.0 / self.sigma2


@dataclass
class MPLaw:
    """Quadrature rule (nodes, weights, zero atom) for the spectral law."""

    delta: float
    nodes: np.ndarray
    weights: np.ndarray
    atom: float
    edge_lo: float
    edge_hi: float

    def integrate(self, f) -> float:
        """Integral of f against the law; the atom contributes f(0)."""
        total = float(np.sum(self.weights * f(self.nodes)))
        if self.atom > 0:
            total += self.atom * float(f(np.asarray(0.0)))
        return total

    def mass(self) -> float:
        return float(np.sum(self.weights)) + self.atom

    def mean(self) -> float:
        return float(np.sum(self.weights * self.nodes))


def stieltjes_m(z: float, delta: float) -> float:
    """Positive root m(z) of (1 + z m)(1 + m/delta) = m, for z < 0."""
    if z >= 0:
        raise ValueError("stieltjes_m requires z < 0 (bulk support is nonnegative)")
    a = z / delta
    b = z + 1.0 / delta - 1.0
    disc = b * b - 4.0 * a
    sq = np.sqrt(disc)
    # Stable quadratic roots: q-formula avoids cancellation.
    q = -0.5 * (b + np.copysign(sq, b))
    roots = [q / a, 1.0 / q] if q != 0 else [-b / a]
    pos = [r for r in roots if r > 0]
    return float(max(pos))


def mp_quadrature(delta: float, n_nodes: int = 400) -> MPLaw:
    """Gauss-Legendre rule under x = c + r sin(phi), which absorbs the
    square-root edge singularities of the bulk density."""
    if n_nodes < 8:
        raise ValueError("n_nodes must be >= 8")
    inv_sqrt = delta ** (-0.5)
    lo, hi = (1.0 - inv_sqrt) ** 2, (1.0 + inv_sqrt) ** 2
    c, r = 0.5 * (hi + lo), 0.5 * (hi - lo)
    u, gw = np.polynomial.legendre.leggauss(n_nodes)
    phi = 0.5 * np.pi * u
    x = c + r * np.sin(phi)
    w = gw * (0.5 * np.pi) * delta * (r * np.cos(phi)) ** 2 / (2.0 * np.pi * x)
    atom = max(0.0, 1.0 - delta)
    return MPLaw(delta=delta, nodes=x, weights=w, atom=atom, edge_lo=lo, edge_hi=hi)


def _decay(h, t):
    """exp(-h t) with underflow-safe clipping of large exponents."""
    return np.exp(-np.minimum(h * t, _EXP_CAP))


def _rates(oracle: OracleParams, x):
    return oracle.lam + oracle.delta * x / oracle.sigma2


def resp_kernels(t, oracle: OracleParams, law: MPLaw):
    """Closed-form response kernels (alpha_mp(t), beta_mp(t), gamma_mp(t)).

    alpha_mp(t) = int exp(-h t) mu(dx)
    beta_mp(t)  = -(1/sigma2) int x exp(-h t) mu(dx)
    gamma_mp(t) = (1/sigma2) int (x/h) (1 - exp(-h t)) mu(dx)
    with h = lam + delta x / sigma2.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("resp_kernels requires t >= 0")
    x, w = law.nodes, law.weights
    h = _rates(oracle, x)
    e = _decay(h[..., :], t[..., None])
    alpha = e @ w
    beta = -(e * x) @ w / oracle.sigma2
    gamma = ((1.0 - e) * (x / h)) @ w / oracle.sigma2
    if law.atom > 0:
        alpha = alpha + law.atom * _decay(oracle.lam, t)  # x = 0 contributes only here
    if t.ndim == 0:
        return float(alpha), float(beta), float(gamma)
    return alpha, beta, gamma


def response_theta(dt, oracle: OracleParams, law: MPLaw) -> float:
    a, _, _ = resp_kernels(dt, oracle, law)
    return a


def response_eta(dt, oracle: OracleParams, law: MPLaw) -> float:
    """Eta response density in the lab convention (positive near diagonal)."""
    _, b, _ = resp_kernels(dt, oracle, law)
    return -(oracle.delta / oracle.sigma2) * b


def response_eta_star(t, oracle: OracleParams, law: MPLaw) -> float:
    """Response of eta^t to the signal-field component, lab convention."""
    _, _, g = resp_kernels(t, oracle, law)
    return -(oracle.delta / oracle.sigma2) * g


def corr_kernels(t, s, oracle: OracleParams, law: MPLaw):
    """(C_theta(t,s), C_theta(t,*), C_eta(t,s)) for theta^0 = 0.

    C_theta(t,*) = delta tau*^2 gamma_mp(t); C_theta(t,s) carries a
    signal+noise term and a Brownian term; C_eta(t,s) is assembled from the
    squared-residual expansion of the eta-side process.
    """
    if t < 0 or s < 0:
        raise ValueError("corr_kernels requires t, s >= 0")
    dl, s2, t2 = oracle.delta, oracle.sigma2, oracle.tau_star2
    x, w = law.nodes, law.weights
    h = _rates(oracle, x)
    et, es = _decay(h, t), _decay(h, s)
    e_abs, e_sum = _decay(h, abs(t - s)), _decay(h, t + s)

    sig = (dl**2 * t2 * x**2 + dl * s2 * x) / s2**2
    c_ts = float(np.sum(w * (sig / h**2 * (1 - et) * (1 - es) + (e_abs - e_sum) / h)))
    if law.atom > 0:
        hl = oracle.lam
        c_ts += law.atom * (_decay(hl, abs(t - s)) - _decay(hl, t + s)) / hl

    _, _, g_t = resp_kernels(t, oracle, law)
    c_tstar = dl * t2 * g_t

    # C_eta(t,s) = A(t,s)/sigma2^2 - B(t)/sigma2^2 - B(s)/sigma2^2 + delta/sigma2
    a_ts = float(
        np.sum(
            w
            * (
                (dl**3 * t2 * x**3 + dl**2 * s2 * x**2) / s2**2 / h**2 * (1 - et) * (1 - es)
                + dl * x / h * (e_abs - e_sum)
                - dl**2 * x**2 * t2 / s2 / h * ((1 - et) + (1 - es))
            )
        )
    ) + dl * t2
    b_t = float(np.sum(w * dl * x / h * (1 - et)))
    b_s = float(np.sum(w * dl * x / h * (1 - es)))
    c_eta = a_ts / s2**2 - (b_t + b_s) / s2**2 + dl / s2
    return c_ts, c_tstar, c_eta


def ceta_stationary(r: float, oracle: OracleParams, law: MPLaw) -> float:
    """Stationary residual-kernel limit C_eta^inf(r), matched case only.

    Valid for lam = 1/tau_star2; equals -(delta/sigma2) (gamma_mp(|r|) - 1)."""
    if abs(oracle.lam - 1.0 / oracle.tau_star2) > 1e-12:
        raise UnsupportedOracleError("ceta_stationary requires the matched prior lam = 1/tau_star2")
    dl, s2 = oracle.delta, oracle.sigma2
    x, w = law.nodes, law.weights
    h = _rates(oracle, x)
    val = float(np.sum(w * dl * x / h * (_decay(h, abs(r)) - 1.0))) / s2**2 + dl / s2
    return val


def finite_d_oracle(instance, oracle: OracleParams, t: float, s: float):
    """Exact finite-d conditional kernels via the eigendecomposition of
    X^T X / delta: each eigenmode is an explicit Ornstein-Uhlenbeck process,
    so (C_theta(t,s|X), C_theta(t,*|X)) follow by averaging the per-mode
    moments over the empirical spectrum. theta^0 = 0 assumed.
    """
    evals = np.linalg.eigvalsh(instance.X.T @ instance.X / oracle.delta)
    evals = np.clip(evals, 0.0, None)
    emp = MPLaw(
        delta=oracle.delta,
        nodes=evals,
        weights=np.full(evals.shape, 1.0 / evals.size),
        atom=0.0,
        edge_lo=float(evals.min()),
        edge_hi=float(evals.max()),
    )
    c_ts, c_tstar, _ = corr_kernels(t, s, oracle, emp)
    return c_ts, c_tstar


def fdt_check(tau_grid, oracle: OracleParams, law: MPLaw) -> float:
    """Max residual of d/dtau c_theta^tti(tau) + alpha_mp(tau) over the grid.

    c_theta^tti(tau) = int h^{-1} exp(-h tau) mu(dx); its tau-derivative taken
    under the integral is -int exp(-h tau) mu(dx), so the residual probes only
    quadrature-level cancellation.
    """
    x, w = law.nodes, law.weights
    h = _rates(oracle, x)
    worst = 0.0
    for tau in np.asarray(tau_grid, dtype=float):
        deriv = -float(np.sum(w * _decay(h, tau)))
        if law.atom > 0:
            deriv -= law.atom * float(_decay(oracle.lam, tau))
        a, _, _ = resp_kernels(float(tau), oracle, law)
        worst = max(worst, abs(deriv + a))
    return worst


def stationary_ctheta_tti(tau: float, oracle: OracleParams, law: MPLaw) -> float:
    """Time-translation-invariant part of C_theta at stationarity."""
    x, w = law.nodes, law.weights
    h = _rates(oracle, x)
    val = float(np.sum(w * _decay(h, tau) / h))
    if law.atom > 0:
        val += law.atom * float(_decay(oracle.lam, tau)) / oracle.lam
    return val


def alpha_laplace_numeric(s: float, oracle: OracleParams, law: MPLaw, t_max: float = 60.0) -> float:
    """int_0^inf exp(-s t) alpha_mp(t) dt: numeric on [0, t_max] plus the
    analytic tail sum_i w_i exp(-(s + h_i) t_max) / (s + h_i)."""
    head, _ = quad(lambda t: np.exp(-s * t) * resp_kernels(t, oracle, law)[0], 0.0, t_max, limit=200)
    x, w = law.nodes, law.weights
    h = _rates(oracle, x)
    tail = float(np.sum(w * _decay(s + h, t_max) / (s + h)))
    if law.atom > 0:
        tail += law.atom * float(_decay(s + oracle.lam, t_max)) / (s + oracle.lam)
    return head + tail


def gamma_limit(oracle: OracleParams, law: MPLaw) -> float:
    """lim_{t->inf} gamma_mp(t) = (1/sigma2) int (x/h) mu(dx)."""
    x, w = law.nodes, law.weights
    h = _rates(oracle, x)
    return float(np.sum(w * x / h)) / oracle.sigma2


def oracle_table(times, oracle: OracleParams, law: MPLaw):
    """Evaluate all closed-form kernels on a time grid as a KernelTable.

    Response grids are in density units and carry the lab sign convention;
    gamma is 0 to mark the table as a continuous (bias-free) source.
    """
    from .kernels import KernelTable

    times = np.asarray(times, dtype=float)
    m = times.size
    c_theta = np.empty((m, m))
    c_eta = np.empty((m, m))
    c_star = np.empty(m)
    r_theta = np.full((m, m), np.nan)
    r_eta = np.full((m, m), np.nan)
    r_star = np.empty(m)
    for i, t in enumerate(times):
        for j in range(i + 1):
            cts, ctx, ce = corr_kernels(t, times[j], oracle, law)
            c_theta[i, j] = c_theta[j, i] = cts
            c_eta[i, j] = c_eta[j, i] = ce
            if j < i:
                a, b, _ = resp_kernels(t - times[j], oracle, law)
                r_theta[i, j] = a
                r_eta[i, j] = -(oracle.delta / oracle.sigma2) * b
        c_star[i] = corr_kernels(t, t, oracle, law)[1]
        _, _, g = resp_kernels(t, oracle, law)
        r_star[i] = -(oracle.delta / oracle.sigma2) * g
    return KernelTable(
        times=times,
        gamma=0.0,
        source="mp-oracle",
        c_theta=c_theta,
        c_theta_star=c_star,
        c_star_star=oracle.tau_star2,
        c_eta=c_eta,
        r_theta=r_theta,
        r_eta=r_eta,
        r_eta_star=r_star,
        alpha=np.zeros((m, 0)),
    )
