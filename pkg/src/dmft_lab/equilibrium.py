"""Scalar-channel posterior computations and the static fixed point.

The channel is Y = theta + z with theta ~ g and noise precision omega; the
equilibrium pair (omega, omega_star) solves

    omega      = delta / (sigma2 + mse),
    omega_star = delta / (sigma2 + mse_star),

where mse is the channel posterior variance and mse_star the squared error
against the truth, both averaged over the true channel (g_star; 1/omega_star).
Prediction errors follow from the residual-kernel identities
c_eta_tti(0) = delta/sigma2 - omega and c_eta_inf = omega^2 / omega_star:

    ymse      = (sigma2^2 / delta) c_eta_tti(0)
    ymse_star = (sigma2^2 / delta) (c_eta_inf + 2 c_eta_tti(0)) - sigma2.

Gaussian and mixture families use conjugate closed forms; discrete priors use
exact atom sums; anything else falls back to adaptive quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad

from .priors import (
    ExpFamily,
    GaussianFixed,
    GaussianLocation,
    GaussianMeanMixture,
    GaussianWeightMixture,
    PriorFamily,
    PriorSpec,
    SmoothHinge,
)


class PrecisionError(RuntimeError):
    """Quadrature failed to reach the requested accuracy."""


class DiscretePrior:
    """Finite-support prior for scalar-channel computations only.

    Not a drift-capable family (no smooth score); posterior averages are exact
    atom sums. Covers e.g. the symmetric two-point prior."""

    def __init__(self, atoms, weights):
        self.atoms = np.asarray(atoms, dtype=float)
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        self.weights = w / w.sum()
        self.dim_alpha = 0

    def second_moment(self, alpha=None) -> float:
        return float(np.sum(self.weights * self.atoms**2))


def _mixture_stats(family, alpha):
    """(weights, means, precisions) of a Gaussian-mixture representation."""
    if isinstance(family, GaussianFixed):
        return np.array([1.0]), np.array([0.0]), np.array([family.lam])
    if isinstance(family, GaussianLocation):
        m = float(np.asarray(alpha).reshape(-1)[0])
        return np.array([1.0]), np.array([m]), np.array([1.0 / family.scale**2])
    if isinstance(family, GaussianMeanMixture):
        return family.p, np.asarray(alpha, dtype=float).reshape(-1), family.omega
    if isinstance(family, GaussianWeightMixture):
        return family._prior_weights(alpha), family.mu, family.omega
    return None


def _posterior_mixture(y, family, alpha, omega):
    """Conjugate posterior of a Gaussian-mixture prior given Y = y.

    Returns (component weights, component means, component variances), each
    of shape y.shape + (K,). Responsibilities are formed in log space.
    """
    stats = _mixture_stats(family, alpha)
    pw, pm, pp = stats
    y = np.asarray(y, dtype=float)[..., None]
    var_k = 1.0 / omega + 1.0 / pp
    log_w = np.log(pw) - 0.5 * np.log(2 * np.pi * var_k) - 0.5 * (y - pm) ** 2 / var_k
    log_w = log_w - log_w.max(axis=-1, keepdims=True)
    w = np.exp(log_w)
    w /= w.sum(axis=-1, keepdims=True)
    post_var = 1.0 / (omega + pp)
    post_mean = (omega * y + pp * pm) * post_var
    return w, post_mean, np.broadcast_to(post_var, post_mean.shape)


def posterior_moments(y, g, omega: float, alpha=None):
    """(posterior mean, posterior second moment) of the scalar channel.

    `g` is a PriorSpec, PriorFamily, or DiscretePrior; Gaussian mixtures and
    discrete priors use closed forms, other families adaptive quadrature.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    family, alpha = _family_alpha(g, alpha)
    y_arr = np.asarray(y, dtype=float)
    if isinstance(family, DiscretePrior):
        a, w = family.atoms, family.weights
        lw = np.log(w) - 0.5 * omega * (y_arr[..., None] - a) ** 2
        lw = lw - lw.max(axis=-1, keepdims=True)
        r = np.exp(lw)
        r /= r.sum(axis=-1, keepdims=True)
        m1 = np.sum(r * a, axis=-1)
        m2 = np.sum(r * a**2, axis=-1)
        return _match_shape(m1, y), _match_shape(m2, y)
    if _mixture_stats(family, alpha) is not None:
        w, pm, pv = _posterior_mixture(y_arr, family, alpha, omega)
        m1 = np.sum(w * pm, axis=-1)
        m2 = np.sum(w * (pv + pm**2), axis=-1)
        return _match_shape(m1, y), _match_shape(m2, y)
    return _numeric_moments(y_arr, family, alpha, omega)


def _match_shape(value, template):
    return float(value) if np.isscalar(template) or np.asarray(template).ndim == 0 else value


def _family_alpha(g, alpha):
    if isinstance(g, PriorSpec):
        return g.family, g.alpha if alpha is None else alpha
    return g, alpha


def _numeric_moments(y_arr, family, alpha, omega):
    if hasattr(family, "_grid"):
        # Families with a density grid (exp-family): tilt the grid by the
        # Gaussian likelihood and take trapezoid moments, vectorized over y.
        x, w, _ = family._grid(alpha)
        cell = np.gradient(x)
        flat = np.atleast_1d(y_arr).ravel()
        logpost = np.log(w * cell + 1e-300)[None, :] - 0.5 * omega * (flat[:, None] - x) ** 2
        logpost -= logpost.max(axis=1, keepdims=True)
        post = np.exp(logpost)
        z = post.sum(axis=1)
        m1 = (post @ x) / z
        m2 = (post @ (x * x)) / z
        m1 = m1.reshape(np.shape(y_arr))
        m2 = m2.reshape(np.shape(y_arr))
        return _match_shape(m1, y_arr), _match_shape(m2, y_arr)
    flat = np.atleast_1d(y_arr).ravel()
    m1 = np.empty(flat.size)
    m2 = np.empty(flat.size)
    sd = 1.0 / np.sqrt(omega)
    for i, y in enumerate(flat):
        dens = lambda t: np.exp(family.log_g(t, alpha) - 0.5 * omega * (y - t) ** 2)
        pieces = []
        for f in (lambda t: dens(t), lambda t: t * dens(t), lambda t: t * t * dens(t)):
            val, err = quad(f, y - 14 * sd, y + 14 * sd, limit=400, points=[y])
            if not np.isfinite(val) or (val != 0 and err > 1e-7 * max(1.0, abs(val))):
                raise PrecisionError(f"posterior quadrature failed at y={y}")
            pieces.append(val)
        z, t1, t2 = pieces
        m1[i], m2[i] = t1 / z, t2 / z
    m1 = m1.reshape(np.shape(y_arr))
    m2 = m2.reshape(np.shape(y_arr))
    return _match_shape(m1, y_arr), _match_shape(m2, y_arr)


def log_marginal(y, g, omega: float, alpha=None):
    """log P_{g, omega}(y): marginal density of the scalar channel."""
    family, alpha = _family_alpha(g, alpha)
    y_arr = np.asarray(y, dtype=float)
    if isinstance(family, DiscretePrior):
        a, w = family.atoms, family.weights
        lw = np.log(w) + 0.5 * np.log(omega / (2 * np.pi)) - 0.5 * omega * (y_arr[..., None] - a) ** 2
        out = _logsumexp_last(lw)
        return _match_shape(out, y)
    stats = _mixture_stats(family, alpha)
    if stats is not None:
        pw, pm, pp = stats
        var_k = 1.0 / omega + 1.0 / pp
        lw = np.log(pw) - 0.5 * np.log(2 * np.pi * var_k) - 0.5 * (y_arr[..., None] - pm) ** 2 / var_k
        return _match_shape(_logsumexp_last(lw), y)
    flat = np.atleast_1d(y_arr).ravel()
    if hasattr(family, "_grid"):
        x, w, _ = family._grid(alpha)
        cell = np.gradient(x)
        norm = float(np.sum(w * cell))
        lw = np.log(w * cell / norm + 1e-300)[None, :] - 0.5 * omega * (flat[:, None] - x) ** 2
        out = _logsumexp_last(lw) + 0.5 * np.log(omega / (2 * np.pi))
        return _match_shape(out.reshape(np.shape(y_arr)), y)
    out = np.empty(flat.size)
    sd = 1.0 / np.sqrt(omega)
    for i, yy in enumerate(flat):
        f = lambda t: np.exp(family.log_g(t, alpha) - 0.5 * omega * (yy - t) ** 2)
        val, _ = quad(f, yy - 14 * sd, yy + 14 * sd, limit=400, points=[yy])
        out[i] = np.log(val) + 0.5 * np.log(omega / (2 * np.pi))
    return _match_shape(out.reshape(np.shape(y_arr)), y)


def _logsumexp_last(lw):
    m = lw.max(axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(lw - m), axis=-1, keepdims=True)))[..., 0]


def _truth_nodes(family, alpha, n_gh: int):
    """Quadrature nodes/weights for theta_star ~ g_star."""
    x, w = np.polynomial.hermite_e.hermegauss(n_gh)
    if isinstance(family, DiscretePrior):
        return family.atoms, family.weights
    stats = _mixture_stats(family, alpha)
    if stats is not None:
        pw, pm, pp = stats
        nodes = (pm[:, None] + x[None, :] / np.sqrt(pp)[:, None]).ravel()
        weights = (pw[:, None] * w[None, :] / w.sum()).ravel()
        return nodes, weights
    if isinstance(family, ExpFamily):
        xs, dens, _ = family._grid(alpha)
        stride = max(1, xs.size // 512)  # keep the tensorized outer grids small
        xs, dens = xs[::stride], dens[::stride]
        cell = np.gradient(xs)
        w = dens * cell
        return xs, w / w.sum()
    raise ValueError(f"no truth-node rule for {type(family).__name__}")


@dataclass
class ScalarChannelSpec:
    """The two-prior scalar channel: truth (g_star; 1/omega_star), posterior
    computed under (g; omega)."""

    g_star: PriorSpec | PriorFamily | DiscretePrior
    g: PriorSpec | PriorFamily | DiscretePrior
    omega: float
    omega_star: float
    alpha_star: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    n_gh: int = 64

    def __post_init__(self):
        if self.omega <= 0 or self.omega_star <= 0:
            raise ValueError("channel precisions must be positive")
        self.g_star_family, self.alpha_star = _family_alpha(self.g_star, self.alpha_star)
        self.g_family, self.alpha = _family_alpha(self.g, self.alpha)


def mse_pair(spec: ScalarChannelSpec) -> tuple[float, float]:
    """(mse, mse_star): posterior variance and truth error, averaged over the
    true channel by tensorized quadrature (Gauss-Hermite in the noise)."""
    tn, tw = _truth_nodes(spec.g_star_family, spec.alpha_star, spec.n_gh)
    zx, zw = np.polynomial.hermite_e.hermegauss(spec.n_gh)
    zw = zw / zw.sum()
    y = tn[:, None] + zx[None, :] / np.sqrt(spec.omega_star)
    m1, m2 = posterior_moments(y, spec.g_family, spec.omega, spec.alpha)
    w2d = tw[:, None] * zw[None, :]
    mse = float(np.sum(w2d * (m2 - m1**2)))
    mse_star = float(np.sum(w2d * (tn[:, None] - m1) ** 2))
    return mse, mse_star


@dataclass
class EquilibriumSolution:
    omega: float
    omega_star: float
    mse: float
    mse_star: float
    ymse: float
    ymse_star: float
    free_energy: float
    residual_trace: list = field(default_factory=list)
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "omega_star": self.omega_star,
            "mse": self.mse,
            "mse_star": self.mse_star,
            "ymse": self.ymse,
            "ymse_star": self.ymse_star,
            "free_energy": self.free_energy,
            "converged": self.converged,
            "sweeps": len(self.residual_trace),
        }


def solve_fixed_point(
    delta: float,
    sigma2: float,
    g_star,
    g,
    alpha_star=None,
    alpha=None,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_sweeps: int = 10000,
    n_gh: int = 64,
    with_free_energy: bool = True,
) -> EquilibriumSolution:
    """Damped iteration of omega <- delta/(sigma2 + mse(omega, omega_star)).

    Starts from omega = omega_star = delta/sigma2; on oscillation the step is
    halved. Raises on non-convergence with the residual trace attached.
    """
    if delta <= 0 or sigma2 <= 0:
        raise ValueError("delta and sigma2 must be positive")
    omega = omega_star = delta / sigma2
    rho = damping
    trace = []
    prev_res = np.inf
    mse = mse_star = np.nan
    for _ in range(max_sweeps):
        spec = ScalarChannelSpec(g_star, g, omega, omega_star, alpha_star, alpha, n_gh)
        mse, mse_star = mse_pair(spec)
        target_o = delta / (sigma2 + mse)
        target_s = delta / (sigma2 + mse_star)
        res = max(abs(omega - target_o), abs(omega_star - target_s))
        trace.append(res)
        if res <= tol:
            break
        if res > prev_res:  # oscillation: damp harder
            rho = max(rho * 0.5, 1e-3)
        prev_res = res
        omega = (1 - rho) * omega + rho * target_o
        omega_star = (1 - rho) * omega_star + rho * target_s
    converged = trace[-1] <= tol
    if not converged:
        raise RuntimeError(
            f"fixed point did not converge: last residual {trace[-1]:.3e} after {len(trace)} sweeps"
        )
    c_tti0 = delta / sigma2 - omega
    c_inf = omega**2 / omega_star
    ymse = sigma2**2 / delta * c_tti0
    ymse_star = sigma2**2 / delta * (c_inf + 2 * c_tti0) - sigma2
    fe = (
        free_energy(omega, omega_star, g_star, g, delta, sigma2, alpha_star, alpha, n_gh)
        if with_free_energy
        else np.nan
    )
    return EquilibriumSolution(
        omega=omega,
        omega_star=omega_star,
        mse=mse,
        mse_star=mse_star,
        ymse=ymse,
        ymse_star=ymse_star,
        free_energy=fe,
        residual_trace=trace,
        converged=converged,
    )


def free_energy(
    omega: float,
    omega_star: float,
    g_star,
    g,
    delta: float,
    sigma2: float,
    alpha_star=None,
    alpha=None,
    n_gh: int = 64,
) -> float:
    """Replica free energy f(omega, omega_star, s) at s = 1/sigma2.

    f = -E_{g_star, omega_star} log P_{g, omega}(Y)
        - (1/2) (2 delta + log(2 pi / omega) - delta log(delta s / omega)
                 + (1 - delta) omega/omega_star
                 + (omega/s)(omega/omega_star - 2)).
    """
    if omega <= 0 or omega_star <= 0:
        raise ValueError("precisions must be positive")
    g_star_family, alpha_star = _family_alpha(g_star, alpha_star)
    g_family, alpha = _family_alpha(g, alpha)
    tn, tw = _truth_nodes(g_star_family, alpha_star, n_gh)
    zx, zw = np.polynomial.hermite_e.hermegauss(n_gh)
    zw = zw / zw.sum()
    y = tn[:, None] + zx[None, :] / np.sqrt(omega_star)
    lp = log_marginal(y, g_family, omega, alpha)
    e_logp = float(np.sum(tw[:, None] * zw[None, :] * lp))
    s = 1.0 / sigma2
    bracket = (
        2 * delta
        + np.log(2 * np.pi / omega)
        - delta * np.log(delta * s / omega)
        + (1 - delta) * omega / omega_star
        + (omega / s) * (omega / omega_star - 2.0)
    )
    return -e_logp - 0.5 * bracket


def posterior_grad_alpha_mean(family: PriorFamily, alpha, y, omega: float):
    """Posterior average of grad_alpha log g(theta, alpha) given Y = y.

    Closed forms for the conjugate families; quadrature otherwise. Shape
    y.shape + (K,)."""
    y_arr = np.asarray(y, dtype=float)
    if isinstance(family, GaussianLocation):
        m1, _ = posterior_moments(y_arr, family, omega, alpha)
        m = float(np.asarray(alpha).reshape(-1)[0])
        return (np.asarray(m1) - m)[..., None] / family.scale**2
    if isinstance(family, GaussianMeanMixture):
        w, pm, _ = _posterior_mixture(y_arr, family, alpha, omega)
        a = np.asarray(alpha, dtype=float).reshape(-1)
        return w * family.omega * (pm - a)
    if isinstance(family, GaussianWeightMixture):
        w, _, _ = _posterior_mixture(y_arr, family, alpha, omega)
        return w - family._prior_weights(alpha)
    if isinstance(family, GaussianFixed):
        return np.zeros(np.shape(y_arr) + (0,))
    if isinstance(family, ExpFamily):
        # E[T_k(theta) | y] - grad A, on the family's own density grid.
        grad_a = family.grad_log_partition(alpha)
        x, w, _ = family._grid(alpha)
        cell = np.gradient(x)
        flat = np.atleast_1d(y_arr).ravel()
        logpost = np.log(w * cell + 1e-300)[None, :] - 0.5 * omega * (flat[:, None] - x) ** 2
        logpost -= logpost.max(axis=1, keepdims=True)
        post = np.exp(logpost)
        z = post.sum(axis=1)
        out = np.stack(
            [(post @ t_k(x)) / z - g_k for (t_k, _, _), g_k in zip(family.stats, grad_a)],
            axis=-1,
        )
        return out.reshape(np.shape(y_arr) + (family.dim_alpha,))
    raise ValueError(f"no posterior alpha-gradient rule for {type(family).__name__}")


def grad_F(
    alpha,
    delta: float,
    sigma2: float,
    g_star,
    prior_family: PriorFamily,
    alpha_star=None,
    regularizer: Optional[SmoothHinge] = None,
    n_gh: int = 64,
) -> np.ndarray:
    """Gradient of the limiting free energy in the prior parameter:
    grad F(alpha) = -E[grad_alpha log g(theta, alpha)] under the joint
    scalar-channel law at the alpha-dependent fixed point."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    sol = solve_fixed_point(
        delta, sigma2, g_star, prior_family, alpha_star, alpha, n_gh=n_gh, with_free_energy=False
    )
    g_star_family, alpha_star = _family_alpha(g_star, alpha_star)
    tn, tw = _truth_nodes(g_star_family, alpha_star, n_gh)
    zx, zw = np.polynomial.hermite_e.hermegauss(n_gh)
    zw = zw / zw.sum()
    y = tn[:, None] + zx[None, :] / np.sqrt(sol.omega_star)
    gmean = posterior_grad_alpha_mean(prior_family, alpha, y, sol.omega)
    w2d = (tw[:, None] * zw[None, :])[..., None]
    out = -np.sum(w2d * gmean, axis=(0, 1))
    if regularizer is not None:
        out = out + regularizer.grad(alpha)
    return out
