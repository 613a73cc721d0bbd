"""Prior families, score evaluators, and the parameter-gradient map.

Each family exposes the scalar score s(theta, alpha) = d/dtheta log g(theta, alpha),
its theta-derivative, the alpha-gradient of log g, sampling, and second moments.
All evaluators are pure and vectorized over theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp


class InputDomainError(ValueError):
    """Raised when an evaluator receives non-finite theta or alpha."""


def _check_finite(theta, alpha) -> None:
    if not np.all(np.isfinite(theta)):
        raise InputDomainError("non-finite theta")
    if alpha is not None and not np.all(np.isfinite(alpha)):
        raise InputDomainError("non-finite alpha")


class PriorFamily:
    """Base class: a parametric family g(theta, alpha), alpha in R^K."""

    dim_alpha: int = 0

    def log_g(self, theta, alpha):
        raise NotImplementedError

    def drift_s(self, theta, alpha):
        """s(theta, alpha) = d/dtheta log g."""
        raise NotImplementedError

    def dtheta_drift_s(self, theta, alpha):
        """d/dtheta s(theta, alpha) = d^2/dtheta^2 log g."""
        raise NotImplementedError

    def grad_alpha_log_g(self, theta, alpha):
        """Gradient of log g in alpha; shape (..., K) for array theta."""
        raise NotImplementedError

    def sample(self, alpha, rng: np.random.Generator, size: int):
        raise NotImplementedError

    def second_moment(self, alpha) -> float:
        """E[theta^2] under g(., alpha)."""
        raise NotImplementedError

    def theta_curvature_constant(self, alpha) -> Optional[float]:
        """Return d/dtheta s when it does not depend on theta, else None."""
        return None


class GaussianFixed(PriorFamily):
    """g = N(0, 1/lam); no adaptive parameter (K = 0)."""

    dim_alpha = 0

    def __init__(self, lam: float):
        if lam <= 0:
            raise ValueError("lam must be positive")
        self.lam = float(lam)

    def log_g(self, theta, alpha=None):
        theta = np.asarray(theta, dtype=float)
        return 0.5 * np.log(self.lam / (2 * np.pi)) - 0.5 * self.lam * theta**2

    def drift_s(self, theta, alpha=None):
        return -self.lam * np.asarray(theta, dtype=float)

    def dtheta_drift_s(self, theta, alpha=None):
        return np.full_like(np.asarray(theta, dtype=float), -self.lam)

    def grad_alpha_log_g(self, theta, alpha=None):
        theta = np.asarray(theta, dtype=float)
        return np.zeros(theta.shape + (0,))

    def sample(self, alpha, rng, size):
        return rng.normal(0.0, 1.0 / np.sqrt(self.lam), size=size)

    def second_moment(self, alpha=None):
        return 1.0 / self.lam

    def theta_curvature_constant(self, alpha=None):
        return -self.lam


class ZeroDrift(PriorFamily):
    """Degenerate drift s = 0 (flat improper prior); diagnostics and tests
    only. Not samplable and carries no finite moments."""

    dim_alpha = 0

    def log_g(self, theta, alpha=None):
        return np.zeros_like(np.asarray(theta, dtype=float))

    def drift_s(self, theta, alpha=None):
        return np.zeros_like(np.asarray(theta, dtype=float))

    def dtheta_drift_s(self, theta, alpha=None):
        return np.zeros_like(np.asarray(theta, dtype=float))

    def grad_alpha_log_g(self, theta, alpha=None):
        return np.zeros(np.asarray(theta, dtype=float).shape + (0,))

    def sample(self, alpha, rng, size):
        raise ValueError("the flat drift family has no sampling law")

    def second_moment(self, alpha=None):
        raise ValueError("the flat drift family has no finite moments")

    def theta_curvature_constant(self, alpha=None):
        return 0.0


class GaussianLocation(PriorFamily):
    """g = N(alpha, scale^2) with adaptive location alpha in R (K = 1)."""

    dim_alpha = 1

    def __init__(self, scale: float = 1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)
        self._prec = 1.0 / (scale * scale)

    def log_g(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        m = float(np.asarray(alpha).reshape(-1)[0])
        return -0.5 * np.log(2 * np.pi * self.scale**2) - 0.5 * self._prec * (theta - m) ** 2

    def drift_s(self, theta, alpha):
        m = float(np.asarray(alpha).reshape(-1)[0])
        return self._prec * (m - np.asarray(theta, dtype=float))

    def dtheta_drift_s(self, theta, alpha):
        return np.full_like(np.asarray(theta, dtype=float), -self._prec)

    def grad_alpha_log_g(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        m = float(np.asarray(alpha).reshape(-1)[0])
        return (self._prec * (theta - m))[..., None]

    def sample(self, alpha, rng, size):
        m = float(np.asarray(alpha).reshape(-1)[0])
        return rng.normal(m, self.scale, size=size)

    def second_moment(self, alpha):
        m = float(np.asarray(alpha).reshape(-1)[0])
        return m * m + self.scale**2

    def theta_curvature_constant(self, alpha=None):
        return -self._prec


class GaussianMeanMixture(PriorFamily):
    """Mixture sum_k p_k N(alpha_k, 1/omega_k) with adaptive means alpha in R^K.

    Responsibilities are computed in log-space with max-subtraction.
    """

    def __init__(self, weights: Sequence[float], precisions: Sequence[float]):
        self.p = np.asarray(weights, dtype=float)
        self.omega = np.asarray(precisions, dtype=float)
        if self.p.shape != self.omega.shape or self.p.ndim != 1:
            raise ValueError("weights and precisions must be 1-d of equal length")
        if np.any(self.p <= 0) or np.any(self.omega <= 0):
            raise ValueError("weights and precisions must be positive")
        self.p = self.p / self.p.sum()
        self.dim_alpha = len(self.p)

    def _log_terms(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        alpha = np.asarray(alpha, dtype=float).reshape(self.dim_alpha)
        diff = theta[..., None] - alpha
        return (
            np.log(self.p)
            + 0.5 * np.log(self.omega / (2 * np.pi))
            - 0.5 * self.omega * diff**2
        ), diff

    def _responsibilities(self, theta, alpha):
        lw, diff = self._log_terms(theta, alpha)
        lw = lw - lw.max(axis=-1, keepdims=True)
        w = np.exp(lw)
        return w / w.sum(axis=-1, keepdims=True), diff

    def log_g(self, theta, alpha):
        lw, _ = self._log_terms(theta, alpha)
        return logsumexp(lw, axis=-1)

    def drift_s(self, theta, alpha):
        r, diff = self._responsibilities(theta, alpha)
        return np.sum(r * self.omega * (-diff), axis=-1)

    def dtheta_drift_s(self, theta, alpha):
        r, diff = self._responsibilities(theta, alpha)
        v = self.omega * (-diff)
        mean_v = np.sum(r * v, axis=-1)
        var_v = np.sum(r * v * v, axis=-1) - mean_v**2
        return var_v - np.sum(r * self.omega, axis=-1)

    def grad_alpha_log_g(self, theta, alpha):
        r, diff = self._responsibilities(theta, alpha)
        return self.omega * diff * r

    def sample(self, alpha, rng, size):
        alpha = np.asarray(alpha, dtype=float).reshape(self.dim_alpha)
        comp = rng.choice(self.dim_alpha, size=size, p=self.p)
        return rng.normal(alpha[comp], 1.0 / np.sqrt(self.omega[comp]))

    def second_moment(self, alpha):
        alpha = np.asarray(alpha, dtype=float).reshape(self.dim_alpha)
        return float(np.sum(self.p * (alpha**2 + 1.0 / self.omega)))


class GaussianWeightMixture(PriorFamily):
    """Mixture with fixed means/precisions and adaptive softmax weights alpha.

    Component weights are pi_k = exp(alpha_k) / sum_j exp(alpha_j); the
    alpha-gradient `resp - pi` sums to zero across coordinates exactly.
    """

    def __init__(self, means: Sequence[float], precisions: Sequence[float]):
        self.mu = np.asarray(means, dtype=float)
        self.omega = np.asarray(precisions, dtype=float)
        if self.mu.shape != self.omega.shape or self.mu.ndim != 1:
            raise ValueError("means and precisions must be 1-d of equal length")
        if np.any(self.omega <= 0):
            raise ValueError("precisions must be positive")
        self.dim_alpha = len(self.mu)

    def _prior_weights(self, alpha):
        alpha = np.asarray(alpha, dtype=float).reshape(self.dim_alpha)
        a = alpha - alpha.max()
        w = np.exp(a)
        return w / w.sum()

    def _log_terms(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        pi = self._prior_weights(alpha)
        diff = theta[..., None] - self.mu
        return (
            np.log(pi)
            + 0.5 * np.log(self.omega / (2 * np.pi))
            - 0.5 * self.omega * diff**2
        ), diff, pi

    def _responsibilities(self, theta, alpha):
        lw, diff, pi = self._log_terms(theta, alpha)
        lw = lw - lw.max(axis=-1, keepdims=True)
        w = np.exp(lw)
        return w / w.sum(axis=-1, keepdims=True), diff, pi

    def log_g(self, theta, alpha):
        lw, _, _ = self._log_terms(theta, alpha)
        return logsumexp(lw, axis=-1)

    def drift_s(self, theta, alpha):
        r, diff, _ = self._responsibilities(theta, alpha)
        return np.sum(r * self.omega * (-diff), axis=-1)

    def dtheta_drift_s(self, theta, alpha):
        r, diff, _ = self._responsibilities(theta, alpha)
        v = self.omega * (-diff)
        mean_v = np.sum(r * v, axis=-1)
        return np.sum(r * v * v, axis=-1) - mean_v**2 - np.sum(r * self.omega, axis=-1)

    def grad_alpha_log_g(self, theta, alpha):
        r, _, pi = self._responsibilities(theta, alpha)
        return r - pi

    def sample(self, alpha, rng, size):
        pi = self._prior_weights(alpha)
        comp = rng.choice(self.dim_alpha, size=size, p=pi)
        return rng.normal(self.mu[comp], 1.0 / np.sqrt(self.omega[comp]))

    def second_moment(self, alpha):
        pi = self._prior_weights(alpha)
        return float(np.sum(pi * (self.mu**2 + 1.0 / self.omega)))


class ExpFamily(PriorFamily):
    """Exponential family g = h(theta) exp(sum_k alpha_k T_k(theta) - A(alpha)).

    Sufficient statistics are given as (T, T', T'') callable triples; the base
    measure as (log h, (log h)', (log h)''). The log-partition A(alpha) is
    evaluated by adaptive quadrature on [-L, L], with L expanded until the
    boundary tail mass is below 1e-12.
    """

    def __init__(
        self,
        stats: Sequence[tuple[Callable, Callable, Callable]],
        log_h: tuple[Callable, Callable, Callable] = (
            lambda t: np.zeros_like(np.asarray(t, dtype=float)),
            lambda t: np.zeros_like(np.asarray(t, dtype=float)),
            lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        ),
        l_init: float = 8.0,
        n_grid: int = 4097,
    ):
        self.stats = list(stats)
        self.log_h = log_h
        self.dim_alpha = len(self.stats)
        self.l_init = float(l_init)
        self.n_grid = int(n_grid)

    def _unnormalized_log(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        alpha = np.asarray(alpha, dtype=float).reshape(self.dim_alpha)
        out = self.log_h[0](theta)
        for a_k, (t_k, _, _) in zip(alpha, self.stats):
            out = out + a_k * t_k(theta)
        return out

    def _grid(self, alpha):
        # Expand the support until both tails carry < 1e-12 of the mass.
        half = self.l_init
        for _ in range(40):
            x = np.linspace(-half, half, self.n_grid)
            lg = self._unnormalized_log(x, alpha)
            m = lg.max()
            w = np.exp(lg - m)
            total = np.trapezoid(w, x)
            edge = max(w[0], w[-1]) * half
            if edge < 1e-12 * total:
                return x, w, m
            half *= 1.5
        raise RuntimeError("log-partition support expansion did not terminate")

    def log_partition(self, alpha) -> float:
        x, w, m = self._grid(alpha)
        return float(m + np.log(np.trapezoid(w, x)))

    def grad_log_partition(self, alpha) -> np.ndarray:
        x, w, _ = self._grid(alpha)
        z = np.trapezoid(w, x)
        return np.array([np.trapezoid(w * t_k(x), x) / z for t_k, _, _ in self.stats])

    def log_g(self, theta, alpha):
        return self._unnormalized_log(theta, alpha) - self.log_partition(alpha)

    def drift_s(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        alpha = np.asarray(alpha, dtype=float).reshape(self.dim_alpha)
        out = self.log_h[1](theta)
        for a_k, (_, dt_k, _) in zip(alpha, self.stats):
            out = out + a_k * dt_k(theta)
        return out

    def dtheta_drift_s(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        alpha = np.asarray(alpha, dtype=float).reshape(self.dim_alpha)
        out = self.log_h[2](theta)
        for a_k, (_, _, ddt_k) in zip(alpha, self.stats):
            out = out + a_k * ddt_k(theta)
        return out

    def grad_alpha_log_g(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        grad_a = self.grad_log_partition(alpha)
        cols = [t_k(theta) - g_k for (t_k, _, _), g_k in zip(self.stats, grad_a)]
        return np.stack(cols, axis=-1)

    def sample(self, alpha, rng, size):
        # Grid-based inverse CDF; adequate for the smooth densities used here.
        x, w, _ = self._grid(alpha)
        cdf = np.concatenate([[0.0], np.cumsum((w[1:] + w[:-1]) * 0.5 * np.diff(x))])
        cdf /= cdf[-1]
        return np.interp(rng.random(size), cdf, x)

    def second_moment(self, alpha):
        x, w, _ = self._grid(alpha)
        z = np.trapezoid(w, x)
        return float(np.trapezoid(w * x * x, x) / z)


def polynomial_stats(powers: Sequence[int]):
    """Sufficient-statistic triples T_k = theta^k with exact derivatives,
    for building exponential families from plain config data."""

    def triple(k: int):
        t = lambda x, k=k: np.asarray(x, dtype=float) ** k
        dt = lambda x, k=k: k * np.asarray(x, dtype=float) ** (k - 1)
        ddt = lambda x, k=k: k * (k - 1) * np.asarray(x, dtype=float) ** (k - 2) if k >= 2 else (
            np.zeros_like(np.asarray(x, dtype=float))
        )
        return (t, dt, ddt)

    return [triple(int(k)) for k in powers]


@dataclass
class SmoothHinge:
    """Confining regularizer: 0 inside ||alpha|| <= D, cubic ramp of width eps,
    then linear with slope 3*eps. Continuously differentiable everywhere."""

    D: float = 10.0
    eps: float = 1.0

    def value(self, alpha) -> float:
        r = float(np.linalg.norm(np.asarray(alpha, dtype=float)))
        if r <= self.D:
            return 0.0
        if r <= self.D + self.eps:
            return (r - self.D) ** 3 / self.eps
        return 3 * self.eps * (r - self.D - self.eps) + self.eps**2

    def grad(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        r = float(np.linalg.norm(alpha))
        if r <= self.D or r == 0.0:
            return np.zeros_like(alpha)
        if r <= self.D + self.eps:
            dr = 3 * (r - self.D) ** 2 / self.eps
        else:
            dr = 3 * self.eps
        return dr * alpha / r


_THETA0_KINDS = ("zero", "gaussian", "prior", "star")


@dataclass
class Theta0Spec:
    """Initial law of theta^0: point mass at 0 (default), N(0, var),
    i.i.d. from the true prior, or a copy of theta_star."""

    kind: str = "zero"
    var: float = 1.0

    def __post_init__(self):
        if self.kind not in _THETA0_KINDS:
            raise ValueError(f"theta0 kind must be one of {_THETA0_KINDS}")

    def second_moment(self, prior: "PriorSpec") -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "gaussian":
            return self.var
        return prior.family.second_moment(prior.alpha_star)


@dataclass
class PriorSpec:
    """A prior family with its current parameter, the true parameter, and the
    initial law of theta^0."""

    family: PriorFamily
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_star: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta0: Theta0Spec = field(default_factory=Theta0Spec)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.alpha_star = np.asarray(self.alpha_star, dtype=float).reshape(-1)
        k = self.family.dim_alpha
        if self.alpha.size != k or self.alpha_star.size != k:
            raise ValueError(f"alpha and alpha_star must have dimension {k}")

    @property
    def dim_alpha(self) -> int:
        return self.family.dim_alpha


def drift_s(theta, alpha, prior: PriorSpec | PriorFamily):
    """Evaluate s(theta, alpha) = d/dtheta log g for the prior's family."""
    _check_finite(theta, alpha)
    family = prior.family if isinstance(prior, PriorSpec) else prior
    return family.drift_s(theta, alpha)


def gradient_map_G(
    alpha,
    samples,
    prior: PriorSpec | PriorFamily,
    regularizer: Optional[SmoothHinge] = None,
) -> np.ndarray:
    """Empirical-Bayes gradient map: mean over samples of grad_alpha log g,
    minus the regularizer gradient when one is configured."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if samples.size == 0:
        raise ValueError("gradient_map_G requires a non-empty sample set")
    _check_finite(samples, alpha)
    family = prior.family if isinstance(prior, PriorSpec) else prior
    g = family.grad_alpha_log_g(samples, alpha)
    out = np.mean(np.atleast_2d(g), axis=0) if g.ndim > 1 else np.array([float(np.mean(g))])
    out = out.reshape(family.dim_alpha)
    if regularizer is not None:
        out = out - regularizer.grad(alpha)
    return out
