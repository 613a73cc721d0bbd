"""Discrete-time DMFT self-consistency solver.

The system is built iteratively in time: the scalar theta-side is advanced by
Monte Carlo over an ensemble of effective paths driven by a conditionally
sampled Gaussian memory field u, while the eta-side is linear in its Gaussian
inputs and is propagated deterministically on covariances (zero Monte Carlo
error). Response kernels follow their own closed recursions.

Internal state uses the raw per-step response units (theta-response base case
equals the step gamma); exported KernelTable grids are in density units
(raw / gamma), with the signal-field response r_eta_star kept in its natural
O(1) units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .kernels import KernelTable
from .model import ModelParams, component_rng
from .priors import PriorSpec, SmoothHinge, gradient_map_G

_STREAM_THETA_STAR = 101
_STREAM_THETA0 = 102
_STREAM_U = 103
_STREAM_BROWNIAN = 104

_DEFAULT_RESPONSE_BUDGET = 2 * 1024**3  # bytes for the per-path response array


class IllConditionedKernelError(RuntimeError):
    """Cholesky extension failed beyond the jitter budget."""


class MemoryBudgetError(RuntimeError):
    """Per-path response storage would exceed the configured cap."""


class CholeskyExtender:
    """Lower-triangular Cholesky factor grown one row per time step.

    Conditional variances in [-1e-10, 0] are clamped to 0 (degenerate kernels
    are legitimate, e.g. a point-mass initial law); smaller values trigger
    escalating diagonal jitter 1e-12 -> 1e-8 before failing.
    """

    CLAMP_TOL = 1e-10
    JITTERS = (0.0, 1e-12, 1e-10, 1e-8)

    def __init__(self, max_size: int):
        self.L = np.zeros((max_size, max_size))
        # Solve mirror: unit diagonal on degenerate rows keeps forward
        # substitution well posed (the corresponding coefficient comes out ~0).
        self._L_solve = np.eye(max_size)
        self.size = 0
        self.clamped_steps: list[int] = []
        self.jitter_log: list[tuple[int, float]] = []

    def extend(self, new_row: np.ndarray, new_diag: float) -> tuple[np.ndarray, float]:
        """Add one variable; returns (solve coefficients a, conditional sd).

        The conditional law of the new variable given the past is
        N(a . z_past, sd^2) where z_past are the standardized innovations.
        """
        k = self.size
        new_row = np.asarray(new_row, dtype=float)
        if new_row.shape != (k,):
            raise ValueError(f"expected covariance row of length {k}")
        if k == 0:
            a = np.zeros(0)
            cond_var = float(new_diag)
        else:
            a = solve_triangular(self._L_solve[:k, :k], new_row, lower=True)
            cond_var = float(new_diag - a @ a)
        applied = None
        for jit in self.JITTERS:
            if cond_var + jit >= -self.CLAMP_TOL:
                applied = jit
                cond_var = cond_var + jit
                break
        if applied is None:
            raise IllConditionedKernelError(
                f"conditional variance {cond_var:.3e} at step {k} exceeds the jitter budget"
            )
        if applied > 0:
            self.jitter_log.append((k, applied))
        if cond_var < 0:
            self.clamped_steps.append(k)
            cond_var = 0.0
        sd = float(np.sqrt(cond_var))
        self.L[k, :k] = a
        self.L[k, k] = sd
        self._L_solve[k, :k] = a
        self._L_solve[k, k] = sd if sd > 0 else 1.0
        self.size = k + 1
        return a, sd

    def innovations(self, draws: np.ndarray) -> np.ndarray:
        """Standardized innovations z with draws = L z (degenerate rows carry
        zero innovation)."""
        k = self.size
        return solve_triangular(self._L_solve[:k, :k], np.asarray(draws, dtype=float), lower=True)


def extend_conditional_gaussian(
    chol: CholeskyExtender,
    new_cov_row: np.ndarray,
    past_draws: np.ndarray,
    standard_normal: float | np.ndarray,
    new_diag: Optional[float] = None,
):
    """Draw the next variable of a Gaussian vector conditionally on the past.

    `new_cov_row` holds Cov(new, past) followed by Var(new) when `new_diag` is
    not given separately. The factor is extended in place by one row.
    """
    new_cov_row = np.asarray(new_cov_row, dtype=float)
    if new_diag is None:
        new_cov_row, new_diag = new_cov_row[:-1], float(new_cov_row[-1])
    past_draws = np.asarray(past_draws, dtype=float)
    if past_draws.shape[-1] != chol.size:
        raise ValueError("past draws inconsistent with factor size")
    k = chol.size
    z = chol.innovations(past_draws.T).T if k else np.zeros(past_draws.shape[:-1] + (0,))
    a, sd = chol.extend(new_cov_row, new_diag)
    return z @ a + sd * np.asarray(standard_normal)


class EtaSide:
    """Deterministic propagation of the residual-side kernels.

    xi^t = eta^t + w* - eps is linear in (w*, eps, w^0..w^T); the recursion is
    applied to its coefficient vectors, and C_eta follows from the joint input
    covariance assembled out of the theta-side correlation grids.
    """

    def __init__(self, n_steps: int, sigma2: float, delta: float, beta: float):
        T = n_steps
        self.T, self.sigma2, self.delta, self.beta = T, sigma2, delta, beta
        self.xi = np.zeros((T + 1, T + 3))  # basis: (w*, eps, w^0..w^T)
        self.sig = np.zeros((T + 3, T + 3))  # input covariance, grown with C_theta
        self.sig[1, 1] = sigma2
        self.c_eta = np.full((T + 1, T + 1), np.nan)
        self.r_eta_raw = np.zeros((T + 1, T + 1))  # delta*beta * deta^t/dw^s, s < t
        self.deta_dwstar = np.zeros(T + 1)
        self._deta_dw = np.zeros((T + 1, T + 1))  # deta^t/dw^s before delta*beta scaling

    def add_step(self, t, c_theta_row, c_theta_star_t, c_star_star, r_theta_raw_row):
        """Ingest theta-side grids at time t and emit the eta-side row t.

        c_theta_row: C_theta(t, 0..t); r_theta_raw_row: R_theta^step(t, 0..t-1).
        """
        beta, delta = self.beta, self.delta
        # Grow the input covariance with the new theta row.
        self.sig[0, 0] = c_star_star
        self.sig[0, 2 + t] = self.sig[2 + t, 0] = c_theta_star_t
        self.sig[2 + t, 2 : 3 + t] = c_theta_row
        self.sig[2 : 3 + t, 2 + t] = c_theta_row

        row = -beta * (r_theta_raw_row @ self.xi[:t]) if t else np.zeros(self.T + 3)
        row[0] += 1.0
        row[1] -= 1.0
        row[2 + t] -= 1.0
        self.xi[t] = row

        k = 3 + t
        sv = self.sig[:k, :k] @ self.xi[t, :k]
        self.c_eta[t, : t + 1] = delta * beta**2 * (self.xi[: t + 1, :k] @ sv)
        self.c_eta[: t + 1, t] = self.c_eta[t, : t + 1]

        if t > 0:
            # deta^t/dw^s = beta (R_theta(t,s) - sum_{r>s} R_theta(t,r) deta^r/dw^s)
            conv = r_theta_raw_row[1:t] @ self._deta_dw[1:t, :t] if t > 1 else 0.0
            self._deta_dw[t, :t] = beta * (r_theta_raw_row - conv)
            self.r_eta_raw[t, :t] = delta * beta * self._deta_dw[t, :t]
            # deta^t/dw* = -beta sum_s R_theta(t,s) (deta^s/dw* + 1)
            self.deta_dwstar[t] = -beta * float(r_theta_raw_row @ (self.deta_dwstar[:t] + 1.0))

    def r_eta_star(self) -> np.ndarray:
        return self.delta * self.beta * self.deta_dwstar


def propagate_eta(
    c_theta: np.ndarray,
    c_theta_star: np.ndarray,
    c_star_star: float,
    r_theta_raw: np.ndarray,
    sigma2: float,
    delta: float,
    beta: float,
):
    """Full-grid eta-side propagation from complete theta-side grids.

    Returns (c_eta, r_eta_raw, r_eta_star) with r_eta_raw in per-step units
    and r_eta_star in natural units. Pure linear algebra, no sampling.
    """
    T = c_theta.shape[0] - 1
    side = EtaSide(T, sigma2, delta, beta)
    for t in range(T + 1):
        side.add_step(t, c_theta[t, : t + 1], c_theta_star[t], c_star_star, r_theta_raw[t, :t])
    return side.c_eta, side.r_eta_raw, side.r_eta_star()


def _response_rows_constant(t, v, coeff, gamma, r_eta_raw_row):
    """One step of the response recursion with theta-independent curvature.

    v[r, s] = (dtheta^r/du^s) / gamma; writes row t+1 given rows <= t."""
    if t > 0:
        mem = r_eta_raw_row[1:t] @ v[1:t, :t] if t > 1 else 0.0
        v[t + 1, :t] = v[t, :t] * coeff + gamma * mem
    v[t + 1, t] = 1.0


def _response_rows_paths(t, v, coeff, gamma, r_eta_raw_row):
    """Per-path variant: v has shape (paths, steps+1, steps+1), coeff (paths,)."""
    if t > 0:
        if t > 1:
            mem = np.tensordot(v[:, 1:t, :t], r_eta_raw_row[1:t], axes=([1], [0]))
        else:
            mem = 0.0
        v[:, t + 1, :t] = v[:, t, :t] * coeff[:, None] + np.float32(gamma) * mem
    v[:, t + 1, t] = 1.0


@dataclass
class DmftResult:
    table: KernelTable
    theta_paths: Optional[np.ndarray]  # (paths, steps+1) when retention is on
    theta_star: Optional[np.ndarray]
    r_theta_stderr: Optional[np.ndarray]
    chol_clamped_steps: list = field(default_factory=list)
    chol_jitter_log: list = field(default_factory=list)


def solve_dmft(
    params: ModelParams,
    prior: PriorSpec,
    n_paths: int,
    seed: int,
    regularizer: Optional[SmoothHinge] = None,
    retain_paths: bool = True,
    response_budget_bytes: int = _DEFAULT_RESPONSE_BUDGET,
    given_eta: Optional[KernelTable] = None,
) -> DmftResult:
    """Solve the discrete DMFT system by the time-iterated construction.

    Per step: extend every path's theta with a freshly sampled conditional
    Gaussian field, update response arrays, take ensemble means for the
    theta-side kernels and the parameter flow, and propagate the eta-side
    deterministically. `given_eta` freezes the eta-side kernels to an existing
    table (used for fixed-point verification) instead of self-consistency.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    T = params.n_steps
    gamma, delta, beta, sigma2 = params.gamma_step, params.delta, params.beta, params.sigma2
    P = int(n_paths)
    K = prior.dim_alpha

    curvature = prior.family.theta_curvature_constant(prior.alpha)
    per_path = curvature is None
    if per_path:
        need = P * (T + 1) * (T + 1) * 4
        if need > response_budget_bytes:
            max_paths = response_budget_bytes // ((T + 1) * (T + 1) * 4)
            raise MemoryBudgetError(
                f"per-path response array needs {need / 1024**3:.2f} GiB "
                f"(cap {response_budget_bytes / 1024**3:.2f} GiB); "
                f"reduce n_paths to <= {max_paths} or coarsen the grid"
            )
        v_resp = np.zeros((P, T + 1, T + 1), dtype=np.float32)
    else:
        v_resp = np.zeros((T + 1, T + 1))

    rng_star = component_rng(seed, _STREAM_THETA_STAR)
    rng_t0 = component_rng(seed, _STREAM_THETA0)
    rng_u = component_rng(seed, _STREAM_U)
    rng_b = component_rng(seed, _STREAM_BROWNIAN)

    theta_star = prior.family.sample(prior.alpha_star, rng_star, P)
    t0 = prior.theta0
    if t0.kind == "zero":
        theta = np.zeros(P)
    elif t0.kind == "gaussian":
        theta = rng_t0.normal(0.0, np.sqrt(t0.var), size=P)
    elif t0.kind == "prior":
        theta = prior.family.sample(prior.alpha_star, rng_t0, P)
    else:  # "star"
        theta = theta_star.copy()

    theta_paths = np.zeros((P, T + 1))
    theta_paths[:, 0] = theta
    z_innov = np.zeros((P, T))  # standardized innovations of the u draws
    alpha = np.zeros((T + 1, K))
    alpha[0] = prior.alpha

    c_theta = np.full((T + 1, T + 1), np.nan)
    c_theta_se = np.zeros((T + 1, T + 1))
    c_theta_star = np.zeros(T + 1)
    c_theta_star_se = np.zeros(T + 1)
    r_theta_raw = np.zeros((T + 1, T + 1))
    r_theta_se = np.zeros((T + 1, T + 1))
    c_star_star = float(np.mean(theta_star**2))

    eta = EtaSide(T, sigma2, delta, beta)
    chol = CholeskyExtender(T + 1)
    if given_eta is not None:
        if given_eta.n_times != T + 1:
            raise ValueError("given_eta grid does not match the requested horizon")
        ce_given = given_eta.c_eta
        re_given = given_eta.r_eta * gamma  # density -> per-step units

    sqP = np.sqrt(P)
    for t in range(T + 1):
        th_t = theta_paths[:, t]
        prods = theta_paths[:, : t + 1] * th_t[:, None]
        c_theta[t, : t + 1] = prods.mean(axis=0)
        c_theta[: t + 1, t] = c_theta[t, : t + 1]
        c_theta_se[t, : t + 1] = prods.std(axis=0) / sqP
        c_theta_se[: t + 1, t] = c_theta_se[t, : t + 1]
        star_prod = th_t * theta_star
        c_theta_star[t] = star_prod.mean()
        c_theta_star_se[t] = star_prod.std() / sqP
        if t > 0:
            if per_path:
                rows = v_resp[:, t, :t].astype(np.float64)
                r_theta_raw[t, :t] = gamma * rows.mean(axis=0)
                r_theta_se[t, :t] = gamma * rows.std(axis=0) / sqP
            else:
                r_theta_raw[t, :t] = gamma * v_resp[t, :t]

        if given_eta is None:
            eta.add_step(t, c_theta[t, : t + 1], c_theta_star[t], c_star_star, r_theta_raw[t, :t])
            c_eta_row = eta.c_eta[t, : t + 1]
            r_eta_row = eta.r_eta_raw[t, :t]
        else:
            c_eta_row = ce_given[t, : t + 1]
            r_eta_row = re_given[t, :t]

        if t == T:
            break

        # Conditionally sample u^t given this path's past u draws.
        a, sd = chol.extend(c_eta_row[:t], float(c_eta_row[t]))
        zeta = rng_u.standard_normal(P)
        u_t = (z_innov[:, :t] @ a if t else 0.0) + sd * zeta
        z_innov[:, t] = zeta

        # Response rows t+1 (chain rule through the theta recursion).
        if per_path:
            ds = prior.family.dtheta_drift_s(th_t, alpha[t]).astype(np.float32)
            coeff = np.float32(1.0) + np.float32(gamma) * (np.float32(-delta * beta) + ds)
            _response_rows_paths(t, v_resp, coeff, gamma, r_eta_row)
        else:
            coeff = 1.0 + gamma * (-delta * beta + curvature)
            _response_rows_constant(t, v_resp, coeff, gamma, r_eta_row)

        # theta step: drift + memory + field + Brownian increment.
        drift = -delta * beta * (th_t - theta_star) + prior.family.drift_s(th_t, alpha[t])
        if t > 0:
            drift = drift + (theta_paths[:, :t] - theta_star[:, None]) @ r_eta_row
        theta_paths[:, t + 1] = (
            th_t + gamma * (drift + u_t) + np.sqrt(2.0) * rng_b.normal(0.0, np.sqrt(gamma), size=P)
        )
        if K:
            alpha[t + 1] = alpha[t] + gamma * gradient_map_G(alpha[t], th_t, prior, regularizer)

    if given_eta is None:
        c_eta = eta.c_eta
        r_eta_raw_full = eta.r_eta_raw
        r_eta_star = eta.r_eta_star()
    else:
        c_eta = ce_given.copy()
        r_eta_raw_full = re_given.copy()
        r_eta_star = given_eta.r_eta_star.copy()

    times = gamma * np.arange(T + 1)
    table = KernelTable(
        times=times,
        gamma=gamma,
        source="dmft-mc",
        c_theta=c_theta,
        c_theta_star=c_theta_star,
        c_star_star=c_star_star,
        c_eta=c_eta,
        r_theta=r_theta_raw / gamma,
        r_eta=r_eta_raw_full / gamma,
        r_eta_star=r_eta_star,
        alpha=alpha,
        stderr={"c_theta": c_theta_se, "c_theta_star": c_theta_star_se, "r_theta": r_theta_se / gamma},
    )
    return DmftResult(
        table=table,
        theta_paths=theta_paths if retain_paths else None,
        theta_star=theta_star if retain_paths else None,
        r_theta_stderr=r_theta_se / gamma,
        chol_clamped_steps=chol.clamped_steps,
        chol_jitter_log=chol.jitter_log,
    )


def linear_gaussian_dmft(
    params: ModelParams,
    lam: float,
    tau_star2: float,
    source: str = "dmft-linear",
) -> KernelTable:
    """Monte-Carlo-free DMFT solution for the fixed Gaussian prior, theta^0 = 0.

    With a linear score the theta recursion is linear in (theta*, u-field,
    Brownian increments), so the correlation grids propagate deterministically
    on coefficient vectors and the response recursion closes on itself.
    """
    T = params.n_steps
    gamma, delta, beta, sigma2 = params.gamma_step, params.delta, params.beta, params.sigma2
    if lam <= 0 or tau_star2 <= 0:
        raise ValueError("lam and tau_star2 must be positive")

    # Coefficient basis: (theta*, u^0..u^{T-1}, g^0..g^{T-1}).
    tc = np.zeros((T + 1, 1 + 2 * T))
    v_resp = np.zeros((T + 1, T + 1))
    c_theta = np.full((T + 1, T + 1), np.nan)
    c_theta_star = np.zeros(T + 1)
    r_theta_raw = np.zeros((T + 1, T + 1))
    eta = EtaSide(T, sigma2, delta, beta)
    coeff = 1.0 + gamma * (-delta * beta - lam)

    for t in range(T + 1):
        u_part = tc[: t + 1, 1 : 1 + T]
        g_part = tc[: t + 1, 1 + T :]
        sv_u = eta.c_eta[:t, :t] @ tc[t, 1 : 1 + t] if t else np.zeros(0)
        c_row = (
            tau_star2 * tc[: t + 1, 0] * tc[t, 0]
            + (u_part[:, :t] @ sv_u if t else 0.0)
            + gamma * (g_part @ tc[t, 1 + T :])
        )
        c_theta[t, : t + 1] = c_row
        c_theta[: t + 1, t] = c_row
        c_theta_star[t] = tau_star2 * tc[t, 0]
        if t > 0:
            r_theta_raw[t, :t] = gamma * v_resp[t, :t]

        eta.add_step(t, c_theta[t, : t + 1], c_theta_star[t], tau_star2, r_theta_raw[t, :t])
        if t == T:
            break

        r_eta_row = eta.r_eta_raw[t, :t]
        _response_rows_constant(t, v_resp, coeff, gamma, r_eta_row)

        drift = -(delta * beta + lam) * tc[t]
        drift[0] += delta * beta
        if t > 0:
            drift = drift + r_eta_row @ tc[:t]
            drift[0] -= r_eta_row.sum()
        new = tc[t] + gamma * drift
        new[1 + t] += gamma  # u^t enters the drift with unit coefficient
        new[1 + T + t] += np.sqrt(2.0)  # sqrt(2) * (b^{t+1} - b^t)
        tc[t + 1] = new

    times = gamma * np.arange(T + 1)
    return KernelTable(
        times=times,
        gamma=gamma,
        source=source,
        c_theta=c_theta,
        c_theta_star=c_theta_star,
        c_star_star=tau_star2,
        c_eta=eta.c_eta,
        r_theta=r_theta_raw / gamma,
        r_eta=eta.r_eta_raw / gamma,
        r_eta_star=eta.r_eta_star(),
        alpha=np.zeros((T + 1, 0)),
    )


def dmft_marginal_samples(result: DmftResult, t: float, n: int):
    """Retained ensemble draws (theta_star, theta^t) at grid time t."""
    if result.theta_paths is None:
        raise ValueError("path retention was disabled for this solve")
    times = result.table.times
    idx = int(np.argmin(np.abs(times - t)))
    if abs(times[idx] - t) > 1e-9:
        raise ValueError(f"t={t} is not on the solver grid")
    P = result.theta_paths.shape[0]
    if n > P:
        raise ValueError(f"requested {n} samples but the ensemble has {P}")
    return result.theta_star[:n].copy(), result.theta_paths[:n, idx].copy()


def eta_response_identity_residual(table: KernelTable) -> float:
    """Max over grid times of |r_eta_star(t) + sum_s r_eta_raw(t, s)|.

    The signal-field response must equal minus the row sum of the field
    responses exactly (a discrete chain-rule identity)."""
    r_eta_raw = table.r_eta * table.gamma
    m = table.n_times
    worst = 0.0
    for t in range(m):
        worst = max(worst, abs(table.r_eta_star[t] + r_eta_raw[t, :t].sum()))
    return worst
