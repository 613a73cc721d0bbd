"""High-dimensional adaptive Langevin simulation and empirical kernels.

The chain is the Euler discretization

    theta^{t+1} = theta^t + gamma (-beta X^T (X theta^t - y) + s(theta^t, a^t))
                  + sqrt(2) (b^{t+1} - b^t),
    a^{t+1}     = a^t + gamma G(a^t, empirical law of theta^t),

with independent N(0, gamma) Brownian increments per coordinate. Correlation
kernels are coordinate averages; response traces are Jacobian-product traces
through the step matrices Omega^t = I - gamma beta X^T X
+ gamma diag(ds(theta^t, a^t)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import KernelTable
from .model import ModelInstance, ModelParams, component_rng
from .priors import PriorSpec, SmoothHinge, gradient_map_G

_STREAM_BROWNIAN = 201
_STREAM_PROBES = 202

_NORM_GUARD = 1e6


class DivergenceError(RuntimeError):
    """State blew up (NaN/Inf or norm guard); reports the offending step."""


@dataclass
class Trajectory:
    times: np.ndarray  # retained physical times
    step_indices: np.ndarray
    theta_path: np.ndarray  # (retained, d)
    alpha_path: np.ndarray  # (retained, K)
    residual_path: Optional[np.ndarray]  # (retained, n): X theta^t - y
    seed: int
    noise_mode: str
    retain_every: int

    @property
    def full(self) -> bool:
        return self.retain_every == 1


def evolve(
    instance: ModelInstance,
    prior: PriorSpec,
    params: ModelParams,
    seed: int,
    noise_mode: str = "stochastic",
    retain_every: int = 10,
    store_residuals: bool = True,
    regularizer: Optional[SmoothHinge] = None,
    _perturb: Optional[tuple[int, np.ndarray]] = None,
    _track_coord: Optional[int] = None,
):
    """Run the Euler chain; returns a Trajectory (and a per-step coordinate
    series when _track_coord is set, used by the finite-difference response).

    frozen-zero noise mode sets every Brownian increment to zero, which turns
    the chain into deterministic gradient descent for unit testing.
    """
    if noise_mode not in ("stochastic", "frozen-zero"):
        raise ValueError("noise_mode must be 'stochastic' or 'frozen-zero'")
    X, y = instance.X, instance.y
    if X.shape != (params.n, params.d):
        raise ValueError("instance dimensions do not match params")
    T = params.n_steps
    if T % retain_every != 0:
        raise ValueError("retain_every must divide the step count")
    gamma, beta = params.gamma_step, params.beta
    K = prior.dim_alpha
    sqrt_d = np.sqrt(params.d)

    theta = instance.theta0.astype(float).copy()
    alpha = prior.alpha.copy()
    rng_b = component_rng(seed, _STREAM_BROWNIAN)

    kept = list(range(0, T + 1, retain_every))
    theta_path = np.empty((len(kept), params.d))
    alpha_path = np.empty((len(kept), K))
    residual_path = np.empty((len(kept), params.n)) if store_residuals else None
    coord_series = np.empty(T + 1) if _track_coord is not None else None
    keep_pos = {t: i for i, t in enumerate(kept)}

    for t in range(T + 1):
        if not np.isfinite(theta).all() or np.linalg.norm(theta) / sqrt_d > _NORM_GUARD:
            raise DivergenceError(f"state diverged at step {t} (gamma too large for this instance)")
        if coord_series is not None:
            coord_series[t] = theta[_track_coord]
        if t in keep_pos:
            i = keep_pos[t]
            theta_path[i] = theta
            alpha_path[i] = alpha
            if store_residuals:
                residual_path[i] = X @ theta - y
        if t == T:
            break
        resid = X @ theta - y
        drift = -beta * (X.T @ resid) + prior.family.drift_s(theta, alpha)
        if _perturb is not None and t == _perturb[0]:
            drift = drift + _perturb[1]
        if noise_mode == "stochastic":
            incr = rng_b.normal(0.0, np.sqrt(gamma), size=params.d)
        else:
            incr = 0.0
        new_theta = theta + gamma * drift + np.sqrt(2.0) * incr
        if K:
            alpha = alpha + gamma * gradient_map_G(alpha, theta, prior, regularizer)
        theta = new_theta

    traj = Trajectory(
        times=gamma * np.asarray(kept, dtype=float),
        step_indices=np.asarray(kept),
        theta_path=theta_path,
        alpha_path=alpha_path,
        residual_path=residual_path,
        seed=int(seed),
        noise_mode=noise_mode,
        retain_every=retain_every,
    )
    if _track_coord is not None:
        return traj, coord_series
    return traj


def empirical_kernels(
    replicas: list[Trajectory],
    instances,
    params: ModelParams,
) -> KernelTable:
    """Replica-averaged coordinate kernels with across-replica standard errors.

    `instances` is either one shared ModelInstance (replicas differ only in
    the Brownian path) or a list aligned with `replicas` (each replica is an
    independent realization of the model). C_theta(t,s) averages
    theta^t . theta^s / d; C_eta scales the residual Gram by
    delta beta^2 / n. Symmetric blocks are computed once and mirrored.
    """
    if not replicas:
        raise ValueError("need at least one replica")
    if isinstance(instances, ModelInstance):
        instances = [instances] * len(replicas)
    if len(instances) != len(replicas):
        raise ValueError("instances must align with replicas")
    t0 = replicas[0]
    for tr in replicas[1:]:
        if tr.times.shape != t0.times.shape or np.max(np.abs(tr.times - t0.times)) > 1e-12:
            raise ValueError("replica grids do not match")
    d, n = params.d, params.n
    scale_eta = params.delta * params.beta**2 / n
    ct = np.stack([tr.theta_path @ tr.theta_path.T / d for tr in replicas])
    cs = np.stack([tr.theta_path @ inst.theta_star / d for tr, inst in zip(replicas, instances)])
    ss = np.array([inst.theta_star @ inst.theta_star / d for inst in instances])
    al = np.stack([tr.alpha_path for tr in replicas])
    R = len(replicas)
    ddof = 1 if R > 1 else 0
    m = t0.times.size
    if all(tr.residual_path is not None for tr in replicas):
        ce = np.stack([scale_eta * (tr.residual_path @ tr.residual_path.T) for tr in replicas])
        c_eta = ce.mean(axis=0)
        c_eta = np.tril(c_eta) + np.tril(c_eta, -1).T
        ce_se = ce.std(axis=0, ddof=ddof) / np.sqrt(R)
    else:
        c_eta = np.full((m, m), np.nan)
        ce_se = None

    c_theta = ct.mean(axis=0)
    c_theta = np.tril(c_theta) + np.tril(c_theta, -1).T  # bit-exact symmetry
    stderr = {
        "c_theta": ct.std(axis=0, ddof=ddof) / np.sqrt(R),
        "c_theta_star": cs.std(axis=0, ddof=ddof) / np.sqrt(R),
    }
    if ce_se is not None:
        stderr["c_eta"] = ce_se
    return KernelTable(
        times=t0.times,
        gamma=params.gamma_step,
        source="simulate",
        c_theta=c_theta,
        c_theta_star=cs.mean(axis=0),
        c_star_star=float(ss.mean()),
        c_eta=c_eta,
        r_theta=np.full((m, m), np.nan),
        r_eta=np.full((m, m), np.nan),
        r_eta_star=np.full(m, np.nan),
        alpha=al.mean(axis=0),
        stderr=stderr,
    )


@dataclass
class ResponseTraces:
    """Normalized Jacobian-product response traces on a coarse time grid.

    Values are raw per-step responses: the theta-side base case (t = s+1)
    equals gamma exactly; divide by gamma for the density-unit kernels."""

    times: np.ndarray
    step_indices: np.ndarray
    r_theta: np.ndarray  # (m, m), entries for t > s
    r_eta: np.ndarray
    r_theta_stderr: Optional[np.ndarray] = None
    r_eta_stderr: Optional[np.ndarray] = None
    method: str = "exact-product"


def _omega_matvec(w, X, gamma_beta, gamma_ds):
    """Apply Omega = I - gamma beta X^T X + gamma diag(ds) to columns of w."""
    return w - gamma_beta * (X.T @ (X @ w)) + gamma_ds[:, None] * w


def _curvature_series(traj: Optional[Trajectory], prior: PriorSpec, params: ModelParams):
    """Per-step diag(ds) series, or a scalar when the curvature is constant."""
    const = prior.family.theta_curvature_constant(prior.alpha)
    if const is not None:
        return float(const)
    if traj is None or not traj.full:
        raise ValueError(
            "response traces for a theta-dependent score need a fully retained trajectory"
        )
    return None  # caller evaluates per step from traj


def response_traces(
    trajectory: Optional[Trajectory],
    instance: ModelInstance,
    prior: PriorSpec,
    params: ModelParams,
    step_indices,
    method: str = "exact-product",
    n_probes: int = 32,
    seed: int = 0,
) -> ResponseTraces:
    """Estimate d^-1 Tr R_theta(t,s) and n^-1 Tr R_eta(t,s) on a step grid.

    exact-product forms the Omega chain products (O(d^3) per step range);
    probe mode pushes Rademacher probes through the chain and reports
    Hutchinson standard errors. Entries are raw per-step responses.
    """
    steps = np.asarray(sorted(set(int(k) for k in step_indices)))
    if steps.size and (steps[0] < 0 or steps[-1] > params.n_steps):
        raise ValueError("requested steps outside the simulated range")
    m = steps.size
    gamma, beta, delta = params.gamma_step, params.beta, params.delta
    X = instance.X
    d, n = params.d, params.n
    const = _curvature_series(trajectory, prior, params)

    r_theta = np.full((m, m), np.nan)
    r_eta = np.full((m, m), np.nan)
    r_theta_se = np.full((m, m), np.nan)
    r_eta_se = np.full((m, m), np.nan)

    if method == "exact-product" and const is not None:
        # Constant curvature: Omega is step-independent; use its spectrum.
        evals = np.linalg.eigvalsh(X.T @ X)
        om = 1.0 - gamma * beta * evals + gamma * const
        for a in range(m):
            for b in range(a):
                k = steps[a] - steps[b] - 1
                pw = om**k
                r_theta[a, b] = gamma * float(np.mean(pw))
                r_eta[a, b] = delta * beta**2 * gamma * float(np.sum(evals * pw)) / n
        return ResponseTraces(steps * gamma, steps, r_theta, r_eta, method=method)

    if method == "exact-product":
        ds_at = lambda t: prior.family.dtheta_drift_s(
            trajectory.theta_path[t], trajectory.alpha_path[t]
        )
        for b in range(m):
            s = steps[b]
            P = np.eye(d)
            targets = {steps[a]: a for a in range(b + 1, m)}
            for t in range(s + 1, steps[-1] + 1):
                if t in targets:
                    a = targets[t]
                    r_theta[a, b] = gamma * float(np.trace(P)) / d
                    XP = X @ P
                    r_eta[a, b] = delta * beta**2 * gamma * float(np.sum(XP * X)) / n
                if t == steps[-1]:
                    break
                P = _omega_matvec(P, X, gamma * beta, gamma * ds_at(t))
        return ResponseTraces(steps * gamma, steps, r_theta, r_eta, method=method)

    if method != "probe":
        raise ValueError("method must be 'exact-product' or 'probe'")

    rng = component_rng(seed, _STREAM_PROBES)
    for b in range(m):
        s = steps[b]
        z = (2.0 * rng.integers(0, 2, size=(d, n_probes)) - 1.0)  # theta-side probes
        q = (2.0 * rng.integers(0, 2, size=(n, n_probes)) - 1.0)  # eta-side probes
        w_theta = z.copy()
        w_eta = X.T @ q
        targets = {steps[a]: a for a in range(b + 1, m)}
        for t in range(s + 1, steps[-1] + 1):
            if t in targets:
                a = targets[t]
                est_t = gamma * np.sum(z * w_theta, axis=0) / d
                r_theta[a, b] = float(est_t.mean())
                r_theta_se[a, b] = float(est_t.std(ddof=1) / np.sqrt(n_probes))
                est_e = delta * beta**2 * gamma * np.sum(q * (X @ w_eta), axis=0) / n
                r_eta[a, b] = float(est_e.mean())
                r_eta_se[a, b] = float(est_e.std(ddof=1) / np.sqrt(n_probes))
            if t == steps[-1]:
                break
            if const is not None:
                ds = np.full(d, const)
            else:
                ds = prior.family.dtheta_drift_s(trajectory.theta_path[t], trajectory.alpha_path[t])
            w_theta = _omega_matvec(w_theta, X, gamma * beta, gamma * ds)
            w_eta = _omega_matvec(w_eta, X, gamma * beta, gamma * ds)
    return ResponseTraces(steps * gamma, steps, r_theta, r_eta, r_theta_se, r_eta_se, method=method)


def average_response_traces(traces: list[ResponseTraces]) -> ResponseTraces:
    """Replica-average of response traces (fixed merge order)."""
    base = traces[0]
    rt = np.mean([tr.r_theta for tr in traces], axis=0)
    re = np.mean([tr.r_eta for tr in traces], axis=0)
    return ResponseTraces(base.times, base.step_indices, rt, re, method=base.method)


def attach_response(table: KernelTable, traces: ResponseTraces) -> KernelTable:
    """Fill a simulator kernel table's response grids (density units)."""
    pos = {int(k): i for i, k in enumerate(np.rint(table.times / table.gamma))}
    for a, ka in enumerate(traces.step_indices):
        for b, kb in enumerate(traces.step_indices):
            if b >= a or np.isnan(traces.r_theta[a, b]):
                continue
            i, j = pos[int(ka)], pos[int(kb)]
            table.r_theta[i, j] = traces.r_theta[a, b] / table.gamma
            table.r_eta[i, j] = traces.r_eta[a, b] / table.gamma
    return table


def finite_diff_response(
    instance: ModelInstance,
    prior: PriorSpec,
    params: ModelParams,
    s: int,
    j: int,
    eps: Optional[float] = None,
    seed: int = 0,
    noise_mode: str = "stochastic",
) -> np.ndarray:
    """Single-coordinate response by common-random-number finite differences.

    Perturbs the drift by eps * e_j at step s and returns
    (theta_j^{t,eps} - theta_j^t) / eps for t = s+1 .. n_steps, sharing the
    Brownian path between the two runs.
    """
    if not 0 <= s < params.n_steps:
        raise ValueError("perturbation step outside the horizon")
    _, base = evolve(
        instance, prior, params, seed, noise_mode, retain_every=params.n_steps,
        store_residuals=False, _track_coord=j,
    )
    if eps is None:
        base_traj = evolve(
            instance, prior, params, seed, noise_mode,
            retain_every=1, store_residuals=False,
        )
        theta_s = base_traj.theta_path[s]
        eps = 1e-4 * (1.0 + np.linalg.norm(theta_s) / np.sqrt(params.d))
    if eps <= 0:
        raise ValueError("eps must be positive")
    pert = np.zeros(params.d)
    pert[j] = eps
    _, bumped = evolve(
        instance, prior, params, seed, noise_mode, retain_every=params.n_steps,
        store_residuals=False, _perturb=(s, pert), _track_coord=j,
    )
    return (bumped[s + 1 :] - base[s + 1 :]) / eps


def wasserstein2_1d(samples_a, samples_b) -> float:
    """W2 distance of two equal-size 1-d samples: root-mean-square difference
    of order statistics."""
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size != b.size:
        raise ValueError("sample sizes differ; use resample_to_common_size first")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def resample_to_common_size(samples_a, samples_b, size: Optional[int] = None):
    """Empirical-quantile resampling of both samples to a common size."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    k = size or max(a.size, b.size)
    qs = (np.arange(k) + 0.5) / k
    return np.quantile(a, qs), np.quantile(b, qs)
