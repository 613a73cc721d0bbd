import numpy as np
import pytest

from dmft_lab.dmft import (
    CholeskyExtender,
    IllConditionedKernelError,
    MemoryBudgetError,
    dmft_marginal_samples,
    eta_response_identity_residual,
    extend_conditional_gaussian,
    linear_gaussian_dmft,
    propagate_eta,
    solve_dmft,
)
from dmft_lab.kernels import restrict_to_times
from dmft_lab.model import ModelParams
from dmft_lab.mp_oracle import corr_kernels, resp_kernels
from dmft_lab.priors import GaussianFixed, GaussianMeanMixture, PriorSpec, Theta0Spec


def small_params(gamma=0.05, horizon=1.5):
    return ModelParams(n=200, d=100, sigma2=1.0, beta=1.0, gamma_step=gamma, horizon=horizon)


# ------------------------------------------------------- conditional draws


def test_extender_matches_full_cholesky(rng):
    for _ in range(10):
        k = rng.integers(2, 7)
        A = rng.normal(size=(k, k))
        cov = A @ A.T + 0.1 * np.eye(k)
        ext = CholeskyExtender(k)
        for i in range(k):
            ext.extend(cov[i, :i], cov[i, i])
        L = np.linalg.cholesky(cov)
        assert np.allclose(ext.L[:k, :k], L, atol=1e-10)


def test_conditional_mean_and_variance_schur():
    ext = CholeskyExtender(2)
    ext.extend(np.zeros(0), 1.0)
    draw = extend_conditional_gaussian(ext, np.array([0.5, 1.0]), np.array([1.0]), 0.0)
    assert draw == pytest.approx(0.5, abs=1e-14)  # conditional mean
    assert ext.L[1, 1] ** 2 == pytest.approx(0.75, abs=1e-14)  # conditional variance


def test_degenerate_row_copies_past_draw():
    ext = CholeskyExtender(2)
    ext.extend(np.zeros(0), 1.0)
    draw = extend_conditional_gaussian(ext, np.array([1.0, 1.0]), np.array([0.3]), 5.0)
    assert draw == pytest.approx(0.3, abs=1e-12)
    assert ext.clamped_steps == [1] or ext.L[1, 1] == 0.0


def test_identity_covariance_gives_independent_draws(rng):
    n = 4000
    ext = CholeskyExtender(2)
    ext.extend(np.zeros(0), 1.0)
    z0 = rng.standard_normal(n)
    draws0 = z0 * ext.L[0, 0]
    draws1 = extend_conditional_gaussian(
        ext, np.array([0.0, 1.0]), draws0[:, None], rng.standard_normal(n)
    )
    corr = np.corrcoef(draws0, draws1)[0, 1]
    assert abs(corr) < 4.0 / np.sqrt(n)


def test_extender_rejects_badly_indefinite():
    ext = CholeskyExtender(2)
    ext.extend(np.zeros(0), 1.0)
    with pytest.raises(IllConditionedKernelError):
        ext.extend(np.array([2.0]), 1.0)  # conditional variance 1 - 4 < 0


def test_generated_paths_match_target_covariance(rng):
    # 1e5 sequentially extended paths of length 5 reproduce the target grid.
    params = small_params(gamma=0.1, horizon=0.4)
    target = linear_gaussian_dmft(params, 1.0, 1.0).c_eta
    k = target.shape[0]
    n = 100000
    ext = CholeskyExtender(k)
    draws = np.empty((n, k))
    for i in range(k):
        draws[:, i] = extend_conditional_gaussian(
            ext, target[i, : i + 1], draws[:, :i], rng.standard_normal(n)
        )
    emp = draws.T @ draws / n
    for i in range(k):
        for j in range(i + 1):
            se = np.sqrt((target[i, i] * target[j, j] + target[i, j] ** 2) / n)
            assert abs(emp[i, j] - target[i, j]) < 4 * se + 1e-12


# ---------------------------------------------------------- eta propagation


def test_propagate_eta_zero_time_expansion():
    T = 3
    c_theta = np.array(
        [[0.3, 0.1, 0.0, 0.0], [0.1, 0.5, 0.2, 0.1], [0.0, 0.2, 0.6, 0.3], [0.0, 0.1, 0.3, 0.7]]
    )
    c_star = np.array([0.05, 0.1, 0.2, 0.25])
    css = 1.2
    sigma2, delta, beta = 0.7, 2.0, 1.3
    r_theta = np.zeros((T + 1, T + 1))
    for t in range(1, T + 1):
        r_theta[t, :t] = 0.01 * (t + np.arange(t))
    c_eta, r_eta_raw, r_eta_star = propagate_eta(c_theta, c_star, css, r_theta, sigma2, delta, beta)
    expected00 = delta * beta**2 * (css - 2 * c_star[0] + c_theta[0, 0] + sigma2)
    assert c_eta[0, 0] == pytest.approx(expected00, rel=1e-14)
    # chain-rule identity between the field response and its row sums
    for t in range(T + 1):
        assert abs(r_eta_star[t] + r_eta_raw[t, :t].sum()) <= 1e-12


def test_propagate_eta_star_initialization_cancels():
    # theta^0 = theta^*: C(0,0) = C(0,*) = C(*,*) makes C_eta(0,0) = d b^2 s2.
    c_theta = np.array([[1.7]])
    c_eta, _, _ = propagate_eta(c_theta, np.array([1.7]), 1.7, np.zeros((1, 1)), 0.9, 2.0, 1.1)
    assert c_eta[0, 0] == pytest.approx(2.0 * 1.1**2 * 0.9, rel=1e-14)


def test_propagate_eta_base_response():
    # R_eta(s+1, s) = delta beta^2 gamma from the single-step chain rule.
    gamma, delta, beta = 0.05, 2.0, 1.0
    T = 2
    c_theta = np.eye(T + 1) * 0.5
    r_theta = np.zeros((T + 1, T + 1))
    for t in range(1, T + 1):
        r_theta[t, t - 1] = gamma  # base case of the theta response
    _, r_eta_raw, _ = propagate_eta(c_theta, np.zeros(T + 1), 1.0, r_theta, 1.0, delta, beta)
    for t in range(1, T + 1):
        assert r_eta_raw[t, t - 1] == pytest.approx(delta * beta**2 * gamma, rel=1e-14)


def test_propagate_eta_sigma2_shift_closed_form():
    # Doubling sigma2 moves C_eta(0,0) by exactly delta beta^2 sigma2.
    c_theta = np.array([[0.2]])
    base = propagate_eta(c_theta, np.array([0.1]), 1.0, np.zeros((1, 1)), 1.0, 2.0, 1.0)[0][0, 0]
    double = propagate_eta(c_theta, np.array([0.1]), 1.0, np.zeros((1, 1)), 2.0, 2.0, 1.0)[0][0, 0]
    assert double - base == pytest.approx(2.0 * 1.0**2 * 1.0, rel=1e-14)


# --------------------------------------------------------------- the solver


@pytest.fixture(scope="module")
def small_solution():
    params = small_params()
    prior = PriorSpec(GaussianFixed(1.0))
    return params, prior, solve_dmft(params, prior, n_paths=2000, seed=11)


def test_solver_initial_law_zero(small_solution):
    _, _, res = small_solution
    assert res.table.c_theta[0, 0] == 0.0


def test_solver_response_base_case_exact(small_solution):
    params, _, res = small_solution
    raw = res.table.r_theta_raw()
    for t in range(1, params.n_steps + 1):
        assert raw[t, t - 1] == params.gamma_step


def test_solver_eta_identity(small_solution):
    _, _, res = small_solution
    assert eta_response_identity_residual(res.table) <= 1e-12


def test_solver_deterministic(small_solution):
    params, prior, res = small_solution
    res2 = solve_dmft(params, prior, n_paths=2000, seed=11)
    assert np.array_equal(res.table.c_theta, res2.table.c_theta)
    assert np.array_equal(res.table.c_eta, res2.table.c_eta)
    assert np.array_equal(res.theta_paths, res2.theta_paths)


def test_solver_against_linear_engine(small_solution):
    params, _, res = small_solution
    lin = linear_gaussian_dmft(params, 1.0, 1.0)
    se = res.table.stderr["c_theta"]
    diff = np.abs(res.table.c_theta - lin.c_theta)
    assert np.all(diff <= 4 * se + 0.02)
    # responses close on themselves for constant curvature: bitwise equal
    assert np.array_equal(
        np.nan_to_num(res.table.r_theta), np.nan_to_num(lin.r_theta)
    )
    assert np.array_equal(np.nan_to_num(res.table.r_eta), np.nan_to_num(lin.r_eta))


def test_marginal_samples_contract(small_solution):
    params, _, res = small_solution
    star, th = dmft_marginal_samples(res, 0.0, 500)
    assert np.all(th == 0.0)
    with pytest.raises(ValueError):
        dmft_marginal_samples(res, 0.0, 10**7)
    with pytest.raises(ValueError):
        dmft_marginal_samples(res, params.gamma_step / 3, 10)
    res_no = solve_dmft(params, PriorSpec(GaussianFixed(1.0)), 200, seed=1, retain_paths=False)
    with pytest.raises(ValueError):
        dmft_marginal_samples(res_no, 0.0, 10)


def test_fixed_point_replay(small_solution):
    # Re-running the theta-side against the solver's own eta kernels with a
    # fresh seed reproduces the theta kernels within Monte Carlo error.
    params, prior, res = small_solution
    replay = solve_dmft(params, prior, n_paths=2000, seed=77, given_eta=res.table)
    se = np.sqrt(res.table.stderr["c_theta"] ** 2 + replay.table.stderr["c_theta"] ** 2)
    diff = np.abs(replay.table.c_theta - res.table.c_theta)
    assert np.all(diff <= 4 * se + 1e-9)
    assert np.array_equal(
        np.nan_to_num(replay.table.r_theta), np.nan_to_num(res.table.r_theta)
    )


def test_min_paths_enforced():
    params = small_params()
    with pytest.raises(ValueError):
        solve_dmft(params, PriorSpec(GaussianFixed(1.0)), n_paths=10, seed=0)


def test_memory_budget_refusal():
    params = small_params()
    prior = PriorSpec(GaussianMeanMixture([0.5, 0.5], [1.0, 4.0]), alpha=[-1.0, 1.0], alpha_star=[-1.0, 1.0])
    with pytest.raises(MemoryBudgetError):
        solve_dmft(params, prior, n_paths=1000, seed=0, response_budget_bytes=1024)


def test_mixture_prior_runs_per_path_responses():
    params = ModelParams(n=60, d=30, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.5)
    prior = PriorSpec(
        GaussianMeanMixture([0.5, 0.5], [1.0, 4.0]), alpha=[-1.0, 1.0], alpha_star=[-1.0, 1.0],
        theta0=Theta0Spec("prior"),
    )
    res = solve_dmft(params, prior, n_paths=500, seed=3)
    raw = res.table.r_theta_raw()
    for t in range(1, params.n_steps + 1):
        assert raw[t, t - 1] == params.gamma_step  # base case survives float32
    assert eta_response_identity_residual(res.table) <= 1e-12
    assert np.all(np.isfinite(res.table.c_theta))


def test_large_lam_pins_theta_to_zero():
    params = ModelParams(n=200, d=100, sigma2=1.0, beta=1.0, gamma_step=0.004, horizon=1.0)
    weak = linear_gaussian_dmft(params, 10.0, 1.0)
    strong = linear_gaussian_dmft(params, 100.0, 1.0)
    assert strong.c_theta[-1, -1] < weak.c_theta[-1, -1]
    assert strong.c_theta[-1, -1] < 5.0 / 100.0


def test_solver_matches_oracle_midpoint(small_solution, default_oracle, default_law):
    # R_theta(1.0, 0.5) in density units approximates alpha_mp(0.5).
    params, _, res = small_solution
    i, j = int(1.0 / 0.05), int(0.5 / 0.05)
    a, _, _ = resp_kernels(0.5, default_oracle, default_law)
    assert abs(res.table.r_theta[i, j] - a) < 0.02


def test_gamma_refinement_monotone(default_oracle, default_law):
    # Deterministic engine: oracle error strictly decreases with the step.
    times = [0.0, 0.4, 0.8]
    errs = []
    for gamma in (0.04, 0.02, 0.01):
        params = ModelParams(n=200, d=100, sigma2=1.0, beta=1.0, gamma_step=gamma, horizon=0.8)
        tab = restrict_to_times(linear_gaussian_dmft(params, 1.0, 1.0), times)
        worst = 0.0
        for i, t in enumerate(times):
            for j, s in enumerate(times):
                if s > t:
                    continue
                cts, _, ce = corr_kernels(t, s, default_oracle, default_law)
                worst = max(worst, abs(tab.c_theta[i, j] - cts), abs(tab.c_eta[i, j] - ce))
        errs.append(worst)
    assert errs[0] > errs[1] > errs[2]


def test_psd_of_mc_correlation(small_solution):
    _, _, res = small_solution
    evals = np.linalg.eigvalsh(res.table.c_theta)
    assert evals.min() > -1e-8
