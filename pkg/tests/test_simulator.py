import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmft_lab.model import ModelInstance, ModelParams, component_rng, sample_instance
from dmft_lab.priors import (
    GaussianFixed,
    GaussianMeanMixture,
    GaussianLocation,
    PriorSpec,
    Theta0Spec,
    ZeroDrift,
)
from dmft_lab.simulator import (
    DivergenceError,
    average_response_traces,
    empirical_kernels,
    evolve,
    finite_diff_response,
    resample_to_common_size,
    response_traces,
    wasserstein2_1d,
)


def manual_instance(X, y=None, theta0=None, theta_star=None, eps=None):
    n, d = X.shape
    theta_star = np.zeros(d) if theta_star is None else theta_star
    eps = np.zeros(n) if eps is None else eps
    y = X @ theta_star + eps if y is None else y
    theta0 = np.zeros(d) if theta0 is None else theta0
    return ModelInstance(X=X, theta_star=theta_star, eps=eps, y=y, theta0=theta0, seed=0)


def test_pure_brownian_path_exact():
    # beta = 0, s = 0: theta^t - theta^0 is exactly sqrt(2) * b^t.
    params = ModelParams(n=3, d=4, sigma2=1.0, beta=0.0, gamma_step=0.1, horizon=1.0)
    inst = manual_instance(np.zeros((3, 4)), theta0=np.ones(4))
    traj = evolve(inst, PriorSpec(ZeroDrift()), params, seed=9, retain_every=1)
    rng = component_rng(9, 201)
    theta = inst.theta0.copy()
    for t in range(params.n_steps):
        theta = theta + params.gamma_step * 0.0 + np.sqrt(2.0) * rng.normal(
            0.0, np.sqrt(params.gamma_step), size=4
        )
        assert np.array_equal(traj.theta_path[t + 1], theta)


def test_one_step_contraction_identity_design():
    params = ModelParams(n=2, d=2, sigma2=1.0, beta=1.0, gamma_step=0.25, horizon=0.25)
    inst = manual_instance(np.eye(2), theta0=np.ones(2))
    traj = evolve(inst, PriorSpec(GaussianFixed(1.0)), params, seed=0, noise_mode="frozen-zero", retain_every=1)
    assert np.allclose(traj.theta_path[1], [0.5, 0.5], atol=1e-15)


def test_two_step_scalar_contraction():
    params = ModelParams(n=1, d=1, sigma2=1.0, beta=1.0, gamma_step=0.1, horizon=0.2)
    inst = manual_instance(np.ones((1, 1)), theta0=np.ones(1))
    traj = evolve(inst, PriorSpec(ZeroDrift()), params, seed=0, noise_mode="frozen-zero", retain_every=1)
    assert traj.theta_path[2, 0] == pytest.approx(0.81, abs=1e-15)


def test_evolve_is_deterministic():
    params = ModelParams(n=12, d=6, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.5)
    prior = PriorSpec(GaussianFixed(1.0))
    inst = sample_instance(params, prior, seed=3)
    a = evolve(inst, prior, params, seed=21)
    b = evolve(inst, prior, params, seed=21)
    assert np.array_equal(a.theta_path[0], inst.theta0)  # row 0 is theta^0
    assert np.all(np.isfinite(a.alpha_path))
    assert np.array_equal(a.theta_path, b.theta_path)
    c = evolve(inst, prior, params, seed=22)
    assert not np.array_equal(a.theta_path, c.theta_path)


def test_divergence_guard_reports_step():
    params = ModelParams(n=4, d=4, sigma2=1.0, beta=1.0, gamma_step=10.0, horizon=100.0)
    inst = manual_instance(np.eye(4) * 5.0, theta0=np.ones(4))
    with pytest.raises(DivergenceError):
        evolve(inst, PriorSpec(GaussianFixed(1.0)), params, seed=0, noise_mode="frozen-zero")


def test_alpha_update_single_step():
    # alpha^1 = alpha^0 + gamma * mean((theta^0 - alpha^0)/scale^2).
    params = ModelParams(n=2, d=3, sigma2=1.0, beta=0.0, gamma_step=0.2, horizon=0.2)
    theta0 = np.array([1.0, 2.0, 3.0])
    inst = manual_instance(np.zeros((2, 3)), theta0=theta0)
    prior = PriorSpec(GaussianLocation(1.0), alpha=[0.5], alpha_star=[0.5])
    traj = evolve(inst, prior, params, seed=0, noise_mode="frozen-zero", retain_every=1)
    assert traj.alpha_path[1, 0] == pytest.approx(0.5 + 0.2 * (2.0 - 0.5), abs=1e-14)


def test_retain_grid_must_divide():
    params = ModelParams(n=2, d=2, sigma2=1.0, beta=1.0, gamma_step=0.1, horizon=1.0)
    inst = manual_instance(np.eye(2))
    with pytest.raises(ValueError):
        evolve(inst, PriorSpec(GaussianFixed(1.0)), params, seed=0, retain_every=3)


# ------------------------------------------------------------------ kernels


def test_initial_second_moment_lln():
    params = ModelParams(n=100, d=10000, sigma2=1.0, beta=1.0, gamma_step=0.1, horizon=0.1)
    prior = PriorSpec(GaussianFixed(1.0), theta0=Theta0Spec("gaussian", var=1.0))
    inst = sample_instance(params, prior, seed=17)
    traj = evolve(inst, prior, params, seed=17, retain_every=1)
    table = empirical_kernels([traj], inst, params)
    assert abs(table.c_theta[0, 0] - 1.0) < 3 * np.sqrt(2.0) / np.sqrt(params.d)


def test_star_initialization_residual_kernel():
    params = ModelParams(n=200, d=100, sigma2=1.0, beta=1.0, gamma_step=0.1, horizon=0.1)
    prior = PriorSpec(GaussianFixed(1.0), theta0=Theta0Spec("star"))
    inst = sample_instance(params, prior, seed=23)
    traj = evolve(inst, prior, params, seed=23, retain_every=1)
    table = empirical_kernels([traj], inst, params)
    exact = params.delta * params.beta**2 / params.n * (inst.eps @ inst.eps)
    assert table.c_eta[0, 0] == pytest.approx(exact, rel=1e-12)
    assert abs(table.c_eta[0, 0] - params.delta * params.beta**2 * params.sigma2) < 0.6


def test_kernel_table_symmetry_and_psd():
    params = ModelParams(n=40, d=20, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.5)
    prior = PriorSpec(GaussianFixed(1.0))
    instances = [sample_instance(params, prior, seed=100 + r) for r in range(4)]
    trajs = [evolve(inst, prior, params, seed=100 + r) for r, inst in enumerate(instances)]
    table = empirical_kernels(trajs, instances, params)
    assert np.array_equal(table.c_theta, table.c_theta.T)
    assert np.all(table.c_theta.diagonal() >= 0.0)
    for tr in trajs:  # per-replica Gram matrices are exactly PSD
        gram = tr.theta_path @ tr.theta_path.T / params.d
        assert np.linalg.eigvalsh(gram).min() > -1e-10
    with pytest.raises(ValueError):
        empirical_kernels(trajs, instances[:2], params)
    short = evolve(instances[0], prior, params, seed=0, retain_every=5)
    with pytest.raises(ValueError):
        empirical_kernels([trajs[0], short], instances[:2], params)


# ----------------------------------------------------------------- response


def test_response_base_cases_exact(gaussian_default_params, gaussian_default_prior):
    params, prior = gaussian_default_params, gaussian_default_prior
    inst = sample_instance(params, prior, seed=31)
    tr = response_traces(None, inst, prior, params, [50, 51])
    assert tr.r_theta[1, 0] == params.gamma_step
    exact_eta = (
        params.delta
        * params.beta**2
        * params.gamma_step
        * np.trace(inst.X @ inst.X.T)
        / params.n
    )
    assert tr.r_eta[1, 0] == pytest.approx(exact_eta, rel=1e-12)
    assert abs(tr.r_eta[1, 0] - params.delta * params.beta**2 * params.gamma_step) < 0.01


def test_probe_base_case_is_exact():
    # One step after the kick the chain is the identity, and Rademacher
    # probes satisfy z.z = d exactly, so the probe estimate is exactly gamma.
    params = ModelParams(n=20, d=10, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.5)
    prior = PriorSpec(GaussianFixed(1.0))
    inst = sample_instance(params, prior, seed=6)
    tr = response_traces(None, inst, prior, params, [3, 4], method="probe", n_probes=8, seed=1)
    assert tr.r_theta[1, 0] == params.gamma_step


def test_probe_mode_agrees_with_exact():
    params = ModelParams(n=200, d=100, sigma2=1.0, beta=1.0, gamma_step=0.02, horizon=1.0)
    prior = PriorSpec(GaussianFixed(1.0))
    inst = sample_instance(params, prior, seed=41)
    steps = [0, 20, 40]
    exact = response_traces(None, inst, prior, params, steps)
    probe = response_traces(None, inst, prior, params, steps, method="probe", n_probes=64, seed=5)
    for a in range(3):
        for b in range(a):
            d_t = abs(probe.r_theta[a, b] - exact.r_theta[a, b])
            assert d_t <= 4 * probe.r_theta_stderr[a, b] + 1e-12
            d_e = abs(probe.r_eta[a, b] - exact.r_eta[a, b])
            assert d_e <= 4 * probe.r_eta_stderr[a, b] + 1e-12


def test_general_product_path_matches_constant_shortcut():
    # A single-component mean mixture is the fixed Gaussian in disguise, but
    # takes the trajectory-dependent product route.
    params = ModelParams(n=60, d=30, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.5)
    fixed = PriorSpec(GaussianFixed(2.0))
    mix = PriorSpec(GaussianMeanMixture([1.0], [2.0]), alpha=[0.0], alpha_star=[0.0])
    inst = sample_instance(params, fixed, seed=51)
    traj = evolve(inst, mix, params, seed=51, retain_every=1)
    steps = [0, 5, 10]
    got = response_traces(traj, inst, mix, params, steps)
    want = response_traces(None, inst, fixed, params, steps)
    for a in range(3):
        for b in range(a):
            assert got.r_theta[a, b] == pytest.approx(want.r_theta[a, b], abs=1e-10)
            assert got.r_eta[a, b] == pytest.approx(want.r_eta[a, b], abs=1e-9)


def test_general_path_requires_full_trajectory():
    params = ModelParams(n=60, d=30, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.5)
    mix = PriorSpec(GaussianMeanMixture([0.5, 0.5], [1.0, 2.0]), alpha=[0.0, 1.0], alpha_star=[0.0, 1.0])
    inst = sample_instance(params, mix, seed=3)
    coarse = evolve(inst, mix, params, seed=3, retain_every=5)
    with pytest.raises(ValueError):
        response_traces(coarse, inst, mix, params, [0, 5])
    with pytest.raises(ValueError):
        response_traces(None, inst, mix, params, [0, 200])  # outside horizon


def test_response_replica_average():
    params = ModelParams(n=40, d=20, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.25)
    prior = PriorSpec(GaussianFixed(1.0))
    traces = []
    for seed in (1, 2):
        inst = sample_instance(params, prior, seed=seed)
        traces.append(response_traces(None, inst, prior, params, [0, 5]))
    avg = average_response_traces(traces)
    assert avg.r_theta[1, 0] == pytest.approx(
        0.5 * (traces[0].r_theta[1, 0] + traces[1].r_theta[1, 0]), rel=1e-15
    )


# ---------------------------------------------------------- finite difference


def test_finite_diff_flat_drift_is_gamma():
    params = ModelParams(n=3, d=4, sigma2=1.0, beta=0.0, gamma_step=0.1, horizon=0.5)
    inst = manual_instance(np.zeros((3, 4)))
    series = finite_diff_response(inst, PriorSpec(ZeroDrift()), params, s=1, j=2, eps=1e-3, seed=8)
    assert np.allclose(series, params.gamma_step, atol=1e-12)


def test_finite_diff_geometric_decay():
    params = ModelParams(n=3, d=4, sigma2=1.0, beta=0.0, gamma_step=0.1, horizon=1.0)
    lam = 1.7
    inst = manual_instance(np.zeros((3, 4)))
    series = finite_diff_response(
        inst, PriorSpec(GaussianFixed(lam)), params, s=2, j=1, eps=1e-4, seed=8,
        noise_mode="frozen-zero",
    )
    t_rel = np.arange(1, series.size + 1)
    expected = params.gamma_step * (1 - params.gamma_step * lam) ** (t_rel - 1)
    assert np.max(np.abs(series / expected - 1.0)) < 1e-8


def test_finite_diff_richardson_bias():
    # Halving eps moves the estimate by O(eps) for a curved score.
    params = ModelParams(n=10, d=5, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.5)
    mix = PriorSpec(GaussianMeanMixture([0.5, 0.5], [1.0, 3.0]), alpha=[-1.0, 1.0], alpha_star=[-1.0, 1.0])
    inst = sample_instance(params, mix, seed=13)
    a = finite_diff_response(inst, mix, params, s=0, j=0, eps=2e-2, seed=4, noise_mode="frozen-zero")
    b = finite_diff_response(inst, mix, params, s=0, j=0, eps=1e-2, seed=4, noise_mode="frozen-zero")
    assert np.max(np.abs(a - b)) < 5.0 * 2e-2
    assert np.max(np.abs(a - b)) > 0.0


def test_finite_diff_default_eps_scale():
    params = ModelParams(n=10, d=5, sigma2=1.0, beta=1.0, gamma_step=0.05, horizon=0.25)
    prior = PriorSpec(GaussianFixed(1.0))
    inst = sample_instance(params, prior, seed=2)
    series = finite_diff_response(inst, prior, params, s=1, j=0, seed=2)
    assert np.all(np.isfinite(series))
    with pytest.raises(ValueError):
        finite_diff_response(inst, prior, params, s=100, j=0, seed=2)


# -------------------------------------------------------------- wasserstein


def test_w2_examples():
    assert wasserstein2_1d([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert wasserstein2_1d([0.0], [1.0]) == 1.0
    assert wasserstein2_1d([0.0, 2.0], [1.0, 1.0]) == 1.0


def test_w2_errors():
    with pytest.raises(ValueError):
        wasserstein2_1d([], [1.0])
    with pytest.raises(ValueError):
        wasserstein2_1d([1.0, 2.0], [1.0])


@settings(max_examples=40, deadline=None)
@given(
    xs=st.lists(st.floats(-10, 10), min_size=1, max_size=20),
    ys=st.lists(st.floats(-10, 10), min_size=1, max_size=20),
    shift=st.floats(-5, 5),
)
def test_w2_metric_properties(xs, ys, shift):
    a, b = resample_to_common_size(xs, ys)
    d1 = wasserstein2_1d(a, b)
    d2 = wasserstein2_1d(b, a)
    assert d1 == pytest.approx(d2, abs=1e-12)
    assert d1 >= 0.0
    shifted = wasserstein2_1d(a + shift, b + shift)
    assert shifted == pytest.approx(d1, abs=1e-9)
    assert wasserstein2_1d(a, a) == 0.0


def test_resample_preserves_equal_sizes():
    a, b = resample_to_common_size([1.0, 2.0], [3.0, 4.0, 5.0])
    assert a.size == b.size == 3
    a2, b2 = resample_to_common_size(np.arange(10.0), np.arange(10.0) + 1.0, size=5)
    assert a2.size == 5
