"""Full EM loop: reductions against independent reference loops, posterior
consistency, determinism, and basic recovery."""

import numpy as np
import pytest

from sppsbl.datagen import GeneratorSpec, HeteroscedasticParams, derive_seed, generate
from sppsbl.model import CouplingScheme, HyperPriors, SensingProblem, prior_precisions
from sppsbl.solver import SolverConfig, run_em
from sppsbl.metrics import nmse

HYPER = HyperPriors()


def _random_problem(rng, m, n, snr_db=40.0):
    """Small sparse instance with a contiguous active block."""
    x = np.zeros(n)
    start = int(rng.integers(0, n - 3))
    x[start:start + 3] = rng.standard_normal(3) + 0.5
    phi = rng.standard_normal((m, n))
    phi /= np.linalg.norm(phi, axis=0)
    clean = phi @ x
    noise = rng.standard_normal(m)
    noise *= np.linalg.norm(clean) * 10 ** (-snr_db / 20) / np.linalg.norm(noise)
    return SensingProblem(phi=phi, y=clean + noise, x_true=x)


def _reference_sbl_trajectory(prob, iters, hyper=HYPER, cap=1e10, gamma0=1.0):
    """Textbook SBL loop written independently (LU-based inverse), exact
    second moments, beta identically zero."""
    n, m = prob.n, prob.m
    alpha = np.ones(n)
    gamma = gamma0
    mus = []
    pmat = gamma * prob.phi.T @ prob.phi + np.diag(alpha)
    sigma = np.linalg.inv(pmat)
    mu = gamma * sigma @ prob.phi.T @ prob.y
    for _ in range(iters):
        m2 = mu ** 2 + np.diag(sigma)
        alpha = np.minimum((hyper.a + 0.5) / (hyper.b + 0.5 * m2), cap)
        pmat = gamma * prob.phi.T @ prob.phi + np.diag(alpha)
        sigma = np.linalg.inv(pmat)
        sigma = 0.5 * (sigma + sigma.T)
        mu = gamma * sigma @ prob.phi.T @ prob.y
        resid = prob.y - prob.phi @ mu
        trace = float(np.trace(sigma @ prob.phi.T @ prob.phi))
        gamma = (m + 2 * hyper.g) / (float(resid @ resid) + trace + 2 * hyper.h)
        mus.append(mu.copy())
    return mus


def _reference_pc_trajectory(prob, iters, shared_beta=1.0, hyper=HYPER,
                             cap=1e10, gamma0=1.0):
    """PC-SBL reference loop: the same updates with one shared coupling
    weight folded into the coupled moments and precisions."""
    n, m = prob.n, prob.m
    alpha = np.ones(n)
    gamma = gamma0
    beta = np.full(n - 1, shared_beta)
    mus = []

    def couple(v):
        out = v.copy()
        out[:-1] += beta * v[1:]
        out[1:] += beta * v[:-1]
        return out

    sigma = np.linalg.inv(gamma * prob.phi.T @ prob.phi + np.diag(couple(alpha)))
    mu = gamma * sigma @ prob.phi.T @ prob.y
    for _ in range(iters):
        eta = couple(mu ** 2 + np.diag(sigma))
        alpha = np.minimum((hyper.a + 0.5) / (hyper.b + 0.5 * eta), cap)
        sigma = np.linalg.inv(gamma * prob.phi.T @ prob.phi + np.diag(couple(alpha)))
        sigma = 0.5 * (sigma + sigma.T)
        mu = gamma * sigma @ prob.phi.T @ prob.y
        resid = prob.y - prob.phi @ mu
        trace = float(np.trace(sigma @ prob.phi.T @ prob.phi))
        gamma = (m + 2 * hyper.g) / (float(resid @ resid) + trace + 2 * hyper.h)
        mus.append(mu.copy())
    return mus


def _em_trajectory(prob, iters, scheme):
    """Per-iteration posterior means of run_em via deterministic re-runs."""
    out = []
    for k in range(1, iters + 1):
        cfg = SolverConfig(scheme=scheme, refinement=False, max_iterations=k,
                           rel_tol=1e-300)
        out.append(run_em(prob, cfg).x_hat)
    return out


class TestReductions:
    def test_none_matches_textbook_sbl(self):
        """Zero coupling reproduces an independent classical-SBL loop to
        1e-10 per iteration, 20 random instances."""
        rng = np.random.default_rng(100)
        for _ in range(20):
            prob = _random_problem(rng, 10, 16)
            iters = 12
            ours = _em_trajectory(prob, iters, CouplingScheme.none())
            ref = _reference_sbl_trajectory(prob, iters)
            for mu_ours, mu_ref in zip(ours, ref):
                scale = max(1.0, float(np.max(np.abs(mu_ref))))
                assert np.max(np.abs(mu_ours - mu_ref)) <= 1e-10 * scale

    def test_pc_fixed_matches_reference_loop(self):
        rng = np.random.default_rng(101)
        for _ in range(20):
            prob = _random_problem(rng, 10, 16)
            iters = 12
            ours = _em_trajectory(prob, iters, CouplingScheme.pc_fixed(1.0))
            ref = _reference_pc_trajectory(prob, iters, shared_beta=1.0)
            for mu_ours, mu_ref in zip(ours, ref):
                scale = max(1.0, float(np.max(np.abs(mu_ref))))
                assert np.max(np.abs(mu_ours - mu_ref)) <= 1e-10 * scale


class TestRunEm:
    def test_noiseless_identity_recovery(self):
        """Fully determined noiseless system recovers exactly."""
        rng = np.random.default_rng(102)
        n = 32
        x = np.zeros(n)
        x[10:16] = rng.standard_normal(6)
        prob = SensingProblem(phi=np.eye(n), y=x.copy(), x_true=x)
        result = run_em(prob, SolverConfig(max_iterations=100))
        assert result.iterations <= 100
        assert nmse(result.x_hat, x) < 1e-6

    def test_bitwise_determinism(self):
        spec = GeneratorSpec("heteroscedastic", 64, 32, 15.0, derive_seed(5, 1),
                             HeteroscedasticParams(k=12, n_blocks=2))
        prob = generate(spec).problem
        a = run_em(prob, SolverConfig())
        b = run_em(prob, SolverConfig())
        assert np.array_equal(a.x_hat, b.x_hat)
        assert a.iterations == b.iterations
        assert a.state.gamma == b.state.gamma

    def test_x_hat_equals_state_mu(self):
        rng = np.random.default_rng(103)
        prob = _random_problem(rng, 12, 20)
        result = run_em(prob, SolverConfig(max_iterations=20))
        assert np.array_equal(result.x_hat, result.state.mu)

    def test_posterior_consistency_every_iteration(self):
        """State moments satisfy the posterior relations at each iteration:
        sigma at iteration k is the posterior under gamma from iteration
        k-1 and the iteration-k precisions."""
        rng = np.random.default_rng(104)
        prob = _random_problem(rng, 10, 16)
        gamma_prev = 1.0  # init_gamma default
        for k in range(1, 7):
            cfg = SolverConfig(max_iterations=k, rel_tol=1e-300)
            state = run_em(prob, cfg).state
            lam = prior_precisions(state.alpha, state.beta)
            pmat = gamma_prev * prob.phi.T @ prob.phi + np.diag(lam)
            resid = np.linalg.norm(pmat @ state.sigma - np.eye(prob.n))
            assert resid / (np.linalg.norm(pmat) * np.linalg.norm(state.sigma)) < 1e-8
            mu_ref = gamma_prev * (state.sigma @ (prob.phi.T @ prob.y))
            assert np.linalg.norm(state.mu - mu_ref) <= 1e-8 * np.linalg.norm(mu_ref)
            assert np.all(np.diag(state.sigma) > 0)
            gamma_prev = state.gamma

    def test_converged_flag_and_history(self):
        rng = np.random.default_rng(105)
        prob = _random_problem(rng, 12, 20)
        loose = run_em(prob, SolverConfig(rel_tol=0.5, refinement=False,
                                          track_history=True))
        assert loose.converged and loose.iterations < 10
        assert len(loose.history) == loose.iterations
        delta, gamma = loose.history[-1]
        assert delta < 0.5 and gamma > 0
        capped = run_em(prob, SolverConfig(max_iterations=3, rel_tol=1e-300))
        assert not capped.converged and capped.iterations == 3

    def test_degenerate_n2(self):
        rng = np.random.default_rng(106)
        phi = rng.standard_normal((4, 2))
        x = np.array([1.5, 0.0])
        prob = SensingProblem(phi=phi, y=phi @ x, x_true=x)
        result = run_em(prob, SolverConfig(max_iterations=60))
        assert len(result.state.beta) == 1
        assert nmse(result.x_hat, x) < 1e-3

    def test_scheme_beta_conventions(self):
        """none keeps beta = 0; pc_fixed keeps the shared value."""
        rng = np.random.default_rng(107)
        prob = _random_problem(rng, 10, 14)
        r_none = run_em(prob, SolverConfig(scheme=CouplingScheme.none(),
                                           max_iterations=5))
        assert np.all(np.asarray(r_none.state.beta) == 0.0)
        r_pc = run_em(prob, SolverConfig(scheme=CouplingScheme.pc_fixed(0.7),
                                         max_iterations=5))
        assert np.all(np.asarray(r_pc.state.beta) == 0.7)

    def test_theorem_bound_along_run(self):
        """Every learned weight stays strictly inside (0, c/d) after a run."""
        rng = np.random.default_rng(108)
        for c, d in ((10.0, 1.0), (2.0, 1.0)):
            cfg = SolverConfig(hyperpriors=HyperPriors(c=c, d=d), max_iterations=40)
            prob = _random_problem(rng, 14, 24)
            state = run_em(prob, cfg).state
            beta = np.asarray(state.beta)
            assert np.all((beta > 0) & (beta < c / d))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(max_iterations=0)
        with pytest.raises(ValueError):
            SolverConfig(rel_tol=0.0)
        with pytest.raises(ValueError):
            SolverConfig(root_method="newton")
        with pytest.raises(ValueError):
            SolverConfig(init_gamma=-1.0)

    def test_refinement_improves_noisy_benchmark_instance(self):
        """On a Table-I style instance the refined run beats plain EM."""
        spec = GeneratorSpec("heteroscedastic", 162, 81, 15.0,
                             derive_seed(20250810, 0, 1),
                             HeteroscedasticParams(k=40, n_blocks=4))
        prob = generate(spec).problem
        refined = run_em(prob, SolverConfig())
        plain = run_em(prob, SolverConfig(refinement=False))
        assert nmse(refined.x_hat, prob.x_true) < nmse(plain.x_hat, prob.x_true)

    def test_cardano_route_runs_end_to_end(self):
        rng = np.random.default_rng(109)
        prob = _random_problem(rng, 12, 20)
        r1 = run_em(prob, SolverConfig(root_method="cardano", max_iterations=30))
        r2 = run_em(prob, SolverConfig(root_method="bracketed", max_iterations=30))
        assert np.allclose(r1.x_hat, r2.x_hat, atol=1e-6)
