import math

import numpy as np
import pytest

from histfun.bspline import SplineFunction, make_basis
from histfun.design import DesignSystem, FunctionalDataset, build_design
from histfun.estimator import (
    NGBConfig,
    NestedGroups,
    bic_score,
    default_grids,
    effective_df,
    extract_cutoff,
    fit_ngb,
    fit_smoothing_spline,
    lambda_to_tau,
    make_groups,
    objective_value,
    penalty_value,
    surrogate_value,
    tau_to_lambda,
    theta_step,
    tune_fit,
    tune_smoothing_spline,
    weight_step,
)
from histfun.lasso import solve_weighted_lasso_gram
from histfun.simlab import simulate_dataset, spline_span_fixture


def toy_design(U, V=None, M=None, d=0):
    U = np.atleast_2d(np.asarray(U, dtype=float))
    q = U.shape[1]
    V = np.eye(q) if V is None else np.asarray(V, dtype=float)
    M = q - d if M is None else M
    basis = make_basis(1.0, M, d)
    return DesignSystem(U=U, V=V, W=V, basis=basis, m=0)


@pytest.fixture(scope="module")
def small_problem():
    data = simulate_dataset("II", 80, 3)
    basis = make_basis(1.0, 12, 3)
    return build_design(data, basis), data.responses


def groups_for(basis, gamma=0.5, mode="plain", b=None):
    return make_groups(basis.M, basis.n_basis, gamma, mode, b)


class TestSmoothingSpline:
    def test_scalar(self):
        ds = toy_design([[1.0]])
        b = fit_smoothing_spline(ds, np.array([2.0]), 1.0)
        np.testing.assert_allclose(b, [1.0])

    def test_unpenalised_square_is_least_squares(self):
        rng = np.random.default_rng(0)
        U = rng.normal(size=(4, 4))
        Y = rng.normal(size=4)
        np.testing.assert_allclose(fit_smoothing_spline(toy_design(U), Y, 0.0),
                                   np.linalg.solve(U, Y), atol=1e-10)

    def test_matches_dense_normal_equations(self):
        rng = np.random.default_rng(1)
        U = rng.normal(size=(50, 13))
        A = rng.normal(size=(13, 13))
        V = A @ A.T
        Y = rng.normal(size=50)
        kappa = 0.03
        oracle = np.linalg.lstsq(U.T @ U + 50 * kappa * V, U.T @ Y, rcond=None)[0]
        np.testing.assert_allclose(fit_smoothing_spline(toy_design(U, V), Y, kappa), oracle,
                                   atol=1e-9)

    def test_singular_system_gets_ridge(self):
        U = np.array([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]])
        b = fit_smoothing_spline(toy_design(U, np.zeros((2, 2))), np.array([1.0, 2.0, 0.5]), 0.0)
        assert np.all(np.isfinite(b))


class TestLambdaTau:
    def test_examples(self):
        assert lambda_to_tau(1.0, 0.5) == pytest.approx(0.25, abs=1e-15)
        assert lambda_to_tau(2.0, 0.5) == pytest.approx(1.0, abs=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for lam, gamma in zip(10 ** rng.uniform(-6, 3, 100), rng.uniform(0.05, 0.95, 100)):
            tau = lambda_to_tau(lam, gamma)
            assert tau_to_lambda(tau, gamma) == pytest.approx(lam, rel=1e-12)
            assert lambda_to_tau(tau_to_lambda(tau, gamma), gamma) == pytest.approx(tau, rel=1e-12)

    @pytest.mark.parametrize("lam,gamma", [(0.0, 0.5), (-1.0, 0.5), (1.0, 0.0), (1.0, 1.0)])
    def test_invalid(self, lam, gamma):
        with pytest.raises(ValueError):
            lambda_to_tau(lam, gamma)


class TestGroups:
    def test_sizes_nested(self):
        g = make_groups(5, 8, 0.5)
        np.testing.assert_array_equal(g.sizes(), [8, 7, 6, 5, 4])
        for j in range(1, 5):
            assert set(g.members(j + 1)) < set(g.members(j))
        np.testing.assert_allclose(g.weights, np.sqrt([8, 7, 6, 5, 4]))

    def test_adaptive_weights(self):
        b = np.array([3.0, 0.0, 4.0])
        g = make_groups(2, 3, 0.5, "adaptive", b)
        np.testing.assert_allclose(g.weights, [math.sqrt(3) / math.sqrt(5), math.sqrt(2) / 2])

    def test_adaptive_needs_initial(self):
        with pytest.raises(ValueError):
            make_groups(2, 3, 0.5, "adaptive")


class TestThetaStep:
    def test_example(self):
        groups = NestedGroups(M=1, n_coef=2, weights=np.array([2.0]))
        theta = theta_step(np.array([0.5, -0.5]), groups, 0.5, 0.25)
        np.testing.assert_allclose(theta, [4.0])

    def test_zero_group(self):
        groups = make_groups(3, 5, 0.5)
        theta = theta_step(np.array([1.0, 2.0, 0.0, 0.0, 0.0]), groups, 0.5, 1.0)
        assert theta[2] == 0.0 and np.all(theta[:2] > 0)

    def test_homogeneous(self):
        rng = np.random.default_rng(3)
        groups = make_groups(6, 9, 0.5)
        b = rng.normal(size=9)
        np.testing.assert_allclose(theta_step(4 * b, groups, 0.5, 0.3),
                                   2 * theta_step(b, groups, 0.5, 0.3), rtol=1e-14)


class TestWeightStep:
    def test_example(self):
        groups = NestedGroups(M=2, n_coef=2, weights=np.array([math.sqrt(2), 1.0]))
        g, G = weight_step(np.array([4.0, 1.0]), groups, 0.5, n=10)
        np.testing.assert_allclose(g, [0.5, 1.5])
        np.testing.assert_allclose(G, [1 / 5, 1 / 15])

    def test_zero_first_theta_freezes_everything(self):
        groups = make_groups(3, 5, 0.5)
        g, G = weight_step(np.array([0.0, 1.0, 1.0]), groups, 0.5, 7)
        assert np.all(np.isinf(g))
        np.testing.assert_array_equal(G, 0.0)

    def test_zero_later_theta_freezes_tail(self):
        groups = make_groups(3, 5, 0.5)
        g, _ = weight_step(np.array([1.0, 0.0, 1.0]), groups, 0.5, 7)
        assert np.isfinite(g[0]) and np.all(np.isinf(g[1:]))

    def test_non_decreasing(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            groups = NestedGroups(M=8, n_coef=11, weights=rng.uniform(0.1, 3, 8))
            g, _ = weight_step(rng.uniform(0, 2, 8), groups, rng.uniform(0.1, 0.9), 30)
            finite = g[np.isfinite(g)]
            assert np.all(np.diff(finite) >= 0)


class TestPenalty:
    def test_zero(self):
        assert penalty_value(np.zeros(5), make_groups(3, 5, 0.5), 0.5) == 0.0

    def test_single_group(self):
        groups = NestedGroups(M=1, n_coef=1, weights=np.array([1.0]))
        assert penalty_value(np.array([4.0]), groups, 0.5) == pytest.approx(2.0)

    def test_gamma_homogeneity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            gamma = rng.uniform(0.1, 0.9)
            groups = NestedGroups(M=7, n_coef=10, weights=rng.uniform(0.1, 3, 7))
            b = rng.normal(size=10) * (rng.uniform(size=10) > 0.3)
            c = rng.normal() * 10
            lhs = penalty_value(c * b, groups, gamma)
            rhs = abs(c) ** gamma * penalty_value(b, groups, gamma)
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))

    def test_matches_definition(self):
        rng = np.random.default_rng(6)
        groups = NestedGroups(M=4, n_coef=6, weights=rng.uniform(0.5, 2, 4))
        b = rng.normal(size=6)
        oracle = sum(groups.weights[j] * np.abs(b[j:]).sum() ** 0.3 for j in range(4))
        assert penalty_value(b, groups, 0.3) == pytest.approx(oracle, rel=1e-14)


class TestObjective:
    def test_zero_coefficients(self, small_problem):
        ds, Y = small_problem
        cfg = NGBConfig(kappa=0.1, lam=2.0)
        groups = groups_for(ds.basis)
        assert objective_value(np.zeros(ds.basis.n_basis), ds, Y, cfg, groups) == \
            pytest.approx(Y @ Y / Y.size, rel=1e-14)

    def test_least_squares_minimum(self, small_problem):
        ds, Y = small_problem
        cfg = NGBConfig()
        groups = groups_for(ds.basis)
        ols = np.linalg.lstsq(ds.U, Y, rcond=None)[0]
        f = objective_value(ols, ds, Y, cfg, groups)
        rss = np.sum((Y - ds.U @ ols) ** 2)
        assert f == pytest.approx(rss / Y.size, rel=1e-12)
        rng = np.random.default_rng(7)
        for _ in range(10):
            assert objective_value(ols + 0.01 * rng.normal(size=ols.size), ds, Y, cfg, groups) >= f

    def test_term_by_term(self, small_problem):
        ds, Y = small_problem
        rng = np.random.default_rng(8)
        b = rng.normal(size=ds.basis.n_basis)
        cfg = NGBConfig(kappa=1e-3, lam=0.7, gamma=0.4)
        groups = make_groups(ds.basis.M, ds.basis.n_basis, 0.4, "adaptive", rng.normal(size=b.size))
        n = Y.size
        loss = sum((Y[i] - ds.U[i] @ b) ** 2 for i in range(n)) / n
        rough = sum(b[i] * ds.V[i, j] * b[j] for i in range(b.size) for j in range(b.size))
        bridge = sum(groups.weights[j] * sum(abs(x) for x in b[j:]) ** 0.4
                     for j in range(ds.basis.M))
        oracle = loss + 1e-3 * rough + 0.7 * bridge
        assert objective_value(b, ds, Y, cfg, groups) == pytest.approx(oracle, abs=1e-10)

    def test_dimension_mismatch(self, small_problem):
        ds, Y = small_problem
        with pytest.raises(ValueError):
            objective_value(np.zeros(3), ds, Y, NGBConfig(), groups_for(ds.basis))

    def test_surrogate_minimum_over_theta_is_criterion(self, small_problem):
        ds, Y = small_problem
        rng = np.random.default_rng(9)
        b = rng.normal(size=ds.basis.n_basis)
        cfg = NGBConfig(kappa=1e-4, lam=0.3)
        groups = groups_for(ds.basis)
        tau = lambda_to_tau(cfg.lam, cfg.gamma)
        theta = theta_step(b, groups, cfg.gamma, tau)
        at_min = surrogate_value(b, theta, ds, Y, cfg, groups, tau)
        assert at_min == pytest.approx(objective_value(b, ds, Y, cfg, groups), rel=1e-12)
        for _ in range(20):
            other = theta * np.exp(0.3 * rng.normal(size=theta.size))
            assert surrogate_value(b, other, ds, Y, cfg, groups, tau) >= at_min - 1e-12


class TestExtractCutoff:
    def test_example(self):
        basis = make_basis(1.0, 4, 1)
        J0, delta = extract_cutoff(np.array([1.0, 1.0, 0, 0, 0]), basis)
        assert (J0, delta) == (3, 0.5)

    def test_all_nonzero(self):
        basis = make_basis(2.0, 4, 1)
        assert extract_cutoff(np.ones(5), basis) == (5, 2.0)

    def test_all_zero(self):
        assert extract_cutoff(np.zeros(5), make_basis(1.0, 4, 1)) == (1, 0.0)

    def test_random_patterns_match_definition(self):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            M, d = int(rng.integers(1, 15)), int(rng.integers(0, 4))
            basis = make_basis(1.0, M, d)
            q = M + d
            b = rng.normal(size=q) * (rng.uniform(size=q) < rng.uniform())
            # smallest 1-based l with an all-zero tail; the empty tail l = q+1 always qualifies
            tail = next(l for l in range(1, q + 2) if np.all(b[l - 1:] == 0))
            J0, delta = extract_cutoff(b, basis)
            assert J0 == min(M + 1, tail)
            assert delta == basis.knots[J0 - 1]
            if J0 <= M:
                # J0 = M+1 is a cap, so only a smaller J0 certifies a zero tail
                assert np.all(b[J0 - 1:] == 0)


class TestDegreesOfFreedom:
    def test_projection_trace(self):
        rng = np.random.default_rng(11)
        ds = toy_design(rng.normal(size=(20, 6)))
        assert effective_df(ds, np.ones(6), 0.0) == pytest.approx(6.0, abs=1e-10)

    def test_empty(self):
        ds = toy_design(np.ones((5, 3)))
        assert effective_df(ds, np.zeros(3), 1.0) == 0.0

    def test_eigen_sum_oracle(self):
        rng = np.random.default_rng(12)
        U = rng.normal(size=(30, 8))
        A = rng.normal(size=(8, 8))
        ds = toy_design(U, A @ A.T)
        b = rng.normal(size=8)
        b[[2, 5]] = 0
        s = np.flatnonzero(b)
        Us, Vs = U[:, s], (A @ A.T)[np.ix_(s, s)]
        H = Us @ np.linalg.inv(Us.T @ Us + 30 * 0.05 * Vs) @ Us.T
        assert effective_df(ds, b, 0.05) == pytest.approx(np.linalg.eigvals(H).real.sum(), abs=1e-8)


class TestBIC:
    def test_example(self):
        ds = toy_design(np.zeros((4, 1)) + [[1.0]])
        Y = np.array([1.0, -1.0, 1.0, -1.0])
        assert bic_score(Y, ds, np.zeros(1), 2.0) == pytest.approx(2 * math.log(4), abs=1e-12)
        assert bic_score(Y, ds, np.zeros(1), 2.0) == pytest.approx(2.7726, abs=1e-4)

    def test_increasing_in_rss(self):
        ds = toy_design(np.ones((5, 1)))
        prev = -np.inf
        for scale in [0.1, 0.5, 1.0, 3.0]:
            Y = scale * np.array([1.0, -1.0, 2.0, -2.0, 0.0])
            cur = bic_score(Y, ds, np.zeros(1), 1.0)
            assert cur > prev
            prev = cur

    def test_recomputed(self, small_problem):
        ds, Y = small_problem
        fit = fit_ngb(ds, Y, NGBConfig(kappa=1e-6, lam=1e-4))
        rss = np.sum((Y - ds.U @ fit.b_hat) ** 2)
        n = Y.size
        assert fit.bic == pytest.approx(n * math.log(rss / n) + math.log(n) * fit.df, rel=1e-12)
        assert fit.rss == pytest.approx(rss, rel=1e-12)

    def test_perfect_fit_sentinel(self, caplog):
        ds = toy_design(np.eye(2))
        assert bic_score(np.array([1.0, 2.0]), ds, np.array([1.0, 2.0]), 2.0) == -math.inf
        assert "zero residual" in caplog.text


class TestFit:
    def test_lambda_zero_is_smoothing_spline(self, small_problem):
        ds, Y = small_problem
        fit = fit_ngb(ds, Y, NGBConfig(kappa=1e-5, lam=0.0))
        np.testing.assert_allclose(fit.b_hat, fit_smoothing_spline(ds, Y, 1e-5), atol=1e-8)
        assert fit.J0 == ds.basis.M + 1 and fit.delta_hat == ds.basis.T

    def test_huge_lambda_gives_zero(self, small_problem):
        ds, Y = small_problem
        lam = 1e3 * np.linalg.norm(ds.U.T @ Y)
        for mode in ("plain", "adaptive"):
            fit = fit_ngb(ds, Y, NGBConfig(kappa=1e-5, lam=lam, weight_mode=mode))
            np.testing.assert_array_equal(fit.b_hat, 0.0)
            assert fit.J0 == 1 and fit.delta_hat == 0.0

    def test_exact_tail_sparsity(self, small_problem):
        ds, Y = small_problem
        for lam in np.geomspace(1e-6, 1e-2, 9):
            fit = fit_ngb(ds, Y, NGBConfig(kappa=1e-6, lam=lam))
            if fit.J0 <= ds.basis.M:
                assert np.all(fit.b_hat[fit.J0 - 1:] == 0)

    def test_surrogate_non_increasing_on_random_fits(self):
        rng = np.random.default_rng(13)
        for i in range(50):
            n = int(rng.integers(30, 120))
            data = simulate_dataset(["I", "II", "III"][i % 3], n, 1000 + i)
            basis = make_basis(1.0, int(rng.integers(5, 30)), 3)
            ds = build_design(data, basis)
            Y = data.responses
            cfg = NGBConfig(gamma=rng.uniform(0.2, 0.8), kappa=10 ** rng.uniform(-9, -5),
                            lam=np.mean(Y**2) * 10 ** rng.uniform(-5, -1),
                            weight_mode=["plain", "adaptive"][i % 2])
            fit = fit_ngb(ds, Y, cfg)
            trace = np.asarray(fit.objective_trace)
            assert trace.size == fit.outer_iters
            assert np.all(np.diff(trace) <= 1e-10)

    def test_half_steps_non_increasing(self, small_problem):
        # replay the alternation: the theta update and the lasso each lower the surrogate
        ds, Y = small_problem
        cfg = NGBConfig(kappa=1e-6, lam=3e-5, weight_mode="plain")
        n = Y.size
        groups = groups_for(ds.basis, cfg.gamma)
        tau = lambda_to_tau(cfg.lam, cfg.gamma)
        Q = ds.U.T @ ds.U + n * cfg.kappa * ds.V
        b = fit_smoothing_spline(ds, Y, cfg.kappa)
        theta = theta_step(b, groups, cfg.gamma, tau)
        prev = surrogate_value(b, theta, ds, Y, cfg, groups, tau)
        for _ in range(15):
            theta = theta_step(b, groups, cfg.gamma, tau)
            after_theta = surrogate_value(b, theta, ds, Y, cfg, groups, tau)
            g, _ = weight_step(theta, groups, cfg.gamma, n)
            b = solve_weighted_lasso_gram(Q, ds.U.T @ Y, n * g, b0=b)
            after_b = surrogate_value(b, theta, ds, Y, cfg, groups, tau)
            assert after_theta <= prev + 1e-10
            assert after_b <= after_theta + 1e-10
            prev = after_b

    def test_weights_non_decreasing_in_k(self, small_problem):
        ds, Y = small_problem
        groups = groups_for(ds.basis, 0.5, "adaptive", fit_smoothing_spline(ds, Y, 1e-6))
        rng = np.random.default_rng(14)
        for _ in range(20):
            b = rng.normal(size=ds.basis.n_basis) * (rng.uniform(size=ds.basis.n_basis) < 0.7)
            theta = theta_step(b, groups, 0.5, 0.01)
            g, _ = weight_step(theta, groups, 0.5, Y.size)
            w = Y.size * g
            assert np.all(np.diff(w[np.isfinite(w)]) >= 0)

    def test_rescaled_lasso_equivalence(self, small_problem):
        # weights n g_k on b match unit weights on b~ = G^{-1} b with design [U; sqrt(n kappa) W] G
        ds, Y = small_problem
        n, kappa = Y.size, 1e-5
        groups = groups_for(ds.basis)
        b0 = fit_smoothing_spline(ds, Y, kappa)
        theta = theta_step(b0, groups, 0.5, lambda_to_tau(1e-4, 0.5))
        g, G = weight_step(theta, groups, 0.5, n)
        assert np.all(np.isfinite(g))
        Ustar = np.vstack([ds.U, math.sqrt(n * kappa) * ds.W])
        Ytil = np.concatenate([Y, np.zeros(ds.W.shape[0])])
        direct = solve_weighted_lasso_gram(Ustar.T @ Ustar, Ustar.T @ Ytil, n * g, tolerance=1e-12)
        D = Ustar * G
        tilde = solve_weighted_lasso_gram(D.T @ D, D.T @ Ytil, np.ones_like(g), tolerance=1e-12)
        np.testing.assert_allclose(G * tilde, direct, atol=1e-8)

    def test_deterministic(self, small_problem):
        ds, Y = small_problem
        cfg = NGBConfig(kappa=1e-6, lam=1e-4)
        np.testing.assert_array_equal(fit_ngb(ds, Y, cfg).b_hat, fit_ngb(ds, Y, cfg).b_hat)

    def test_noiseless_spline_span_recovery(self):
        data, b_true, basis = spline_span_fixture(500, seed=0)
        ds = build_design(data, basis)
        fit = fit_ngb(ds, data.responses, NGBConfig(kappa=1e-12, lam=1e-7))
        t = np.linspace(0, 1, 2001)
        err = math.sqrt(np.trapezoid((fit.beta_hat(t) - SplineFunction(basis, b_true)(t)) ** 2, x=t))
        assert err <= 0.05
        assert 0.5 <= fit.delta_hat <= 0.6

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NGBConfig(gamma=1.0)
        with pytest.raises(ValueError):
            NGBConfig(kappa=-1.0)
        with pytest.raises(ValueError):
            NGBConfig(weight_mode="other")

    def test_m_mismatch(self, small_problem):
        ds, Y = small_problem
        with pytest.raises(ValueError):
            fit_ngb(ds, Y, NGBConfig(m=1))


class TestTuning:
    def test_singleton_grid(self, small_problem):
        ds, Y = small_problem
        fit = tune_fit(ds, Y, [3e-6], [2e-4])
        assert fit.kappa == 3e-6 and fit.lam == 2e-4

    def test_picks_smaller_bic(self, small_problem):
        ds, Y = small_problem
        lams = [1e-6, 1e-2]
        fits = [fit_ngb(ds, Y, NGBConfig(kappa=1e-6, lam=l)) for l in lams]
        assert fits[0].bic != fits[1].bic
        best = lams[int(np.argmin([f.bic for f in fits]))]
        assert tune_fit(ds, Y, [1e-6], lams).lam == best

    def test_tie_prefers_larger_lambda_then_kappa(self):
        # with U = 0 every fit has the same RSS and df, so the BIC ties exactly
        data = FunctionalDataset(grid=np.linspace(0, 1, 11), curves=np.zeros((6, 11)),
                                 responses=np.array([1.0, -1, 2, -2, 0.5, -0.5]))
        ds = build_design(data, make_basis(1.0, 3, 3))
        cfg = NGBConfig(weight_mode="plain")
        fit = tune_fit(ds, data.responses, [1e-3, 1e-1], [1e-2, 1.0, 0.1], cfg)
        assert fit.lam == 1.0 and fit.kappa == 1e-1

    def test_empty_grid(self, small_problem):
        ds, Y = small_problem
        with pytest.raises(ValueError):
            tune_fit(ds, Y, [], [1.0])

    def test_default_grids_scale_with_data(self, small_problem):
        ds, Y = small_problem
        k1, l1 = default_grids(ds, Y)
        k2, l2 = default_grids(ds, 3 * Y)
        np.testing.assert_allclose(l2, 9 * np.asarray(l1))
        np.testing.assert_allclose(k2, k1)
        assert all(np.diff(k1) > 0) and all(np.diff(l1) > 0)

    def test_smoothing_spline_tuning_has_no_bridge(self, small_problem):
        ds, Y = small_problem
        fit = tune_smoothing_spline(ds, Y, [1e-8, 1e-6, 1e-4])
        assert fit.lam == 0.0
        np.testing.assert_allclose(fit.b_hat, fit_smoothing_spline(ds, Y, fit.kappa), atol=1e-12)

    def test_tuned_fit_finds_cutoff(self):
        data = simulate_dataset("III", 200, 21)
        ds = build_design(data, make_basis(1.0, 50, 3))
        fit = tune_fit(ds, data.responses)
        assert 0.3 <= fit.delta_hat <= 0.8
