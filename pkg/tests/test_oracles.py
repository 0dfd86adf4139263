from itertools import combinations, product

import numpy as np
import pytest
from scipy.special import logsumexp

from mixdenoise import (
    MixtureParams,
    ModelParams,
    PatternSet,
    TimeSet,
    bayes_mmse,
    bayes_posterior,
    bayes_risk_mc,
    build_pattern_set,
    forward,
    forward_noise,
    linear_schedule,
    mixture_proportions,
    oracle_mmse,
    oracle_risk_closed,
    oracle_risk_mc,
    sample_data,
    score_function,
    score_matching_error,
    score_network,
    shrink_coef,
    uniform_proportions,
)

# ---------------------------------------------------------------------------
# Independent reference implementations.  These enumerate the joint latent
# space or evaluate the mixture density directly; they share no code with
# the estimators they check.
# ---------------------------------------------------------------------------


def brute_force_posterior(Xt, params, t, sched):
    """Exact posterior mean of the noise and label marginals by enumerating
    every (subset, label assignment) pair."""
    M, d = params.M, params.d
    P = Xt.shape[1]
    ab = sched.abar(t)
    var = ab * params.rho ** 2 + 1 - ab
    means = params.patterns.means
    coef = np.sqrt(1 - ab) / (1 - ab + params.rho ** 2 * ab)
    logws, assignments = [], []
    for zidx in combinations(range(M), params.K):
        z = np.zeros(M)
        z[list(zidx)] = 1
        pz = mixture_proportions(params.pi_tilde, z)
        for y in product(zidx, repeat=P):
            ll = 0.0
            for p, u in enumerate(y):
                r = Xt[:, p] - np.sqrt(ab) * means[u]
                ll += -r @ r / (2 * var) + np.log(pz[u])
            logws.append(ll)
            assignments.append(y)
    logws = np.array(logws) - logsumexp(logws)
    ws = np.exp(logws)
    est = np.zeros((d, P))
    gamma = np.zeros((P, M))
    for w, y in zip(ws, assignments):
        MY = means[list(y)].T
        est += w * coef * (Xt - np.sqrt(ab) * MY)
        for p, u in enumerate(y):
            gamma[p, u] += w
    return est, gamma


def mixture_log_density(Xt, params, t, sched):
    """Explicit log p_t for the noised data, up to an additive constant."""
    M, P = params.M, Xt.shape[1]
    ab = sched.abar(t)
    var = ab * params.rho ** 2 + 1 - ab
    means = params.patterns.means
    terms = []
    for zidx in combinations(range(M), params.K):
        z = np.zeros(M)
        z[list(zidx)] = 1
        pz = mixture_proportions(params.pi_tilde, z)
        per_token = 0.0
        for p in range(P):
            comps = [np.log(pz[u]) - np.sum((Xt[:, p] - np.sqrt(ab) * means[u]) ** 2) / (2 * var)
                     for u in zidx]
            per_token += logsumexp(comps)
        terms.append(per_token)
    return logsumexp(terms)  # uniform subset prior is a shared constant


def numerical_score(Xt, params, t, sched, h=1e-5):
    out = np.zeros_like(Xt)
    for i in range(Xt.shape[0]):
        for p in range(Xt.shape[1]):
            xp = Xt.copy()
            xm = Xt.copy()
            xp[i, p] += h
            xm[i, p] -= h
            out[i, p] = (mixture_log_density(xp, params, t, sched)
                         - mixture_log_density(xm, params, t, sched)) / (2 * h)
    return out


def tiny_corpus():
    """All exactness-test instances: (M, K, P, d) with rho and proportions."""
    cases = []
    for (M, K, P, d), rho in [((3, 2, 3, 4), 0.4), ((2, 1, 3, 2), 0.3),
                              ((2, 2, 2, 3), 0.5), ((3, 1, 2, 4), 0.25),
                              ((3, 2, 2, 3), 0.35)]:
        patterns = build_pattern_set(d, M, float(d), seed=5)
        raw = np.array([0.2, 0.3, 0.5][:M])
        params = MixtureParams(patterns=patterns, pi_tilde=raw / raw.sum(), K=K, rho=rho)
        cases.append((params, P))
    return cases


class TestOracleMmse:
    def test_recovers_noise_exactly_when_components_are_points(self):
        sched = linear_schedule(5, 0.98, 0.9)
        rng = np.random.default_rng(0)
        MY = rng.standard_normal((4, 6))
        E = rng.standard_normal((4, 6))
        Xt = np.sqrt(sched.abar(3)) * MY + np.sqrt(1 - sched.abar(3)) * E
        np.testing.assert_allclose(oracle_mmse(Xt, MY, 3, 0.0, sched), E, atol=1e-12)

    def test_scalar_coefficient(self):
        sched = linear_schedule(1, 0.5, 0.5)
        assert abs(shrink_coef(1, 1.0, sched) - np.sqrt(0.5)) < 1e-12

    def test_coefficient_is_least_squares_optimal(self):
        # among a*(Xt - sqrt(abar) MY), the best a over samples matches
        sched = linear_schedule(4, 0.98, 0.9)
        t, rho = 2, 0.4
        patterns = build_pattern_set(8, 3, 8.0, seed=2)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(3), K=2, rho=rho)
        rng = np.random.default_rng(5)
        noise, resid = [], []
        for _ in range(4000):
            s = sample_data(params, 4, rng)
            E = rng.standard_normal((8, 4))
            Xt = forward_noise(s.x0, t, E, sched)
            V = Xt - np.sqrt(sched.abar(t)) * patterns.mean_matrix(s.y)
            noise.append(E.ravel())
            resid.append(V.ravel())
        e = np.concatenate(noise)
        v = np.concatenate(resid)
        best_a = (e @ v) / (v @ v)
        # regression standard error of the fitted slope
        se = np.sqrt(np.sum((e - best_a * v) ** 2) / (e.size - 1)) / np.sqrt(v @ v)
        assert abs(best_a - shrink_coef(t, rho, sched)) <= 3 * se


class TestOracleRiskClosed:
    def test_zero_noise_is_perfectly_denoisable(self):
        sched = linear_schedule(5, 0.98, 0.9)
        assert oracle_risk_closed(0.0, sched, TimeSet.full(5)) == 0.0

    def test_single_step_hand_value(self):
        sched = linear_schedule(1, 0.98, 0.98)
        value = oracle_risk_closed(0.3, sched, TimeSet.full(1))
        assert abs(value - 0.0882 / 0.1082) < 1e-12

    def test_matches_monte_carlo(self):
        sched = linear_schedule(6, 0.98, 0.9)
        tset = TimeSet.full(6)
        patterns = build_pattern_set(8, 2, 8.0, seed=1)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(2), K=1, rho=0.3)
        mc, se = oracle_risk_mc(params, 4, sched, tset, 4000, 123)
        closed = oracle_risk_closed(0.3, sched, tset)
        assert abs(mc - closed) <= 3 * se


class TestBayesPosterior:
    def test_symmetric_opposite_means_split_evenly(self):
        patterns = PatternSet.from_means([[1.0], [-1.0]], orthogonal=False)
        params = MixtureParams(patterns=patterns, pi_tilde=[0.5, 0.5], K=1, rho=0.2)
        sched = linear_schedule(3, 0.9, 0.8)
        post = bayes_posterior(np.zeros((1, 2)), params, 2, sched)
        np.testing.assert_allclose(post.gamma, 0.5, atol=1e-12)

    def test_tight_components_give_certain_labels(self):
        patterns = build_pattern_set(16, 3, 16.0, seed=4)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(3), K=2, rho=1e-4)
        sched = linear_schedule(2, 0.999, 0.998)
        y = np.array([0, 1, 1])
        Xt = np.sqrt(sched.abar(1)) * patterns.mean_matrix(y)
        post = bayes_posterior(Xt, params, 1, sched)
        for p, u in enumerate(y):
            assert post.gamma[p, u] > 1 - 1e-6

    def test_posterior_normalization(self):
        rng = np.random.default_rng(8)
        for params, P in tiny_corpus():
            sched = linear_schedule(4, 0.95, 0.85)
            s = sample_data(params, P, rng)
            E = rng.standard_normal((params.d, P))
            post = bayes_posterior(forward_noise(s.x0, 2, E, sched), params, 2, sched)
            np.testing.assert_allclose(post.gamma.sum(axis=1), 1.0, atol=1e-10)
            assert abs(logsumexp(post.log_z_post)) < 1e-10

    def test_matches_joint_enumeration(self):
        rng = np.random.default_rng(11)
        sched = linear_schedule(4, 0.95, 0.85)
        for params, P in tiny_corpus():
            s = sample_data(params, P, rng)
            E = rng.standard_normal((params.d, P))
            Xt = forward_noise(s.x0, 3, E, sched)
            _, gamma = brute_force_posterior(Xt, params, 3, sched)
            post = bayes_posterior(Xt, params, 3, sched)
            np.testing.assert_allclose(post.gamma, gamma, atol=1e-10)


class TestBayesMmse:
    def test_degenerate_posterior_reduces_to_oracle(self):
        patterns = build_pattern_set(16, 3, 16.0, seed=4)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(3), K=2, rho=1e-5)
        sched = linear_schedule(2, 0.999, 0.998)
        rng = np.random.default_rng(2)
        s = sample_data(params, 6, rng)
        E = 0.01 * rng.standard_normal((16, 6))
        Xt = forward_noise(s.x0, 1, E, sched)
        MY = patterns.mean_matrix(s.y)
        np.testing.assert_allclose(bayes_mmse(Xt, params, 1, sched),
                                   oracle_mmse(Xt, MY, 1, params.rho, sched), atol=1e-8)

    def test_symmetric_input_maps_to_zero(self):
        patterns = PatternSet.from_means([[1.0], [-1.0]], orthogonal=False)
        params = MixtureParams(patterns=patterns, pi_tilde=[0.5, 0.5], K=1, rho=0.2)
        sched = linear_schedule(3, 0.9, 0.8)
        np.testing.assert_allclose(bayes_mmse(np.zeros((1, 2)), params, 2, sched),
                                   0.0, atol=1e-14)

    def test_matches_joint_enumeration(self):
        rng = np.random.default_rng(13)
        sched = linear_schedule(4, 0.95, 0.85)
        for params, P in tiny_corpus():
            s = sample_data(params, P, rng)
            E = rng.standard_normal((params.d, P))
            Xt = forward_noise(s.x0, 2, E, sched)
            bf_est, _ = brute_force_posterior(Xt, params, 2, sched)
            np.testing.assert_allclose(bayes_mmse(Xt, params, 2, sched), bf_est, atol=1e-10)


class TestBayesRiskMc:
    def test_never_beats_oracle(self):
        sched = linear_schedule(4, 0.97, 0.9)
        tset = TimeSet.full(4)
        patterns = build_pattern_set(8, 3, 8.0, seed=3)
        params = MixtureParams(patterns=patterns, pi_tilde=[0.2, 0.3, 0.5], K=2, rho=0.4)
        bayes, b_se = bayes_risk_mc(params, 6, sched, tset, 1500, 7)
        oracle, o_se = oracle_risk_mc(params, 6, sched, tset, 1500, 7)
        assert bayes >= oracle - 3 * (b_se + o_se)

    def test_zero_component_noise_gives_zero_risk(self):
        sched = linear_schedule(3, 0.98, 0.95)
        patterns = build_pattern_set(16, 2, 16.0, seed=9)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(2), K=1, rho=0.0)
        value, _ = bayes_risk_mc(params, 4, sched, TimeSet.full(3), 200, 5)
        assert value < 1e-12


class TestScoreFunction:
    def test_certain_labels_recover_scaled_noise(self):
        patterns = build_pattern_set(16, 3, 16.0, seed=4)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(3), K=2, rho=0.0)
        sched = linear_schedule(2, 0.999, 0.998)
        rng = np.random.default_rng(3)
        s = sample_data(params, 5, rng)
        E = 0.01 * rng.standard_normal((16, 5))
        Xt = forward_noise(s.x0, 1, E, sched)
        expected = -E / np.sqrt(1 - sched.abar(1))
        np.testing.assert_allclose(score_function(Xt, params, 1, sched), expected,
                                   rtol=1e-6, atol=1e-10)

    def test_symmetric_zero_input_zero_score(self):
        patterns = PatternSet.from_means([[1.0], [-1.0]], orthogonal=False)
        params = MixtureParams(patterns=patterns, pi_tilde=[0.5, 0.5], K=1, rho=0.2)
        sched = linear_schedule(3, 0.9, 0.8)
        np.testing.assert_allclose(score_function(np.zeros((1, 2)), params, 2, sched),
                                   0.0, atol=1e-14)

    def test_matches_numerical_differentiation_1d(self):
        # two scalar components (+1, -1 scaled): the classic line mixture
        patterns = PatternSet.from_means([[1.0], [-1.0]], orthogonal=False)
        params = MixtureParams(patterns=patterns, pi_tilde=[0.3, 0.7], K=1, rho=0.45)
        sched = linear_schedule(3, 0.9, 0.8)
        for t in (1, 3):
            for value in (-1.3, -0.2, 0.0, 0.4, 1.7):
                Xt = np.array([[value, -0.5 * value, 0.9]])
                got = score_function(Xt, params, t, sched)
                want = numerical_score(Xt, params, t, sched)
                np.testing.assert_allclose(got, want, atol=1e-6)

    def test_matches_numerical_differentiation_2d(self):
        patterns = build_pattern_set(2, 2, 2.0, seed=6)
        params = MixtureParams(patterns=patterns, pi_tilde=[0.4, 0.6], K=2, rho=0.5)
        sched = linear_schedule(4, 0.95, 0.8)
        rng = np.random.default_rng(21)
        for t in (1, 4):
            Xt = rng.uniform(-2, 2, size=(2, 3))
            got = score_function(Xt, params, t, sched)
            want = numerical_score(Xt, params, t, sched)
            np.testing.assert_allclose(got, want, atol=1e-6)


class TestScoreNetwork:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        patterns = build_pattern_set(8, 2, 8.0, seed=1)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(2), K=1, rho=0.3)
        sched = linear_schedule(4, 0.98, 0.9)
        model = ModelParams(W=0.1 * rng.standard_normal((8, 8)),
                            v=rng.standard_normal(4) / np.sqrt(8))
        return params, sched, model, rng

    def test_zero_scales_give_zero_score(self):
        params, sched, model, rng = self.make()
        zeroed = ModelParams(W=model.W, v=np.zeros(4))
        Xt = rng.standard_normal((8, 5))
        np.testing.assert_array_equal(score_network(zeroed, Xt, 2, sched), np.zeros((8, 5)))

    def test_linear_in_scales(self):
        params, sched, model, rng = self.make(1)
        doubled = ModelParams(W=model.W, v=2 * model.v)
        Xt = rng.standard_normal((8, 5))
        np.testing.assert_allclose(score_network(doubled, Xt, 3, sched),
                                   2 * score_network(model, Xt, 3, sched), atol=1e-12)

    def test_consistent_with_forward(self):
        params, sched, model, rng = self.make(2)
        Xt = rng.standard_normal((8, 5))
        expected = -forward(model, Xt, 2) / np.sqrt(1 - sched.abar(2))
        np.testing.assert_array_equal(score_network(model, Xt, 2, sched), expected)


class TestScoreMatchingError:
    def test_exact_posterior_mean_predictor_scores_zero(self):
        # a model cannot express the posterior mean exactly, so check the
        # estimator identity instead: plugging the posterior-mean into the
        # score-gap formula must give 0
        patterns = build_pattern_set(8, 2, 8.0, seed=1)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(2), K=1, rho=0.3)
        sched = linear_schedule(3, 0.98, 0.9)
        rng = np.random.default_rng(4)
        s = sample_data(params, 5, rng)
        E = rng.standard_normal((8, 5))
        Xt = forward_noise(s.x0, 2, E, sched)
        est = bayes_mmse(Xt, params, 2, sched)
        gap = (-est / np.sqrt(1 - sched.abar(2))) - score_function(Xt, params, 2, sched)
        assert np.abs(gap).max() < 1e-14

    def test_untrained_model_positive_error(self):
        rng = np.random.default_rng(5)
        patterns = build_pattern_set(8, 2, 8.0, seed=1)
        params = MixtureParams(patterns=patterns, pi_tilde=uniform_proportions(2), K=1, rho=0.3)
        sched = linear_schedule(4, 0.98, 0.9)
        model = ModelParams(W=np.zeros((8, 8)), v=rng.standard_normal(4) / np.sqrt(8))
        err, se = score_matching_error(model, params, 6, sched, TimeSet.full(4), 200, 9)
        assert err > 0 and se >= 0
