import math

import numpy as np
import pytest

from mdp_stability import (DiffPolicy, EmbeddedMdp, MdpSpec, Perturbation,
                           StartDistribution, analyze_chain,
                           build_uniform_shutdown,
                           chain_perturbation_bound, decrease_bound,
                           embedded_to_document, finite_difference_jacobian,
                           jacobian_l1_norm, load_embedded, load_toy_policy,
                           make_toy_policy, perturbation_size,
                           rate_of_decrease_check, realize_chain,
                           shutdown_probability, spectral_radius,
                           start_sensitivity, tighten_policy_bound,
                           toy_policy_to_document, transient_set,
                           validate_diff_policy)
from mdp_stability.scenarios import random_family, random_perturbation


def embedded(seed=0, n_states=5, n_actions=2, dim=3):
    return random_family(seed, (n_states, n_actions, dim))


def uniform_policy(n_actions, dim):
    return make_toy_policy(np.zeros((n_actions, dim)))


class TestRealizeChain:
    def test_deterministic_env_point_mass_policy(self):
        # Two actions moving deterministically; the policy pins action 0.
        P = np.zeros((2, 2, 2))
        P[0, 0, 1] = 1.0
        P[0, 1, 0] = 1.0
        P[1, :, 1] = 1.0
        base = MdpSpec(("u", "v"), ("go", "stay"), P, np.zeros((2, 2)),
                       0.9, {1})
        emdp = EmbeddedMdp(base, [[1.0], [10.0]])
        policy = make_toy_policy([[1.0], [-1.0]], temperature=1e-3)
        chain = realize_chain(emdp, policy)
        np.testing.assert_allclose(chain, [[0.0, 1.0], [0.0, 1.0]],
                                   atol=1e-12)

    def test_uniform_policy_averages_kernels(self):
        emdp = embedded(1)
        policy = uniform_policy(2, emdp.dim)
        chain = realize_chain(emdp, policy)
        np.testing.assert_allclose(
            chain, emdp.base.transition.mean(axis=1), atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_direct_summation(self, seed):
        emdp = embedded(seed)
        rng = np.random.default_rng(seed)
        policy = make_toy_policy(rng.standard_normal((2, emdp.dim)))
        chain = realize_chain(emdp, policy)
        for i in range(emdp.base.n_states):
            row = policy.evaluator(emdp.embedding[i])
            direct = sum(row[a] * emdp.base.transition[i, a]
                         for a in range(2))
            np.testing.assert_allclose(chain[i], direct, atol=1e-12)

    def test_rejects_invalid_evaluator(self):
        emdp = embedded(2)
        bad = DiffPolicy(lambda x: np.array([0.7, 0.7]),
                         lambda x: np.zeros((2, emdp.dim)), 0.0)
        with pytest.raises(ValueError, match="invalid"):
            realize_chain(emdp, bad)


class TestTransientSet:
    def test_single_hop(self):
        P = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert transient_set(P, {1}) == {0}

    def test_disconnected_component_excluded(self):
        P = np.zeros((4, 4))
        P[0, 1] = 1.0
        P[1, 2] = 1.0
        P[2, 2] = 1.0
        P[3, 3] = 1.0
        assert transient_set(P, {2}) == {0, 1}

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_bfs_oracle(self, seed):
        emdp = embedded(seed, n_states=6)
        chain = realize_chain(emdp, uniform_policy(2, emdp.dim))
        safe = emdp.base.safe_set
        # Path-enumeration oracle up to length |S|.
        n = chain.shape[0]
        reach = set(safe)
        for _ in range(n):
            for i in range(n):
                if i in reach:
                    continue
                if any(chain[i, j] > 1e-15 and j in reach for j in range(n)):
                    reach.add(i)
        assert transient_set(chain, safe) == frozenset(reach - safe)


class TestShutdownProbability:
    def test_start_inside_safe(self):
        emdp = embedded(3)
        chain = realize_chain(emdp, uniform_policy(2, emdp.dim))
        safe = emdp.base.safe_set
        start = StartDistribution.point_mass(emdp.base.n_states,
                                             min(safe),
                                             allow_safe_support=True)
        assert shutdown_probability(chain, safe, start) == pytest.approx(
            1.0, abs=1e-12)

    def test_recurrent_state_scores_zero(self):
        P = np.array([[1.0, 0.0], [0.0, 1.0]])
        start = StartDistribution.point_mass(2, 0)
        assert shutdown_probability(P, {1}, start) == 0.0

    def test_half_and_half(self):
        # One step: safe w.p. 1/2, dead self-loop otherwise.
        P = np.array([[0.0, 0.5, 0.5],
                      [0.0, 1.0, 0.0],
                      [0.0, 0.0, 1.0]])
        start = StartDistribution.point_mass(3, 0)
        value = shutdown_probability(P, {2}, start)
        # Truncated-series oracle to 1e-12.
        series, state = 0.0, np.array([1.0, 0.0, 0.0])
        v_safe = np.array([0.0, 0.0, 1.0])
        I_trans = np.diag([1.0, 0.0, 0.0])
        for _ in range(200):
            series += state @ P @ v_safe
            state = state @ (P @ I_trans)
            if state.sum() < 1e-14:
                break
        assert value == pytest.approx(series, abs=1e-12)
        assert value == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_closed_form_equals_truncated_series(self, seed):
        emdp = embedded(seed, n_states=6)
        P = realize_chain(emdp, uniform_policy(2, emdp.dim))
        safe = emdp.base.safe_set
        start = StartDistribution.uniform_over(6, emdp.base.nonsafe_indices)
        value = shutdown_probability(P, safe, start)
        v_safe = np.zeros(6)
        v_safe[list(safe)] = 1.0
        trans = sorted(transient_set(P, safe))
        I_trans = np.zeros((6, 6))
        for t in trans:
            I_trans[t, t] = 1.0
        series = 0.0
        vec = start.weights.copy()
        M = P @ I_trans
        for _ in range(100_000):
            series += vec @ P @ v_safe
            vec = vec @ M
            if np.abs(vec).max() < 1e-12:
                break
        assert value == pytest.approx(series, abs=1e-10)


class TestSpectralRadius:
    def test_scalar(self):
        assert spectral_radius(np.array([[0.5]])) == pytest.approx(
            0.5, abs=1e-10)

    def test_periodic_swap(self):
        M = np.array([[0.0, 0.5], [0.5, 0.0]])
        assert spectral_radius(M) == pytest.approx(0.5, abs=1e-10)

    def test_nilpotent(self):
        M = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert spectral_radius(M) == 0.0

    def test_empty(self):
        assert spectral_radius(np.zeros((0, 0))) == 0.0

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_characteristic_polynomial_roots(self, seed):
        rng = np.random.default_rng(seed)
        M = rng.random((5, 5))
        M = M / (M.sum(axis=1, keepdims=True) + rng.random((5, 1)) + 0.1)
        roots = np.roots(np.poly(M))
        expected = float(np.max(np.abs(roots)))
        assert spectral_radius(M) == pytest.approx(expected, abs=1e-8)

    def test_rejects_negative_entries(self):
        with pytest.raises(ValueError):
            spectral_radius(np.array([[-0.1]]))


class TestPerturbationSize:
    def test_zero(self):
        emdp = embedded(4)
        policy = uniform_policy(2, emdp.dim)
        assert perturbation_size(emdp, policy,
                                 Perturbation.zero(emdp)) == 0.0

    def test_formula_arithmetic(self):
        base = MdpSpec(("u", "v"), ("a",), [[[0.5, 0.5]], [[0.0, 1.0]]],
                       np.zeros((2, 1)), 0.9, {1})
        emdp = EmbeddedMdp(base, [[0.0], [1.0]])
        policy = DiffPolicy(lambda x: np.array([1.0]),
                            lambda x: np.zeros((1, 1)), 1.0)
        dT = np.zeros((2, 1, 2))
        dT[0, 0] = [0.1, -0.1]           # l1 mass 0.2
        pert = Perturbation([[0.1], [0.0]], dT)
        # 0.5 * |S| * b * ||dS||_1 + ||dT||_1 = 0.5*2*1*0.1 + 0.2 = 0.3
        assert perturbation_size(emdp, policy, pert) == pytest.approx(
            0.3, abs=1e-15)

    @pytest.mark.parametrize("seed", range(6))
    def test_recomputation_by_direct_summation(self, seed):
        emdp = embedded(seed)
        rng = np.random.default_rng(seed)
        policy = make_toy_policy(rng.standard_normal((2, emdp.dim)))
        pert = random_perturbation(emdp, policy, 1e-4, seed)
        expected = 0.5 * emdp.base.n_states * policy.bound_b * sum(
            math.sqrt(float(row @ row)) for row in pert.delta_S) \
            + float(sum(abs(x) for x in pert.delta_T.ravel()))
        assert perturbation_size(emdp, policy, pert) == pytest.approx(
            expected, abs=1e-15)


class TestChainPerturbationBound:
    def test_pure_transition_shift_is_exact(self):
        emdp = embedded(1)
        policy = uniform_policy(2, emdp.dim)
        pert = random_perturbation(emdp, policy, 1e-3, seed=5)
        assert np.all(pert.delta_S == 0.0)  # b = 0 forces all mass into dT
        report = chain_perturbation_bound(emdp, policy, pert)
        assert report.all_entries_ok
        assert np.all(report.slack == 0.0)
        assert report.aggregate_ok
        assert not report.first_order_only

    def test_pure_coordinate_shift_within_slack(self):
        emdp = embedded(2)
        rng = np.random.default_rng(0)
        policy = make_toy_policy(rng.standard_normal((2, emdp.dim)))
        dS = 1e-4 * rng.standard_normal(emdp.embedding.shape)
        pert = Perturbation(dS, np.zeros_like(emdp.base.transition))
        report = chain_perturbation_bound(emdp, policy, pert)
        assert report.all_entries_ok
        assert report.aggregate_ok

    @pytest.mark.parametrize("seed", range(10))
    def test_aggregate_bound_on_random_instances(self, seed):
        emdp = embedded(seed, n_states=6, dim=4)
        rng = np.random.default_rng(seed + 1)
        policy = make_toy_policy(rng.standard_normal((2, 4)))
        pert = random_perturbation(emdp, policy, 10.0 ** rng.uniform(-6, -3),
                                   seed)
        report = chain_perturbation_bound(emdp, policy, pert)
        assert report.all_entries_ok
        assert report.aggregate_ok
        assert report.delta_p_l1 <= report.size + emdp.base.n_states \
            * report.slack.sum() + 1e-12


class TestRateOfDecrease:
    def test_zero_perturbation(self):
        emdp = embedded(3)
        policy = uniform_policy(2, emdp.dim)
        report = rate_of_decrease_check(emdp, policy,
                                        Perturbation.zero(emdp))
        assert report.ratio == 0.0
        assert report.within_bound and report.trans_preserved
        assert report.delta_s_pi == 0.0

    def test_uniform_shutdown_jump_is_a_semicontinuity_witness(self):
        # Recurrent dead chain: shutdown probability 0; blending in a 1/N
        # hop to safety lifts it to 1 at perturbation size 4/N.
        P = np.zeros((2, 2, 2))
        P[0, :, 0] = 1.0
        P[1, :, 1] = 1.0
        base = MdpSpec(("dead", "safe"), ("a0", "a1"), P, np.zeros((2, 2)),
                       0.9, {1})
        emdp = EmbeddedMdp(base, [[0.0], [1.0]])
        policy = uniform_policy(2, 1)
        N = 100.0
        modified = build_uniform_shutdown(base, N)
        pert = Perturbation(np.zeros((2, 1)),
                            modified.transition - base.transition)
        report = rate_of_decrease_check(emdp, policy, pert)
        assert report.s_pi_before == 0.0
        assert report.s_pi_after == pytest.approx(1.0, abs=1e-12)
        assert report.size == pytest.approx(4.0 / N, abs=1e-12)
        assert report.within_bound          # increases never violate it
        assert report.trans_preserved

    @pytest.mark.parametrize("size", [1e-2, 1e-3, 1e-4, 1e-5, 1e-6])
    def test_shrinking_sweep_stays_below_bound(self, size):
        emdp = embedded(6, n_states=6)
        rng = np.random.default_rng(9)
        policy = make_toy_policy(rng.standard_normal((2, emdp.dim)))
        pert = random_perturbation(emdp, policy, size, seed=17)
        report = rate_of_decrease_check(emdp, policy, pert)
        assert report.within_bound
        assert report.s_pi_after > report.s_pi_before \
            - report.bound_B * report.size


class TestStartSensitivity:
    def test_identical_starts(self):
        emdp = embedded(4)
        P = realize_chain(emdp, uniform_policy(2, emdp.dim))
        start = StartDistribution.uniform_over(emdp.base.n_states,
                                               emdp.base.nonsafe_indices)
        assert start_sensitivity(P, emdp.base.safe_set, start, start) == 0.0

    def test_symmetric_states_are_indistinguishable(self):
        # Two states with identical absorption behavior.
        P = np.array([[0.0, 0.0, 1.0],
                      [0.0, 0.0, 1.0],
                      [0.0, 0.0, 1.0]])
        d1 = StartDistribution.point_mass(3, 0)
        d2 = StartDistribution.point_mass(3, 1)
        assert start_sensitivity(P, {2}, d1, d2) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_l2_bound_on_random_pairs(self, seed):
        emdp = embedded(seed, n_states=6)
        P = realize_chain(emdp, uniform_policy(2, emdp.dim))
        rng = np.random.default_rng(seed)
        d1 = StartDistribution(rng.dirichlet(np.ones(6)))
        d2 = StartDistribution(rng.dirichlet(np.ones(6)))
        diff = start_sensitivity(P, emdp.base.safe_set, d1, d2)
        assert diff <= np.linalg.norm(d1.weights - d2.weights) + 1e-10


class TestToyPolicies:
    def test_zero_weights_give_uniform_and_zero_bound(self):
        policy = make_toy_policy(np.zeros((3, 2)))
        np.testing.assert_allclose(policy.evaluator([0.4, -0.2]),
                                   np.ones(3) / 3)
        np.testing.assert_allclose(policy.jacobian([0.4, -0.2]), 0.0)
        assert policy.bound_b == 0.0

    def test_single_action_is_constant(self):
        policy = make_toy_policy([[1.0, 2.0]])
        np.testing.assert_allclose(policy.evaluator([3.0, -1.0]), [1.0])
        np.testing.assert_allclose(policy.jacobian([3.0, -1.0]), 0.0,
                                   atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_jacobian_matches_finite_differences(self, seed):
        # Probes live in the unit cube, the domain embeddings come from;
        # far outside it the softmax saturates and its gradient sinks under
        # the finite-difference noise floor.
        rng = np.random.default_rng(seed)
        policy = make_toy_policy(rng.standard_normal((3, 4)),
                                 temperature=0.7)
        for _ in range(50):
            x = rng.uniform(0.0, 1.0, size=4)
            jac = policy.jacobian(x)
            fd = finite_difference_jacobian(policy, x)
            scale = max(np.abs(fd).max(), 1e-12)
            assert np.abs(jac - fd).max() / scale < 1e-6
            assert np.abs(jac.sum(axis=0)).max() < 1e-8

    def test_validate_diff_policy_clean(self):
        rng = np.random.default_rng(2)
        policy = make_toy_policy(rng.standard_normal((2, 3)))
        points = rng.standard_normal((10, 3))
        assert validate_diff_policy(policy, points) == []

    def test_validate_diff_policy_catches_a_lying_jacobian(self):
        policy = make_toy_policy(np.ones((2, 2)))
        lying = DiffPolicy(policy.evaluator,
                           lambda x: np.ones((2, 2)), policy.bound_b)
        problems = validate_diff_policy(lying, [np.zeros(2)])
        assert any("jacobian" in p for p in problems)

    def test_tighten_bound_is_exact_on_the_given_points(self):
        rng = np.random.default_rng(8)
        policy = make_toy_policy(rng.standard_normal((3, 2)))
        points = rng.standard_normal((20, 2))
        tight = tighten_policy_bound(policy, points)
        norms = [jacobian_l1_norm(policy.jacobian(x)) for x in points]
        assert tight.bound_b == pytest.approx(max(norms), abs=1e-12)
        assert tight.bound_b <= policy.bound_b + 1e-12

    def test_jacobian_l1_norm_matches_sampling(self):
        rng = np.random.default_rng(5)
        jac = rng.standard_normal((3, 4))
        exact = jacobian_l1_norm(jac)
        sampled = 0.0
        for _ in range(2000):
            u = rng.standard_normal(4)
            u /= np.linalg.norm(u)
            sampled = max(sampled, float(np.abs(jac @ u).sum()))
        assert sampled <= exact + 1e-9
        assert sampled >= 0.95 * exact


class TestAnalysisAndBound:
    def test_bound_monotone_in_spectral_radius_and_safe_count(self):
        def chain_with(p_loop, n_safe):
            n = 1 + n_safe
            P = np.zeros((n, n))
            P[0, 0] = p_loop
            P[0, 1] = 1.0 - p_loop
            for s in range(1, n):
                P[s, s] = 1.0
            return P, set(range(1, n))

        bounds = []
        for p in (0.1, 0.5, 0.9):
            P, safe = chain_with(p, 1)
            bounds.append(decrease_bound(P, safe)[2])
        assert bounds[0] < bounds[1] < bounds[2]
        P1, safe1 = chain_with(0.5, 1)
        P2, safe2 = chain_with(0.5, 3)
        assert decrease_bound(P1, safe1)[2] < decrease_bound(P2, safe2)[2]

    @pytest.mark.parametrize("seed", range(10))
    def test_transient_block_radius_strictly_below_one(self, seed):
        emdp = embedded(seed)
        policy = uniform_policy(2, emdp.dim)
        start = StartDistribution.uniform_over(emdp.base.n_states,
                                               emdp.base.nonsafe_indices)
        analysis = analyze_chain(emdp, policy, start)
        if analysis.s_trans:
            assert analysis.lambda1 < 1.0 - 1e-9
        assert 0.0 <= analysis.safety <= 1.0
        inv = 1.0 / (1.0 - analysis.lambda1)
        assert analysis.bound_B == pytest.approx(
            inv * (1 + inv) * len(emdp.base.safe_set), abs=1e-9)


class TestDocuments:
    def test_embedded_round_trip(self):
        emdp = embedded(7)
        doc = embedded_to_document(emdp)
        again = load_embedded(doc)
        np.testing.assert_array_equal(again.embedding, emdp.embedding)
        np.testing.assert_array_equal(again.base.transition,
                                      emdp.base.transition)

    def test_toy_policy_round_trip(self):
        rng = np.random.default_rng(1)
        W = rng.standard_normal((2, 3))
        doc = toy_policy_to_document(W, 0.5)
        policy = load_toy_policy(doc)
        x = rng.standard_normal(3)
        expected = make_toy_policy(W, 0.5).evaluator(x)
        np.testing.assert_allclose(policy.evaluator(x), expected)
