import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space

from pcmcnet.core import (
    SingularSystemError,
    choice_distribution,
    mnl_rate_matrix,
    pcmc_choice_prob,
    restrict,
    solve_stationary,
    stationary_system,
    validate_rate_matrix,
    with_diagonal,
)
from pcmcnet.datagen import rps_model

from conftest import random_rates


def kernel_oracle(Q):
    """Stationary vector from the SVD null space of Q^T (independent of the LU path)."""
    v = null_space(np.asarray(Q).T)[:, 0]
    return v / v.sum()


class TestValidate:
    def test_two_state_valid(self):
        Q = np.array([[-1.0, 1.0], [3.0, -3.0]])
        assert validate_rate_matrix(Q)

    def test_dead_pair_reported(self):
        Q = np.zeros((2, 2))
        res = validate_rate_matrix(Q)
        assert not res
        assert res.index == (0, 1)
        assert "positive" in res.reason

    def test_rps_valid(self):
        assert validate_rate_matrix(rps_model(0.75))

    def test_one_way_rates_allowed(self):
        # q_12 = 0 is fine as long as q_21 > 0
        assert validate_rate_matrix(np.array([[0.0, 0.0], [2.0, -2.0]]))

    @pytest.mark.parametrize("Q, reason", [
        (np.array([[-1.0, 1.0]]), "square"),
        (np.array([[-1.0, 1.0], [np.nan, 0.0]]), "non-finite"),
        (np.array([[1.0, -1.0], [1.0, -1.0]]), "negative"),
        (np.array([[-1.0, 1.0], [1.0, -0.5]]), "row"),
    ])
    def test_violations(self, Q, reason):
        res = validate_rate_matrix(Q)
        assert not res and reason in res.reason


class TestRestrict:
    def test_rps_pair(self):
        R = restrict(rps_model(0.75), [0, 1])
        np.testing.assert_allclose(R, [[-0.25, 0.25], [0.75, -0.75]])

    def test_singleton_is_zero(self):
        np.testing.assert_array_equal(restrict(rps_model(0.75), [2]), np.zeros((1, 1)))

    def test_full_set_identity(self, rng):
        Q = random_rates(rng, 5)
        np.testing.assert_allclose(restrict(Q, range(5)), Q, atol=1e-15)

    def test_nested(self, rng):
        Q = random_rates(rng, 7)
        S = [6, 2, 4, 0, 3]
        T = [4, 1, 3]
        np.testing.assert_array_equal(restrict(restrict(Q, S), T), restrict(Q, [S[t] for t in T]))

    @pytest.mark.parametrize("S, exc", [([], ValueError), ([0, 0], ValueError), ([3], IndexError)])
    def test_bad_subsets(self, S, exc):
        with pytest.raises(exc):
            restrict(np.zeros((3, 3)), S)


class TestSolveStationary:
    def test_two_state_balance(self):
        pi = solve_stationary(np.array([[-1.0, 1.0], [3.0, -3.0]]))
        np.testing.assert_allclose(pi, [0.75, 0.25], atol=1e-15)

    @pytest.mark.parametrize("alpha", [0.51, 0.6, 0.75, 0.9, 1.0])
    def test_rps_full_set_uniform(self, alpha):
        np.testing.assert_allclose(solve_stationary(rps_model(alpha)), np.full(3, 1 / 3), atol=1e-14)

    def test_rps_pair(self):
        np.testing.assert_allclose(choice_distribution(rps_model(0.75), [0, 1]), [0.75, 0.25], atol=1e-15)

    def test_singleton(self):
        assert pcmc_choice_prob(rps_model(0.75), [2], 2) == 1.0

    def test_favored_in_pair(self):
        assert pcmc_choice_prob(rps_model(0.8), [0, 1], 0) == pytest.approx(0.8, abs=1e-14)

    def test_member_check(self):
        with pytest.raises(ValueError):
            pcmc_choice_prob(rps_model(0.8), [0, 1], 2)

    def test_system_replaces_last_column(self):
        Q = random_rates(np.random.default_rng(1), 4)
        A = stationary_system(Q)
        np.testing.assert_array_equal(A[:, -1], 1.0)
        np.testing.assert_array_equal(A[:, :-1], Q[:, :-1])

    def test_matches_null_space(self, rng):
        for n in (2, 3, 8, 30, 50):
            Q = random_rates(rng, n)
            np.testing.assert_allclose(solve_stationary(Q), kernel_oracle(Q), atol=1e-12)

    def test_reducible_chain_raises(self):
        # two closed classes {0,1} and {2,3}: the stationary vector is not unique
        Q = with_diagonal(np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float))
        with pytest.raises(SingularSystemError):
            solve_stationary(Q)

    def test_absorbing_state(self):
        # all mass flows to state 2
        Q = with_diagonal(np.array([[0, 1, 1], [1, 0, 1], [0, 0, 0]], dtype=float))
        np.testing.assert_allclose(solve_stationary(Q), [0, 0, 1], atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(2, 12), seed=st.integers(0, 2**32 - 1),
           c=st.sampled_from([0.1, 10.0, 1000.0]))
    def test_properties(self, n, seed, c):
        Q = random_rates(np.random.default_rng(seed), n, low=0.0)
        Q = with_diagonal(Q + Q.T.clip(max=0.0) + 1e-3)  # keep every pair connected
        pi = solve_stationary(Q)
        assert pi.min() >= 0
        assert abs(pi.sum() - 1) < 1e-10
        assert np.abs(pi @ Q).max() < 1e-9
        np.testing.assert_allclose(solve_stationary(c * Q), pi, atol=1e-9)


class TestMnlEmbedding:
    def test_luce_on_every_subset(self):
        w = np.array([0.3, 1.0, 2.5, 0.7, 4.0])
        Q = mnl_rate_matrix(w)
        for k in range(1, 6):
            for S in itertools.combinations(range(5), k):
                pi = choice_distribution(Q, S)
                np.testing.assert_allclose(pi, w[list(S)] / w[list(S)].sum(), atol=1e-9)

    def test_valid(self):
        assert validate_rate_matrix(mnl_rate_matrix([1.0, 2.0, 3.0]))
