import itertools

import numpy as np
import pytest

from pcmcnet.core import choice_distribution, mnl_rate_matrix, validate_rate_matrix
from pcmcnet.data import item_session
from pcmcnet.datagen import PCMCGroundTruth, random_pcmc, rps_model, sample_sessions, subset_generator
from pcmcnet.mle import MLEResult, aggregate_counts, fit_mle, log_likelihood


def all_subsets(n):
    return [S for k in range(2, n + 1) for S in itertools.combinations(range(n), k)]


def max_tv(Q_hat, Q, n):
    return max(0.5 * np.abs(choice_distribution(Q_hat, S) - choice_distribution(Q, S)).sum()
               for S in all_subsets(n))


class TestCounts:
    def test_single(self):
        counts = aggregate_counts([item_session([0, 1], 0)])
        assert list(counts) == [(0, 1)]
        np.testing.assert_array_equal(counts[(0, 1)], [1, 0])

    def test_doubling(self):
        s = item_session([2, 0, 1], 0)
        np.testing.assert_array_equal(aggregate_counts([s, s])[(0, 1, 2)], [0, 0, 2])

    def test_order_insensitive_keys(self):
        counts = aggregate_counts([item_session([1, 0], 0), item_session([0, 1], 0)])
        np.testing.assert_array_equal(counts[(0, 1)], [1, 1])

    def test_disjoint_sets(self):
        counts = aggregate_counts([([0, 1], 1), ([2, 3], 0)])
        assert set(counts) == {(0, 1), (2, 3)}
        assert counts[(0, 1)] is not counts[(2, 3)]

    def test_universe_checked(self):
        with pytest.raises(IndexError):
            aggregate_counts([([0, 5], 0)], n_items=4)

    def test_totals(self):
        sessions = sample_sessions(PCMCGroundTruth(random_pcmc(4, 0)), subset_generator(4), 500, 1)
        counts = aggregate_counts(sessions)
        assert sum(c.sum() for c in counts.values()) == 500


class TestLikelihood:
    def test_uniform_four_set(self):
        Q = mnl_rate_matrix(np.ones(4))
        assert log_likelihood(Q, aggregate_counts([([0, 1, 2, 3], 2)])) == pytest.approx(-np.log(4))

    def test_empty(self):
        assert log_likelihood(rps_model(0.75), {}) == 0.0

    def test_truth_beats_wrong_alpha(self):
        sessions = sample_sessions(PCMCGroundTruth(rps_model(0.75)), subset_generator(3), 10_000, 0)
        counts = aggregate_counts(sessions)
        assert log_likelihood(rps_model(0.75), counts) >= log_likelihood(rps_model(0.6), counts)


@pytest.fixture(scope="module")
def pcmc_fit():
    Q = random_pcmc(4, 11)
    sessions = sample_sessions(PCMCGroundTruth(Q), subset_generator(4), 100_000, 3)
    return Q, fit_mle(aggregate_counts(sessions, 4), 4, restarts=3)


class TestFit:
    def test_recovers_pcmc(self, pcmc_fit):
        Q, fit = pcmc_fit
        assert max_tv(fit.Q, Q, 4) < 0.02

    def test_trace_monotone(self, pcmc_fit):
        trace = np.array(pcmc_fit[1].trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))

    def test_fitted_matrix_valid_and_floored(self, pcmc_fit):
        Q = pcmc_fit[1].Q
        assert validate_rate_matrix(Q)
        assert Q[~np.eye(4, dtype=bool)].min() >= 1e-3

    def test_recovers_mnl(self):
        w = np.array([0.5, 1.0, 2.0, 4.0])
        Q = mnl_rate_matrix(w)
        sessions = sample_sessions(PCMCGroundTruth(Q), subset_generator(4), 100_000, 5)
        fit = fit_mle(aggregate_counts(sessions, 4), 4, restarts=2)
        for S in all_subsets(4):
            luce = w[list(S)] / w[list(S)].sum()
            assert 0.5 * np.abs(choice_distribution(fit.Q, S) - luce).sum() < 0.02

    def test_smoothing_dominated(self):
        fit = fit_mle(aggregate_counts([([0, 1], 0)]), 2, smoothing=100.0, restarts=2)
        np.testing.assert_allclose(choice_distribution(fit.Q, [0, 1]), 0.5, atol=0.01)

    def test_restart_selection_is_argmax(self):
        sessions = sample_sessions(PCMCGroundTruth(random_pcmc(3, 2)), subset_generator(3), 2000, 1)
        fit = fit_mle(aggregate_counts(sessions, 3), 3, restarts=4)
        objs = np.array(fit.restart_objectives)
        assert fit.restart == int(np.nanargmax(objs))

    def test_seeded(self):
        counts = aggregate_counts(sample_sessions(PCMCGroundTruth(random_pcmc(3, 0)), subset_generator(3), 500, 0))
        np.testing.assert_array_equal(fit_mle(counts, 3, restarts=2).Q, fit_mle(counts, 3, restarts=2).Q)

    def test_checkpoint_round_trip(self):
        Q = random_pcmc(3, 1)
        back = MLEResult.from_checkpoint(MLEResult(Q, -1.0, 0).to_checkpoint())
        np.testing.assert_array_equal(back.Q, Q)
        p = back.predict_proba([item_session([2, 0], 1)])[0]
        np.testing.assert_allclose(p, choice_distribution(Q, [2, 0]))
