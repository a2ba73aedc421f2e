import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcmcnet.baselines import (MNL, SeparationWarning, UniformModel, cheapest, fit_mnl, mnl_prob,
                               rank_cheapest, rank_shortest, rank_uniform)
from pcmcnet.checkpoints import model_from_checkpoint
from pcmcnet.data import FeatureSchema, SchemaError, Session, categorical, numeric
from pcmcnet.datagen import MNLGroundTruth, sample_sessions
from pcmcnet.metrics import top_n

SCHEMA = FeatureSchema((), (numeric("x1"), numeric("x2")))
BETA_TRUE = np.array([1.0, -0.5])


def feature_generator(rng):
    k = int(rng.integers(2, 7))
    x = rng.normal(size=(k, 2))
    return {}, [{"x1": float(a), "x2": float(b)} for a, b in x]


def feature_sessions(n, seed):
    return sample_sessions(MNLGroundTruth(BETA_TRUE, ["x1", "x2"]), feature_generator, n, seed)


@pytest.fixture(scope="module")
def fitted():
    return fit_mnl(feature_sessions(100_000, 0), SCHEMA)


def session(*xs, choice=0):
    return Session({}, [{"x1": float(a), "x2": float(b)} for a, b in xs], choice)


class TestMnlProb:
    def test_zero_beta_uniform(self):
        np.testing.assert_allclose(mnl_prob([0.0, 0.0], np.random.default_rng(0).normal(size=(5, 2))), 0.2)

    def test_identical_alternatives_uniform(self):
        np.testing.assert_allclose(mnl_prob([1.0, 2.0], np.ones((4, 2))), 0.25)

    @given(st.floats(-50, 50))
    def test_shift_invariance(self, c):
        X = np.array([[0.1, 1.0], [0.5, 1.0], [-0.3, 1.0]])
        base = mnl_prob([2.0, 0.0], X)
        np.testing.assert_allclose(mnl_prob([2.0, c], X), base, atol=1e-12)

    def test_large_utilities_finite(self):
        p = mnl_prob([1.0], np.array([[1000.0], [999.0]]))
        np.testing.assert_allclose(p, [1 / (1 + np.exp(-1)), 1 / (1 + np.e)])


class TestFitMnl:
    def test_recovers_held_out_probabilities(self, fitted):
        held_out = feature_sessions(2000, 1)
        truth = MNLGroundTruth(BETA_TRUE, ["x1", "x2"]).distributions(held_out)
        tv = [0.5 * np.abs(p - q).sum() for p, q in zip(fitted.predict_proba(held_out), truth)]
        assert max(tv) < 0.01

    def test_converged(self, fitted):
        assert fitted.converged
        assert np.all(np.diff(fitted.trace) >= -1e-15)

    def test_iia(self, fitted):
        ratios = []
        for third in [(0.0, 0.0), (3.0, -2.0), (-1.0, 5.0)]:
            p = fitted.predict_proba([session((0.5, 0.2), (-0.4, 1.0), third)])[0]
            ratios.append(p[0] / p[1])
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)

    def test_regularity(self, fitted):
        rng = np.random.default_rng(3)
        for _ in range(50):
            xs = rng.normal(size=(int(rng.integers(2, 6)), 2))
            small = fitted.predict_proba([session(*xs)])[0]
            big = fitted.predict_proba([session(*xs, rng.normal(size=2))])[0]
            assert np.all(big[:-1] <= small + 1e-15)

    def test_restarts_agree(self):
        data = feature_sessions(5000, 2)
        probe = feature_sessions(200, 3)
        a = fit_mnl(data, SCHEMA, beta0=[5.0, 5.0]).predict_proba(probe)
        b = fit_mnl(data, SCHEMA, beta0=[-3.0, 2.0]).predict_proba(probe)
        assert max(0.5 * np.abs(p - q).sum() for p, q in zip(a, b)) < 1e-4

    def test_separation_warns(self):
        data = [session((1.0, 0.0), (0.0, 0.0), choice=0), session((0.0, 0.0), (2.0, 0.0), choice=1)]
        with pytest.warns(SeparationWarning):
            fit_mnl(data, SCHEMA, max_iter=500)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            fit_mnl([], SCHEMA)

    def test_categorical_one_hot_drops_first_level(self):
        schema = FeatureSchema((), (categorical("c", 3, ["a", "b", "z"]),))
        data = [Session({}, [{"c": "a"}, {"c": "b"}, {"c": "z"}], k % 3) for k in range(30)]
        model = fit_mnl(data, schema)
        assert model.features.names == ["c=b", "c=z"]
        np.testing.assert_allclose(model.predict_proba(data[:1])[0], 1 / 3, atol=1e-6)

    def test_checkpoint_round_trip(self, fitted):
        back = model_from_checkpoint(fitted.to_checkpoint())
        assert isinstance(back, MNL)
        probe = feature_sessions(20, 4)
        for p, q in zip(back.predict_proba(probe), fitted.predict_proba(probe)):
            np.testing.assert_array_equal(p, q)


def priced(prices, durations=None):
    durations = durations or [1.0] * len(prices)
    return Session({}, [{"price": float(p), "trip_duration": float(d)} for p, d in zip(prices, durations)], 0)


class TestRankers:
    def test_cheapest_example(self):
        assert rank_cheapest(priced([300, 100, 200])) == [1, 2, 0]

    def test_shortest(self):
        assert rank_shortest(priced([1, 1, 1], [5.0, 2.0, 9.0])) == [1, 0, 2]

    def test_ties_resolved_by_rng(self):
        orders = {tuple(rank_cheapest(priced([7, 7, 7]), np.random.default_rng(k))) for k in range(40)}
        assert len(orders) > 1
        assert all(sorted(o) == [0, 1, 2] for o in orders)

    def test_uniform_is_permutation(self):
        assert sorted(rank_uniform(priced([1, 2, 3, 4]), np.random.default_rng(0))) == [0, 1, 2, 3]

    def test_missing_field(self):
        with pytest.raises(SchemaError):
            cheapest().scores([Session({}, [{"x": 1.0}, {"x": 2.0}], 0)])

    def test_cheapest_scores_rank_lowest_first(self):
        assert int(np.argmax(cheapest().scores([priced([300, 100, 200])])[0])) == 1

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 8))
    def test_uniform_top1(self, n):
        rng = np.random.default_rng(n)
        sessions = [Session({}, [{}] * n, int(rng.integers(n))) for _ in range(4000)]
        assert top_n(UniformModel(), sessions, 1, seed=n) == pytest.approx(1 / n, abs=0.03)

    def test_uniform_probabilities(self):
        np.testing.assert_allclose(UniformModel().predict_proba([priced([1, 2, 3, 4])])[0], 0.25)
