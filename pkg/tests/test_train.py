import csv
import dataclasses

import numpy as np
import pytest

from pcmcnet.data import FeatureSchema, Session, categorical, numeric
from pcmcnet.datagen import ContextOracle, context_generator, context_schema, sample_sessions
from pcmcnet.net import ArchitectureConfig
from pcmcnet.train import (
    SEARCH_SPACE,
    TrainingError,
    encoded_nll,
    random_search,
    sample_config,
    split_validation,
    train,
    write_leaderboard,
)

FAST = ArchitectureConfig(hidden_layers=1, nodes_per_layer=8, dropout=0.0, learning_rate=0.01, batch_size=8,
                          max_epochs=5, patience=None)


@pytest.fixture(scope="module")
def context_data():
    return sample_sessions(ContextOracle(), context_generator, 400, seed=3)


def uniform_sessions(n, size, seed):
    rng = np.random.default_rng(seed)
    return [Session({}, [{"x": float(rng.normal()), "k": str(rng.integers(3))} for _ in range(size)],
                    int(rng.integers(size))) for _ in range(n)]


UNIFORM_SCHEMA = FeatureSchema((), (numeric("x"), categorical("k", 3)))


class TestSplit:
    def test_partition(self):
        tr, va = split_validation(101, 0.1, 0)
        assert len(va) == 10
        assert sorted(np.concatenate([tr, va])) == list(range(101))

    def test_seeded(self):
        assert np.array_equal(split_validation(50, 0.2, 4)[1], split_validation(50, 0.2, 4)[1])
        assert not np.array_equal(split_validation(50, 0.2, 4)[1], split_validation(50, 0.2, 5)[1])


class TestTrain:
    def test_loss_decreases(self, context_data):
        res = train(context_data, context_schema(), FAST)
        assert res.log[-1]["train_nll"] < res.log[0]["train_nll"]
        assert [r["epoch"] for r in res.log] == [1, 2, 3, 4, 5]

    def test_returns_best_weights(self, context_data):
        cfg = dataclasses.replace(FAST, learning_rate=0.05)
        res = train(context_data, context_schema(), cfg)
        tr, va = split_validation(len(context_data), cfg.validation_fraction, cfg.seed)
        enc = res.model.encoder.encode([context_data[i] for i in va])
        assert encoded_nll(res.model, enc) == pytest.approx(res.best_val_nll, abs=1e-12)
        assert res.best_val_nll == min(r["val_nll"] for r in res.log)

    def test_deterministic(self, context_data):
        cfg = dataclasses.replace(FAST, dropout=0.3, max_epochs=3)
        a = train(context_data, context_schema(), cfg)
        b = train(context_data, context_schema(), cfg)
        assert [r["val_nll"] for r in a.log] == [r["val_nll"] for r in b.log]
        for k in a.model.params:
            np.testing.assert_array_equal(a.model.params[k], b.model.params[k])

    def test_early_stopping(self, context_data):
        cfg = dataclasses.replace(FAST, max_epochs=50, patience=2, min_delta=10.0)
        res = train(context_data, context_schema(), cfg)
        # the first epoch always improves on +inf, then two epochs without progress
        assert len(res.log) == 3

    def test_uniform_choices_floor(self):
        # choices carry no signal: validation NLL approaches log 4 but cannot go meaningfully below
        train_s = uniform_sessions(800, 4, 0)
        val_s = uniform_sessions(3000, 4, 1)
        cfg = dataclasses.replace(FAST, max_epochs=8)
        res = train(train_s, UNIFORM_SCHEMA, cfg, validation=val_s)
        assert np.log(4) - 0.02 < res.best_val_nll < np.log(4) + 0.05

    def test_all_singletons_rejected(self):
        s = [Session({}, [{"x": 1.0, "k": "0"}], 0)] * 5
        with pytest.raises(TrainingError):
            train(s, UNIFORM_SCHEMA, FAST)

    def test_refit_uses_all_sessions(self, context_data):
        cfg = dataclasses.replace(FAST, max_epochs=3, refit=True)
        res = train(context_data, context_schema(), cfg)
        assert len(res.log) == 3 + res.best_epoch

    def test_log_csv(self, context_data, tmp_path):
        res = train(context_data, context_schema(), dataclasses.replace(FAST, max_epochs=2))
        res.write_log(tmp_path / "log.csv")
        rows = list(csv.DictReader(open(tmp_path / "log.csv")))
        assert list(rows[0]) == ["epoch", "train_nll", "val_nll", "seconds"]
        assert len(rows) == 2


class TestSearch:
    def test_sample_within_space(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            cfg = sample_config(rng, FAST)
            for name, values in SEARCH_SPACE.items():
                assert getattr(cfg, name) in values

    def test_space_ranges(self):
        assert min(SEARCH_SPACE["learning_rate"]) == pytest.approx(1e-6)
        assert max(SEARCH_SPACE["learning_rate"]) == pytest.approx(1e-1)
        assert SEARCH_SPACE["batch_size"] == [1, 2, 4, 8, 16]
        assert SEARCH_SPACE["nodes_per_layer"] == [32, 64, 128, 256, 512]

    def test_budget_one(self, context_data):
        base = dataclasses.replace(FAST, max_epochs=1)
        best, board = random_search(context_data[:100], context_schema(), base, budget=1, seed=2)
        assert len(board) == 1
        assert board[0].config == best.to_dict()

    def test_reproducible_leaderboard(self, context_data, tmp_path):
        base = dataclasses.replace(FAST, max_epochs=1)
        kwargs = dict(budget=3, seed=5)
        _, a = random_search(context_data[:60], context_schema(), base, **kwargs)
        _, b = random_search(context_data[:60], context_schema(), base, **kwargs)
        write_leaderboard(tmp_path / "a.csv", a)
        write_leaderboard(tmp_path / "b.csv", b)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert [e.rank for e in a] == [1, 2, 3]
        assert a[0].val_nll <= a[1].val_nll <= a[2].val_nll
