"""Finite-difference checks for every autodiff primitive and for the PCMC-Net loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import FeatureSchema, Session, categorical, numeric

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4


def _away_from_zero(rng, shape, low=0.1, high=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _rate_rows(rng, b, n):
    return rng.uniform(0.2, 2.0, size=(b, n * (n - 1)))


def _reduce(out: ad.Var, weights: np.ndarray) -> ad.Var:
    return ad.sum_all(ad.mul(out, out.tape.constant(weights)))


def _case(fn: Callable, make_inputs: Callable) -> Callable:
    """Wrap a primitive as (rng) -> (build, arrays) with a random linear read-out."""

    def setup(rng):
        arrays = make_inputs(rng)
        probe = fn(*[ad.Tape(record=False).constant(a) for a in arrays])
        weights = rng.normal(size=probe.shape)
        return (lambda *vs: _reduce(fn(*vs), weights)), arrays

    return setup


def _well_conditioned(rng, n):
    return rng.normal(size=(n, n)) + n * np.eye(n)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _case(ad.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "add": _case(ad.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "sub": _case(ad.sub, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul": _case(ad.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "scale": _case(lambda x: ad.scale(x, -1.7), lambda r: [r.normal(size=(5,))]),
    "add_bias": _case(ad.add_bias, lambda r: [r.normal(size=(4, 3)), r.normal(size=(3,))]),
    "concat": _case(lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4))]),
    "embedding_lookup": _case(lambda t: ad.embedding_lookup(t, [0, 2, 2, 4, 1]), lambda r: [r.normal(size=(5, 3))]),
    "gather_rows": _case(lambda x: ad.gather_rows(x, [3, 0, 3, 1]), lambda r: [r.normal(size=(4, 2))]),
    "slice_rows": _case(lambda x: ad.slice_rows(x, 1, 3), lambda r: [r.normal(size=(4, 2))]),
    "reshape": _case(lambda x: ad.reshape(x, (2, 6)), lambda r: [r.normal(size=(3, 4))]),
    "pick": _case(lambda x: ad.pick(x, [2, 0, 1]), lambda r: [r.normal(size=(3, 3))]),
    "sum": _case(ad.sum_all, lambda r: [r.normal(size=(3, 2))]),
    "mean": _case(ad.mean_all, lambda r: [r.normal(size=(3, 2))]),
    "relu": _case(ad.relu, lambda r: [_away_from_zero(r, (4, 3))]),
    "leaky_relu": _case(lambda x: ad.leaky_relu(x, 0.01), lambda r: [_away_from_zero(r, (4, 3))]),
    "sigmoid": _case(ad.sigmoid, lambda r: [r.normal(scale=3.0, size=(4, 3))]),
    "tanh": _case(ad.tanh, lambda r: [r.normal(size=(4, 3))]),
    "dropout": _case(lambda x: ad.dropout(x, 0.5, True, np.random.Generator(np.random.Philox(key=7))),
                     lambda r: [r.normal(size=(4, 3))]),
    "clamp_min_zero_plus_const": _case(lambda x: ad.clamp_min_zero_plus_const(x, 0.5),
                                       lambda r: [_away_from_zero(r, (6,))]),
    "log": _case(lambda x: ad.log_floor(x)[0], lambda r: [r.uniform(0.2, 3.0, size=(5,))]),
    "offdiag_to_matrix": _case(lambda x: ad.offdiag_to_matrix(x, 3), lambda r: [r.normal(size=(2, 6))]),
    "row_neg_sum_diagonal": _case(ad.row_neg_sum_diagonal, lambda r: [r.normal(size=(2, 4, 4))]),
    "replace_last_column_ones": _case(ad.replace_last_column_ones, lambda r: [r.normal(size=(3, 3))]),
    "linear_solve": _case(ad.linear_solve, lambda r: [_well_conditioned(r, 4), r.normal(size=(4,))]),
    "linear_solve_batched": _case(ad.linear_solve, lambda r: [np.stack([_well_conditioned(r, 3) for _ in range(2)]),
                                                              r.normal(size=(2, 3))]),
    "stationary": _case(lambda x: ad.stationary(x, 4), lambda r: [_rate_rows(r, 2, 4)]),
}


@dataclass
class CheckRow:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_primitive(name: str, trials: int = 100, seed: int = 0, h: float = 1e-5) -> CheckRow:
    setup = PRIMITIVES[name]
    worst = 0.0
    for t in range(trials):
        build, arrays = setup(np.random.default_rng([seed, t]))
        worst = max(worst, ad.check_gradients(build, arrays, h))
    return CheckRow(name, trials, worst, PRIMITIVE_TOL)


def _small_schema() -> FeatureSchema:
    return FeatureSchema((categorical("segment", 3), numeric("age")),
                         (numeric("x1"), numeric("x2"), categorical("brand", 4)))


def _random_session(rng, n) -> Session:
    return Session({"segment": str(rng.integers(3)), "age": float(rng.normal())},
                   [{"x1": float(rng.normal()), "x2": float(rng.normal()), "brand": str(rng.integers(4))}
                    for _ in range(n)], int(rng.integers(n)))


def end_to_end_error(seed: int, n_alternatives: int = 3, h: float = 1e-5, activation: str = "tanh") -> float:
    """Relative error of the PCMC-Net session loss gradient against finite differences."""
    from .net import ArchitectureConfig, Encoder, PCMCNet

    rng = np.random.default_rng([seed, 11])
    schema = _small_schema()
    pool = [_random_session(rng, n_alternatives) for _ in range(8)]
    session = pool[0]
    cfg = ArchitectureConfig(hidden_layers=2, nodes_per_layer=4, activation=activation, dropout=0.0,
                             epsilon=0.5, seed=seed)
    model = PCMCNet(schema, cfg, Encoder.fit(schema, pool))
    # larger-than-default embeddings so they actually move the loss; a positive
    # output bias keeps every rate above the clamp, where the loss is smooth
    for k in model.params:
        if k.startswith("emb."):
            model.params[k] = rng.normal(size=model.params[k].shape)
    last = f"layer{len(model.widths) - 1}.b"
    model.params[last] = model.params[last] + 2.0
    enc = model.encoder.encode([session])
    batch = np.array([0])
    tape = ad.Tape()
    loss, _ = model.batch_loss(tape, enc, batch)
    grads = tape.backward(loss)

    names = sorted(model.params)

    def f(arrays):
        saved = model.params
        model.params = dict(zip(names, arrays))
        try:
            return float(model.batch_loss(ad.Tape(record=False), enc, batch)[0].value)
        finally:
            model.params = saved

    numeric_grads = ad.numeric_gradient(f, [model.params[k] for k in names], h)
    g_all = np.concatenate([grads[k].ravel() for k in names])
    n_all = np.concatenate([g.ravel() for g in numeric_grads])
    return ad.relative_error(g_all, n_all)


def check_end_to_end(trials: int = 100, seed: int = 0) -> CheckRow:
    worst = max(end_to_end_error(seed * 100003 + t) for t in range(trials))
    return CheckRow("pcmc_net_loss", trials, worst, END_TO_END_TOL)


def run_all(trials: int = 100, seed: int = 0) -> list[CheckRow]:
    rows = [check_primitive(name, trials, seed) for name in PRIMITIVES]
    rows.append(check_end_to_end(trials, seed))
    return rows
