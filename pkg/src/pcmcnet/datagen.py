"""Seeded ground-truth choice models and session samplers.

Every generator is a pure function of its parameters and seed. Session ``k`` of a
sample draws from its own stream ``default_rng([seed, k, ...])`` so datasets can be
generated in any order or in parallel with identical results.
"""

from __future__ import annotations

import itertools
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import solve_stationary, with_diagonal
from .data import (FeatureSchema, Session, categorical, item_schema, item_session, numeric,
                   session_items)

# --------------------------------------------------------------- protocols


class GroundTruth(Protocol):
    def distributions(self, sessions: Sequence[Session]) -> list[np.ndarray]: ...


SetGenerator = Callable[[np.random.Generator], tuple[dict, list[dict]]]


# ----------------------------------------------------------- index models

def rps_model(alpha: float) -> np.ndarray:
    """Stochastic rock-paper-scissors rate matrix, valid for 1/2 < alpha <= 1."""
    if not 0.5 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (1/2, 1], got {alpha}")
    b = 1.0 - alpha
    return np.array([[-1.0, b, alpha],
                     [alpha, -1.0, b],
                     [b, alpha, -1.0]])


def random_pcmc(n: int, seed: int, low: float = 0.1, high: float = 2.0) -> np.ndarray:
    """Rate matrix with i.i.d. Uniform(low, high) off-diagonal rates."""
    if n < 2:
        raise ValueError("random_pcmc needs n >= 2")
    if not 0 < low <= high:
        raise ValueError("rates must come from a positive interval")
    rates = np.random.default_rng(seed).uniform(low, high, size=(n, n))
    return with_diagonal(rates)


class PCMCGroundTruth:
    """Index-based PCMC over a finite universe; sessions use the ``item`` field."""

    kind = "pcmc"

    def __init__(self, Q):
        self.Q = np.asarray(Q, dtype=float)
        self.n = self.Q.shape[0]
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def distribution(self, items: Sequence[int]) -> np.ndarray:
        key = tuple(items)
        if key not in self._cache:
            idx = np.asarray(key)
            self._cache[key] = solve_stationary(with_diagonal(self.Q[np.ix_(idx, idx)]))
        return self._cache[key]

    def distributions(self, sessions):
        return [self.distribution(session_items(s)) for s in sessions]

    def schema(self) -> FeatureSchema:
        return item_schema(self.n)


def subset_generator(n_items: int, min_size: int = 2, max_size: int | None = None) -> SetGenerator:
    """Uniform over all subsets of the universe with a size in [min_size, max_size]."""
    max_size = n_items if max_size is None else max_size
    subsets = [c for k in range(min_size, max_size + 1) for c in itertools.combinations(range(n_items), k)]

    def gen(rng):
        items = subsets[int(rng.integers(len(subsets)))]
        return {}, [{"item": str(i)} for i in items]

    return gen


# ----------------------------------------------------------- context oracle

A_POINT = (4.0, 6.0)
B_POINT = (6.0, 4.0)
CONTEXT_LOW, CONTEXT_HIGH = 1.0, 9.0


def context_schema() -> FeatureSchema:
    return FeatureSchema((), (numeric("x1", CONTEXT_LOW, CONTEXT_HIGH), numeric("x2", CONTEXT_LOW, CONTEXT_HIGH)))


class ContextOracle:
    """A two-attribute PCMC with dominance-boosted rates, used as non-IIA ground truth.

    The rate from x to y is ``exp(beta * (v(y) - v(x))) + gamma * [y dominates x]``
    with ``v(x) = x1 + x2``; y dominates x when it is at least as good on both
    attributes and differs from x. A decoy dominated by one alternative feeds that
    alternative, which produces attraction-style context effects.

    This stands in for a psychological accumulator model; any object with a
    ``distributions(sessions)`` method can be used instead (see
    :class:`FunctionOracle`).
    """

    kind = "context-oracle"

    def __init__(self, beta: float = 0.1, gamma: float = 20.0):
        self.beta = beta
        self.gamma = gamma

    def rates(self, points) -> np.ndarray:
        X = np.asarray(points, dtype=float)
        v = X.sum(axis=1)
        Q = np.exp(self.beta * (v[None, :] - v[:, None]))
        ge = np.all(X[None, :, :] >= X[:, None, :], axis=2)
        same = np.all(X[None, :, :] == X[:, None, :], axis=2)
        Q = Q + self.gamma * (ge & ~same)
        return with_diagonal(Q)

    def distribution(self, points) -> np.ndarray:
        return solve_stationary(self.rates(points))

    def __call__(self, c) -> np.ndarray:
        """Distribution over (a, b, c) for a third alternative at ``c``."""
        c = np.asarray(c, dtype=float)
        if c.shape != (2,) or np.any(c < CONTEXT_LOW) or np.any(c > CONTEXT_HIGH):
            raise ValueError(f"c must lie in [{CONTEXT_LOW}, {CONTEXT_HIGH}]^2, got {c}")
        return self.distribution(np.array([A_POINT, B_POINT, c]))

    def batch(self, C) -> np.ndarray:
        return np.array([self(c) for c in np.asarray(C, dtype=float)])

    def distributions(self, sessions):
        return [self.distribution([[a["x1"], a["x2"]] for a in s.alternatives]) for s in sessions]


class FunctionOracle:
    """Wrap a user-supplied ``c -> P(a), P(b), P(c)`` function as a context ground truth.

    This is the hook for plugging in an external context model.
    """

    kind = "context-function"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def __call__(self, c):
        return np.asarray(self.fn(np.asarray(c, dtype=float)), dtype=float)

    def batch(self, C):
        return np.array([self(c) for c in np.asarray(C, dtype=float)])

    def distributions(self, sessions):
        return [self([s.alternatives[2]["x1"], s.alternatives[2]["x2"]]) for s in sessions]


def context_session(c, choice: int = 0) -> Session:
    return Session({}, [{"x1": A_POINT[0], "x2": A_POINT[1]}, {"x1": B_POINT[0], "x2": B_POINT[1]},
                        {"x1": float(c[0]), "x2": float(c[1])}], choice)


def context_generator(rng: np.random.Generator):
    c = rng.uniform(CONTEXT_LOW, CONTEXT_HIGH, size=2)
    return {}, context_session(c).alternatives


def sample_context_points(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 7]).uniform(CONTEXT_LOW, CONTEXT_HIGH, size=(n, 2))


def discretize_context(sessions: Sequence[Session], bins: int = 8) -> list[Session]:
    """Index-based view of context sessions: a -> 0, b -> 1, c -> 2 + its bin cell.

    Bins are equal-width over [1, 9] on each attribute.
    """
    edges = np.linspace(CONTEXT_LOW, CONTEXT_HIGH, bins + 1)[1:-1]
    out = []
    for s in sessions:
        c = s.alternatives[2]
        i = int(np.searchsorted(edges, c["x1"], side="right"))
        j = int(np.searchsorted(edges, c["x2"], side="right"))
        out.append(item_session([0, 1, 2 + i * bins + j], s.choice))
    return out


# --------------------------------------------------------------- MNL / misc

class MNLGroundTruth:
    """Linear-in-features logit on named numeric alternative fields."""

    kind = "mnl"

    def __init__(self, beta: Sequence[float], fields: Sequence[str]):
        self.beta = np.asarray(beta, dtype=float)
        self.fields = list(fields)

    def distributions(self, sessions):
        out = []
        for s in sessions:
            u = np.array([[a[f] for f in self.fields] for a in s.alternatives]) @ self.beta
            e = np.exp(u - u.max())
            out.append(e / e.sum())
        return out


class UniformGroundTruth:
    kind = "uniform"

    def distributions(self, sessions):
        return [np.full(s.size, 1.0 / s.size) for s in sessions]


# ---------------------------------------------------------------- sampling

def sample_sessions(model: GroundTruth, generator: SetGenerator, n: int, seed: int) -> list[Session]:
    """Draw ``n`` choice sets from ``generator`` and a choice for each from ``model``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sets = []
    for k in range(n):
        ind, alts = generator(np.random.default_rng([seed, k, 0]))
        sets.append(Session(ind, alts, 0))
    _draw_choices(sets, model.distributions(sets), seed)
    return sets


def _draw_choices(sets: list[Session], probs: list[np.ndarray], seed: int) -> None:
    for k, (s, p) in enumerate(zip(sets, probs)):
        u = np.random.default_rng([seed, k, 1]).random()
        s.choice = int(min(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"), s.size - 1))


# ----------------------------------------------------------------- airline

def airline_schema() -> FeatureSchema:
    """Itinerary-choice fields with their ranges and cardinalities."""
    return FeatureSchema(
        (
            categorical("origin_destination", 97, [f"OD{k:03d}" for k in range(97)]),
            categorical("search_office", 11, [f"OFF{k:02d}" for k in range(11)]),
            numeric("departure_weekday", 0, 6),
            numeric("stay_saturday", 0, 1),
            numeric("continental_trip", 0, 1),
            numeric("domestic_trip", 0, 1),
            numeric("days_to_departure", 0, 343),
        ),
        (
            categorical("airline", 63, [f"AL{k:02d}" for k in range(63)]),
            numeric("price", 77.15, 16781.5),
            numeric("stay_duration", 121, 434000),
            numeric("trip_duration", 105, 4314),
            numeric("number_connections", 2, 6),
            numeric("number_airlines", 1, 4),
            numeric("outbound_departure_time", 0, 84000),
            numeric("outbound_arrival_time", 0, 84000),
        ),
    )


def _loguniform(rng, low, high, size=None):
    return np.exp(rng.uniform(np.log(low), np.log(high), size=size))


def _draw_value(rng, f, size=None):
    lo, hi = f.low, f.high
    if float(lo).is_integer() and float(hi).is_integer() and hi - lo <= 400:
        return rng.integers(int(lo), int(hi) + 1, size=size).astype(float)
    return rng.uniform(lo, hi, size=size)


def airline_set_generator(schema: FeatureSchema, max_set_size: int = 50,
                          singleton_prob: float | None = None) -> SetGenerator:
    """Random booking sessions whose values respect the schema ranges.

    Set sizes are Uniform{1..max_set_size}; with ``singleton_prob`` the size is 1
    with that probability and Uniform{2..max_set_size} otherwise.
    """
    if not 1 <= max_set_size <= 50:
        raise ValueError("max_set_size must be in [1, 50]")

    def gen(rng):
        if singleton_prob is None or max_set_size == 1:
            n = int(rng.integers(1, max_set_size + 1))
        else:
            n = 1 if rng.random() < singleton_prob else int(rng.integers(2, max_set_size + 1))
        ind = {}
        for f in schema.individual_fields:
            if f.kind == "categorical":
                ind[f.name] = f.levels[int(rng.integers(f.cardinality))]
            else:
                ind[f.name] = float(_draw_value(rng, f))
        cols = {}
        for f in schema.alternative_fields:
            if f.kind == "categorical":
                cols[f.name] = [f.levels[int(k)] for k in rng.integers(f.cardinality, size=n)]
            elif f.name == "price":
                # itineraries of one search share a price level
                base = _loguniform(rng, f.low * 2, f.high / 4)
                cols[f.name] = np.clip(base * np.exp(rng.normal(0.0, 0.4, size=n)), f.low, f.high)
            elif f.name in ("stay_duration", "trip_duration"):
                cols[f.name] = _loguniform(rng, f.low, f.high, size=n)
            else:
                cols[f.name] = _draw_value(rng, f, size=n)
        alts = [{name: (v[k] if isinstance(v, list) else float(v[k])) for name, v in cols.items()}
                for k in range(n)]
        return ind, alts

    return gen


class PlantedNetGroundTruth:
    """Random-weight PCMC-Net used to generate choices with learnable non-IIA structure."""

    kind = "planted-pcmc-net"

    def __init__(self, model):
        self.model = model

    def distributions(self, sessions):
        return self.model.predict_proba(sessions)


def planted_model(schema: FeatureSchema, sessions: Sequence[Session], seed: int,
                  hidden_layers: int = 1, nodes: int = 16, scale: float = 3.0):
    """A PCMC-Net with N(0, 1) embeddings and output weights multiplied by ``scale``."""
    from .net import ArchitectureConfig, Encoder, PCMCNet

    cfg = ArchitectureConfig(hidden_layers=hidden_layers, nodes_per_layer=nodes, dropout=0.0,
                             epsilon=0.5, seed=seed)
    model = PCMCNet(schema, cfg, Encoder.fit(schema, sessions))
    rng = np.random.default_rng([seed, 3])
    last = f"layer{hidden_layers}"
    for name, p in model.params.items():
        if name.startswith("emb."):
            model.params[name] = rng.normal(0.0, 1.0, size=p.shape)
        elif name.endswith(".b"):
            model.params[name] = rng.normal(0.0, 0.5, size=p.shape)
    model.params[f"{last}.W"] = model.params[f"{last}.W"] * scale
    return model


def airline_synthetic(schema: FeatureSchema | None = None, n_sessions: int = 33951,
                      max_set_size: int = 50, seed: int = 0, singleton_prob: float | None = None,
                      planted_scale: float = 30.0) -> tuple[list[Session], PlantedNetGroundTruth]:
    """Airline-style sessions with choices drawn from a planted PCMC-Net."""
    schema = airline_schema() if schema is None else schema
    gen = airline_set_generator(schema, max_set_size, singleton_prob)
    sets = []
    for k in range(n_sessions):
        ind, alts = gen(np.random.default_rng([seed, k, 0]))
        sets.append(Session(ind, alts, 0))
    truth = PlantedNetGroundTruth(planted_model(schema, sets, seed, scale=planted_scale))
    _draw_choices(sets, truth.distributions(sets), seed)
    return sets, truth


def rps_sessions(alpha: float, n: int, seed: int) -> list[Session]:
    return sample_sessions(PCMCGroundTruth(rps_model(alpha)), subset_generator(3), n, seed)
