"""PCMC-Net: transition rates as a neural function of the features of a pair.

For a session with individual ``I`` and alternatives ``S_1..S_n`` the model
computes representations, feeds every ordered pair ``rho(I) + rho(S_i) + rho(S_j)``
(concatenation) through a fully connected network ``f``, turns the outputs into
rates ``max(0, f) + eps`` and returns the stationary distribution of the
resulting chain.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import with_diagonal
from .data import CATEGORICAL, NUMERIC, FeatureSchema, SchemaError, Session

CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-30


@dataclass
class ArchitectureConfig:
    hidden_layers: int = 2
    nodes_per_layer: int = 512
    activation: str = "leaky_relu"
    epsilon: float = 0.5
    dropout: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    patience: int | None = 5
    min_delta: float = 0.01
    validation_fraction: float = 0.1
    seed: int = 0
    embedding_cap: int = 50
    categorical_encoding: str = "embedding"
    numeric_passthrough: bool = True
    standardize: bool = True
    refit: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.categorical_encoding not in ("embedding", "onehot"):
            raise ValueError(f"unknown categorical encoding {self.categorical_encoding!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def synthetic_preset(**overrides) -> ArchitectureConfig:
    """Settings of the context-effect experiment: Adam, one set per step, no dropout, 100 epochs."""
    base = dict(hidden_layers=3, nodes_per_layer=16, activation="leaky_relu", epsilon=0.5,
                dropout=0.0, learning_rate=1e-3, batch_size=1, max_epochs=100, patience=None)
    base.update(overrides)
    return ArchitectureConfig(**base)


def airline_preset(**overrides) -> ArchitectureConfig:
    """Best values of the airline hyperparameter search."""
    base = dict(hidden_layers=2, nodes_per_layer=512, activation="leaky_relu", epsilon=0.5,
                dropout=0.5, learning_rate=1e-3, batch_size=16, max_epochs=100, patience=5,
                min_delta=0.01)
    base.update(overrides)
    return ArchitectureConfig(**base)


def embedding_dim(cardinality: int, cap: int = 50) -> int:
    return min(math.ceil(cardinality / 2), cap)


# ------------------------------------------------------------------ encoding

@dataclass
class Encoded:
    """Column-major numeric view of a list of sessions."""

    ind_num: np.ndarray
    ind_cat: np.ndarray
    alt_num: np.ndarray
    alt_cat: np.ndarray
    offsets: np.ndarray
    choice: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def __len__(self) -> int:
        return len(self.choice)


class Encoder:
    """Maps raw feature values to numbers: level codes and standardized numerics.

    Unknown categorical levels map to the reserved last code (out of vocabulary).
    """

    def __init__(self, schema: FeatureSchema, vocab: dict[str, list[str]],
                 means: dict[str, float], stds: dict[str, float]):
        self.schema = schema
        self.vocab = vocab
        self.means = means
        self.stds = stds
        self._codes = {name: {lvl: k for k, lvl in enumerate(levels)} for name, levels in vocab.items()}

    @classmethod
    def fit(cls, schema: FeatureSchema, sessions: Sequence[Session], standardize: bool = True) -> "Encoder":
        vocab, means, stds = {}, {}, {}
        groups = (("ind", schema.individual_fields, lambda s: [s.individual]),
                  ("alt", schema.alternative_fields, lambda s: s.alternatives))
        for prefix, fields, records in groups:
            for f in fields:
                key = f"{prefix}.{f.name}"
                if f.kind == CATEGORICAL:
                    if f.levels is not None:
                        vocab[key] = list(f.levels)
                    else:
                        seen = sorted({r[f.name] for s in sessions for r in records(s)})
                        vocab[key] = seen[:f.cardinality]
                else:
                    vals = np.array([r[f.name] for s in sessions for r in records(s)], dtype=float)
                    if standardize and vals.size:
                        sd = float(vals.std())
                        means[key], stds[key] = float(vals.mean()), sd if sd > 0 else 1.0
                    else:
                        means[key], stds[key] = 0.0, 1.0
        return cls(schema, vocab, means, stds)

    def _fields(self, prefix: str):
        fields = self.schema.individual_fields if prefix == "ind" else self.schema.alternative_fields
        num = [f for f in fields if f.kind == NUMERIC]
        cat = [f for f in fields if f.kind == CATEGORICAL]
        return num, cat

    def _encode_records(self, prefix: str, records: list[dict]):
        num, cat = self._fields(prefix)
        X = np.empty((len(records), len(num)))
        C = np.empty((len(records), len(cat)), dtype=np.intp)
        for k, f in enumerate(num):
            key = f"{prefix}.{f.name}"
            try:
                col = np.array([r[f.name] for r in records], dtype=float)
            except KeyError as exc:
                raise SchemaError(f"missing field {f.name!r}") from exc
            X[:, k] = (col - self.means[key]) / self.stds[key]
        for k, f in enumerate(cat):
            key = f"{prefix}.{f.name}"
            codes = self._codes[key]
            oov = f.cardinality
            try:
                C[:, k] = [codes.get(r[f.name], oov) for r in records]
            except KeyError as exc:
                raise SchemaError(f"missing field {f.name!r}") from exc
        return X, C

    def encode(self, sessions: Sequence[Session]) -> Encoded:
        ind_num, ind_cat = self._encode_records("ind", [s.individual for s in sessions])
        alts = [a for s in sessions for a in s.alternatives]
        alt_num, alt_cat = self._encode_records("alt", alts)
        offsets = np.zeros(len(sessions) + 1, dtype=np.intp)
        offsets[1:] = np.cumsum([s.size for s in sessions])
        choice = np.array([s.choice for s in sessions], dtype=np.intp)
        return Encoded(ind_num, ind_cat, alt_num, alt_cat, offsets, choice)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "means": self.means, "stds": self.stds}

    @classmethod
    def from_dict(cls, schema: FeatureSchema, d: dict) -> "Encoder":
        return cls(schema, d["vocab"], d["means"], d["stds"])


# --------------------------------------------------------------------- model

_PAIR_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Ordered pairs (i, j), i != j, in row-major order."""
    if n not in _PAIR_CACHE:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        _PAIR_CACHE[n] = (i, j)
    return _PAIR_CACHE[n]


@dataclass
class _Group:
    size: int
    members: np.ndarray      # positions within the batch
    start: int               # first pair row of this group
    stop: int


class PCMCNet:
    """Amortized PCMC model.

    Parameters live in ``self.params`` (name -> array). Use :meth:`predict_proba`
    for inference and :func:`pcmcnet.train.train` to fit.
    """

    kind = "pcmc-net"

    def __init__(self, schema: FeatureSchema, config: ArchitectureConfig, encoder: Encoder,
                 params: dict[str, np.ndarray] | None = None):
        self.schema = schema
        self.config = config
        self.encoder = encoder
        self._ind_num, self._ind_cat = encoder._fields("ind")
        self._alt_num, self._alt_cat = encoder._fields("alt")
        self.d0 = self._rep_dim(self._ind_num, self._ind_cat)
        self.da = self._rep_dim(self._alt_num, self._alt_cat)
        if self.da == 0:
            raise SchemaError("alternatives need at least one feature")
        self.widths = [config.nodes_per_layer] * config.hidden_layers + [1]
        self.params = self._init_params() if params is None else {k: np.asarray(v, dtype=float)
                                                                  for k, v in params.items()}
        self._check_params()

    # -- structure

    def _cat_dim(self, f) -> int:
        if self.config.categorical_encoding == "onehot":
            return f.cardinality
        return embedding_dim(f.cardinality, self.config.embedding_cap)

    def _rep_dim(self, num, cat) -> int:
        d = len(num) if self.config.numeric_passthrough else 0
        return d + sum(self._cat_dim(f) for f in cat)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        if self.config.categorical_encoding == "embedding":
            for prefix, cat in (("ind", self._ind_cat), ("alt", self._alt_cat)):
                for f in cat:
                    shapes[f"emb.{prefix}.{f.name}"] = (f.cardinality + 1, self._cat_dim(f))
        fan_in = self.d0 + 2 * self.da
        for k, w in enumerate(self.widths):
            shapes[f"layer{k}.W"] = (fan_in, w)
            shapes[f"layer{k}.b"] = (w,)
            fan_in = w
        return shapes

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.startswith("emb."):
                params[name] = rng.normal(0.0, 0.01, size=shape)
            elif name.endswith(".W"):
                bound = math.sqrt(6.0 / shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def _check_params(self):
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            raise SchemaError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise SchemaError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- representation

    def _represent(self, tape: ad.Tape, prefix: str, num: np.ndarray, cat: np.ndarray) -> ad.Var | None:
        fields_num = self._ind_num if prefix == "ind" else self._alt_num
        fields_cat = self._ind_cat if prefix == "ind" else self._alt_cat
        parts = []
        if self.config.numeric_passthrough and fields_num:
            parts.append(tape.constant(num))
        for k, f in enumerate(fields_cat):
            if self.config.categorical_encoding == "onehot":
                table = np.vstack([np.eye(f.cardinality), np.zeros((1, f.cardinality))])
                parts.append(tape.constant(table[cat[:, k]]))
            else:
                table = tape.param(f"emb.{prefix}.{f.name}", self.params[f"emb.{prefix}.{f.name}"])
                parts.append(ad.embedding_lookup(table, cat[:, k]))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def represent_alternatives(self, sessions: Sequence[Session]) -> np.ndarray:
        enc = self.encoder.encode(sessions)
        return self._represent(ad.Tape(record=False), "alt", enc.alt_num, enc.alt_cat).value

    def represent_individuals(self, sessions: Sequence[Session]) -> np.ndarray:
        enc = self.encoder.encode(sessions)
        rep = self._represent(ad.Tape(record=False), "ind", enc.ind_num, enc.ind_cat)
        return np.zeros((len(sessions), 0)) if rep is None else rep.value

    # -- forward

    def _rates(self, tape: ad.Tape, enc: Encoded, batch: np.ndarray, train: bool,
               rng: np.random.Generator | None) -> tuple[ad.Var | None, list[_Group]]:
        """Clamped rates for every ordered pair of every multi-alternative session in ``batch``."""
        batch = np.asarray(batch, dtype=np.intp)
        sizes = enc.sizes[batch]
        starts = enc.offsets[batch]
        # rows of the batch's alternatives, session after session
        local_off = np.zeros(len(batch) + 1, dtype=np.intp)
        local_off[1:] = np.cumsum(sizes)
        rows = np.repeat(starts - local_off[:-1], sizes) + np.arange(local_off[-1])

        groups: list[_Group] = []
        gi, gj, gs = [], [], []
        p = 0
        for n in np.unique(sizes):
            if n < 2:
                continue
            members = np.flatnonzero(sizes == n)
            I, J = _pairs(int(n))
            base = local_off[members][:, None]
            gi.append((base + I).ravel())
            gj.append((base + J).ravel())
            gs.append(np.repeat(members, I.size))
            groups.append(_Group(int(n), members, p, p + members.size * I.size))
            p += members.size * I.size
        if not groups:
            return None, []
        gi, gj, gs = np.concatenate(gi), np.concatenate(gj), np.concatenate(gs)

        A = self._represent(tape, "alt", enc.alt_num[rows], enc.alt_cat[rows])
        Z = self._represent(tape, "ind", enc.ind_num[batch], enc.ind_cat[batch])

        # First layer on R_ij = rho(I) + rho(S_i) + rho(S_j) (concatenation), computed
        # blockwise: project each representation once, then gather per pair.
        W = tape.param("layer0.W", self.params["layer0.W"])
        d0, da = self.d0, self.da
        h = ad.gather_rows(A @ ad.slice_rows(W, d0, d0 + da), gi)
        h = h + ad.gather_rows(A @ ad.slice_rows(W, d0 + da, d0 + 2 * da), gj)
        if Z is not None:
            h = h + ad.gather_rows(Z @ ad.slice_rows(W, 0, d0), gs)
        h = ad.add_bias(h, tape.param("layer0.b", self.params["layer0.b"]))
        act = ad.ACTIVATIONS[self.config.activation]
        for k in range(1, len(self.widths)):
            h = ad.dropout(act(h), self.config.dropout, train, rng)
            h = ad.add_bias(h @ tape.param(f"layer{k}.W", self.params[f"layer{k}.W"]),
                            tape.param(f"layer{k}.b", self.params[f"layer{k}.b"]))
        rates = ad.clamp_min_zero_plus_const(ad.reshape(h, (h.shape[0],)), self.config.epsilon)
        return rates, groups

    def _forward(self, tape: ad.Tape, enc: Encoded, batch, train=False, rng=None):
        """Per size group: (batch positions, (B_g, n) distribution Var)."""
        rates, groups = self._rates(tape, enc, batch, train, rng)
        out = []
        for g in groups:
            r = ad.reshape(ad.slice_rows(rates, g.start, g.stop), (g.members.size, g.size * (g.size - 1)))
            out.append((g.members, ad.stationary(r, g.size)))
        return out

    def batch_loss(self, tape: ad.Tape, enc: Encoded, batch, train=False, rng=None):
        """Mean of -log pi[chosen] over the batch; returns (loss Var or None, floored count).

        Single-alternative sessions contribute zero loss but count in the mean.
        """
        batch = np.asarray(batch, dtype=np.intp)
        terms, floored = [], 0
        for members, pi in self._forward(tape, enc, batch, train, rng):
            logp, nf = ad.log_floor(ad.pick(pi, enc.choice[batch[members]]), PROB_FLOOR)
            floored += nf
            terms.append(ad.sum_all(logp))
        if not terms:
            return None, 0
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return ad.scale(total, -1.0 / len(batch)), floored

    def predict_encoded(self, enc: Encoded, chunk: int = 512) -> list[np.ndarray]:
        out: list[np.ndarray | None] = [None] * len(enc)
        sizes = enc.sizes
        for s in np.flatnonzero(sizes == 1):
            out[s] = np.ones(1)
        multi = np.flatnonzero(sizes > 1)
        for c in range(0, len(multi), chunk):
            batch = multi[c:c + chunk]
            for members, pi in self._forward(ad.Tape(record=False), enc, batch):
                for m, row in zip(members, pi.value):
                    out[batch[m]] = _clean_probs(row)
        return out

    def predict_proba(self, sessions: Sequence[Session]) -> list[np.ndarray]:
        return self.predict_encoded(self.encoder.encode(sessions))

    def rate_matrix(self, session: Session) -> np.ndarray:
        """The full rate matrix (diagonal included) the model builds for ``session``."""
        enc = self.encoder.encode([session])
        n = session.size
        if n == 1:
            return np.zeros((1, 1))
        rates, _ = self._rates(ad.Tape(record=False), enc, np.array([0]), False, None)
        Q = np.zeros((n, n))
        Q[~np.eye(n, dtype=bool)] = rates.value
        return with_diagonal(Q)

    def loss(self, session: Session) -> float:
        enc = self.encoder.encode([session])
        loss, _ = self.batch_loss(ad.Tape(record=False), enc, np.array([0]))
        return 0.0 if loss is None else float(loss.value)

    def nll(self, sessions: Sequence[Session]) -> float:
        probs = self.predict_proba(sessions)
        return float(-np.mean([np.log(max(p[s.choice], PROB_FLOOR)) for p, s in zip(probs, sessions)]))

    # -- persistence

    def to_checkpoint(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": "pcmc-net",
            "schema": self.schema.to_dict(),
            "config": self.config.to_dict(),
            "encoder": self.encoder.to_dict(),
            "params": {k: v.tolist() for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "PCMCNet":
        if ckpt.get("kind") != "pcmc-net":
            raise SchemaError(f"not a pcmc-net checkpoint: kind={ckpt.get('kind')!r}")
        _check_version(ckpt)
        schema = FeatureSchema.from_dict(ckpt["schema"])
        config = ArchitectureConfig.from_dict(ckpt["config"])
        return cls(schema, config, Encoder.from_dict(schema, ckpt["encoder"]),
                   {k: np.array(v, dtype=float) for k, v in ckpt["params"].items()})


def _clean_probs(p: np.ndarray) -> np.ndarray:
    p = np.where((p < 0) & (p > -1e-12), 0.0, p)
    return p / p.sum()


def _check_version(ckpt: dict) -> None:
    v = ckpt.get("format_version")
    if v != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint format version {v!r}")


def save_checkpoint(path: str | Path, ckpt: dict) -> None:
    Path(path).write_text(json.dumps(ckpt, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict:
    ckpt = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_version(ckpt)
    return ckpt
