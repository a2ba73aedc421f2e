"""Reference models: linear-in-features MNL, uniform, cheapest and shortest."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CATEGORICAL, FeatureSchema, SchemaError, Session

MNL_CHECKPOINT_VERSION = 1


class SeparationWarning(RuntimeWarning):
    pass


class MnlFeatures:
    """Alternative features as a design row: standardized numerics, then one-hot
    categoricals with the first level dropped (its effect is absorbed by the
    shift invariance of the softmax)."""

    def __init__(self, schema: FeatureSchema, means: dict, stds: dict, levels: dict):
        self.schema = schema
        self.means, self.stds, self.levels = means, stds, levels
        self.names: list[str] = []
        for f in schema.alternative_fields:
            if f.kind == CATEGORICAL:
                self.names += [f"{f.name}={lvl}" for lvl in levels[f.name][1:]]
            else:
                self.names.append(f.name)

    @classmethod
    def fit(cls, schema: FeatureSchema, sessions: Sequence[Session]) -> "MnlFeatures":
        means, stds, levels = {}, {}, {}
        for f in schema.alternative_fields:
            vals = [a[f.name] for s in sessions for a in s.alternatives]
            if f.kind == CATEGORICAL:
                levels[f.name] = list(f.levels) if f.levels is not None else sorted(set(vals))
            else:
                v = np.asarray(vals, dtype=float)
                sd = float(v.std()) if v.size else 1.0
                means[f.name], stds[f.name] = (float(v.mean()) if v.size else 0.0), (sd if sd > 0 else 1.0)
        return cls(schema, means, stds, levels)

    def design(self, sessions: Sequence[Session]) -> tuple[np.ndarray, np.ndarray]:
        alts = [a for s in sessions for a in s.alternatives]
        cols = []
        for f in self.schema.alternative_fields:
            try:
                raw = [a[f.name] for a in alts]
            except KeyError as exc:
                raise SchemaError(f"missing field {f.name!r}") from exc
            if f.kind == CATEGORICAL:
                lv = self.levels[f.name]
                onehot = np.array(raw, dtype=object)[:, None] == np.array(lv[1:], dtype=object)[None, :]
                cols.append(onehot.astype(float).reshape(len(alts), len(lv) - 1))
            else:
                cols.append(((np.asarray(raw, dtype=float) - self.means[f.name]) / self.stds[f.name])[:, None])
        X = np.hstack(cols) if cols else np.zeros((len(alts), 0))
        offsets = np.zeros(len(sessions) + 1, dtype=np.intp)
        offsets[1:] = np.cumsum([s.size for s in sessions])
        return X, offsets

    def to_dict(self) -> dict:
        return {"means": self.means, "stds": self.stds, "levels": self.levels}


def _segment_log_softmax(u: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    starts = offsets[:-1]
    sizes = np.diff(offsets)
    z = u - np.repeat(np.maximum.reduceat(u, starts), sizes)
    return z - np.repeat(np.log(np.add.reduceat(np.exp(z), starts)), sizes)


def _segment_softmax(u: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.exp(_segment_log_softmax(u, offsets))


def mnl_prob(beta, X: np.ndarray) -> np.ndarray:
    """Softmax of ``X @ beta`` over one choice set."""
    u = np.asarray(X, dtype=float) @ np.asarray(beta, dtype=float)
    e = np.exp(u - u.max())
    return e / e.sum()


@dataclass
class MNL:
    features: MnlFeatures
    beta: np.ndarray
    iterations: int = 0
    converged: bool = False
    trace: list[float] = field(default_factory=list)

    kind = "mnl"

    def predict_proba(self, sessions: Sequence[Session]) -> list[np.ndarray]:
        X, off = self.features.design(sessions)
        p = _segment_softmax(X @ self.beta, off) if len(X) else np.zeros(0)
        return [p[off[k]:off[k + 1]] for k in range(len(sessions))]

    def log_likelihood(self, sessions: Sequence[Session]) -> float:
        probs = self.predict_proba(sessions)
        return float(sum(np.log(p[s.choice]) for p, s in zip(probs, sessions)))

    def to_checkpoint(self) -> dict:
        return {"format_version": MNL_CHECKPOINT_VERSION, "kind": "mnl",
                "schema": self.features.schema.to_dict(), "features": self.features.to_dict(),
                "names": self.features.names, "beta": self.beta.tolist()}

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "MNL":
        schema = FeatureSchema.from_dict(ckpt["schema"])
        f = ckpt["features"]
        return cls(MnlFeatures(schema, f["means"], f["stds"], f["levels"]), np.array(ckpt["beta"], dtype=float))


def fit_mnl(sessions: Sequence[Session], schema: FeatureSchema, tol: float = 1e-6,
            max_iter: int = 100, beta0=None, max_norm: float = 1e3) -> MNL:
    """Maximum-likelihood MNL by damped Newton ascent on the mean log-likelihood.

    Stops when the gradient infinity-norm drops below ``tol``. Warns with
    :class:`SeparationWarning` if the coefficients diverge past ``max_norm``, or
    if every observed choice is predicted with certainty (Newton's gradient
    vanishes on separable data long before the norm gets that large).
    """
    sessions = list(sessions)
    if not sessions:
        raise ValueError("fit_mnl needs at least one session")
    feats = MnlFeatures.fit(schema, sessions)
    X, off = feats.design(sessions)
    S = len(sessions)
    chosen = off[:-1] + np.array([s.choice for s in sessions])
    x_chosen = X[chosen].sum(axis=0)

    def evaluate(beta):
        logp = _segment_log_softmax(X @ beta, off)
        p = np.exp(logp)
        ll = float(logp[chosen].sum()) / S
        px = p[:, None] * X
        xbar = np.add.reduceat(px, off[:-1], axis=0) if len(X) else px
        grad = (x_chosen - xbar.sum(axis=0)) / S
        return ll, grad, p, xbar

    beta = np.zeros(X.shape[1]) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    ll, grad, p, xbar = evaluate(beta)
    model = MNL(feats, beta, trace=[ll])
    for it in range(1, max_iter + 1):
        if not grad.size or np.abs(grad).max() < tol:
            model.converged = True
            break
        H = (X.T @ (p[:, None] * X) - xbar.T @ xbar) / S    # negative Hessian, PSD
        step = np.linalg.lstsq(H + 1e-12 * np.eye(len(beta)), grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            ll_new, g_new, p_new, xb_new = evaluate(cand)
            if ll_new >= ll - 1e-15:
                break
            t *= 0.5
        else:
            model.converged = np.abs(grad).max() < 1e-4
            break
        beta, ll, grad, p, xbar = cand, ll_new, g_new, p_new, xb_new
        model.trace.append(ll)
        model.iterations = it
        if np.linalg.norm(beta) > max_norm:
            warnings.warn(f"MNL coefficients diverging (norm {np.linalg.norm(beta):.3g}); "
                          "the data may be separable", SeparationWarning, stacklevel=2)
            break
    else:
        model.converged = bool(np.abs(grad).max() < tol)
    if np.linalg.norm(beta) <= max_norm and beta.size and p[chosen].min() > 1 - 1e-6:
        warnings.warn("every choice is fitted with probability ~1; the data are separable "
                      "and the MNL coefficients have no finite optimum", SeparationWarning, stacklevel=2)
    model.beta = beta
    return model


# ------------------------------------------------------------------ rankers

class UniformModel:
    kind = "uniform"

    def predict_proba(self, sessions):
        return [np.full(s.size, 1.0 / s.size) for s in sessions]

    def scores(self, sessions):
        return [np.zeros(s.size) for s in sessions]

    def to_checkpoint(self) -> dict:
        return {"format_version": 1, "kind": self.kind}


class FieldRanker:
    """Non-probabilistic ranker: ascending value of one numeric alternative field."""

    def __init__(self, kind: str, field_name: str):
        self.kind = kind
        self.field_name = field_name

    def scores(self, sessions):
        out = []
        for s in sessions:
            try:
                out.append(-np.array([a[self.field_name] for a in s.alternatives], dtype=float))
            except KeyError as exc:
                raise SchemaError(f"{self.kind} ranker needs field {self.field_name!r}") from exc
        return out

    def to_checkpoint(self) -> dict:
        return {"format_version": 1, "kind": self.kind, "field": self.field_name}


def cheapest() -> FieldRanker:
    return FieldRanker("cheapest", "price")


def shortest() -> FieldRanker:
    return FieldRanker("shortest", "trip_duration")


def rank_by_field(session: Session, field_name: str, rng: np.random.Generator | None = None) -> list[int]:
    """Alternative indices by ascending ``field_name``; ties in random order."""
    vals = np.array([a[field_name] for a in session.alternatives], dtype=float) if session.alternatives else []
    perm = np.arange(len(vals)) if rng is None else rng.permutation(len(vals))
    order = perm[np.argsort(vals[perm], kind="stable")]
    return [int(i) for i in order]


def rank_cheapest(session: Session, rng: np.random.Generator | None = None) -> list[int]:
    return rank_by_field(session, "price", rng)


def rank_shortest(session: Session, rng: np.random.Generator | None = None) -> list[int]:
    return rank_by_field(session, "trip_duration", rng)


def rank_uniform(session: Session, rng: np.random.Generator | None = None) -> list[int]:
    rng = np.random.default_rng(0) if rng is None else rng
    return [int(i) for i in rng.permutation(session.size)]
