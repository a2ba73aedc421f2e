"""Evaluation: log loss, TOP-N accuracy, expected KL to a context oracle, heatmaps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Session
from .datagen import CONTEXT_HIGH, CONTEXT_LOW, context_session, sample_context_points

PROB_FLOOR = 1e-30


@dataclass
class EvalReport:
    model_kind: str
    sessions: int
    nll: float | None
    top1: float
    top5: float
    top1_mean: float
    top5_mean: float
    loss_quantiles: dict[str, float] | None
    seed: int
    floored: int = 0
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _is_probabilistic(model) -> bool:
    return hasattr(model, "predict_proba")


def session_losses(probs: Sequence[np.ndarray], sessions: Sequence[Session]) -> tuple[np.ndarray, int]:
    p = np.array([pr[s.choice] for pr, s in zip(probs, sessions)], dtype=float)
    floored = int((p < PROB_FLOOR).sum())
    return -np.log(np.maximum(p, PROB_FLOOR)), floored


def nll(model, sessions: Sequence[Session]) -> float:
    """Mean negative log probability of the observed choices (nats)."""
    if not _is_probabilistic(model):
        raise TypeError(f"{getattr(model, 'kind', model)!r} is not a probabilistic model")
    if not sessions:
        raise ValueError("empty test set")
    losses, _ = session_losses(model.predict_proba(sessions), sessions)
    return float(math.fsum(losses) / len(losses))


def _scores(model, sessions):
    return model.scores(sessions) if hasattr(model, "scores") else model.predict_proba(sessions)


def top_n_hits(scores: Sequence[np.ndarray], sessions: Sequence[Session], n: int,
               rng: np.random.Generator) -> np.ndarray:
    """Per-session hit indicator: is the choice among the ``n`` highest scores.

    Ties are broken by a random permutation before a stable sort.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    hits = np.empty(len(sessions), dtype=bool)
    for k, (sc, s) in enumerate(zip(scores, sessions)):
        sc = np.asarray(sc, dtype=float)
        perm = rng.permutation(sc.size)
        order = perm[np.argsort(-sc[perm], kind="stable")]
        hits[k] = s.choice in order[:n]
    return hits


def top_n(model, sessions: Sequence[Session], n: int, seed: int = 0) -> float:
    return float(top_n_hits(_scores(model, sessions), sessions, n, np.random.default_rng(seed)).mean())


def _mean_over_draws(scores, sessions, n: int, seed: int, draws: int) -> float:
    return float(np.mean([top_n_hits(scores, sessions, n, np.random.default_rng([seed, d])).mean()
                          for d in range(draws)]))


def top_n_mean(model, sessions: Sequence[Session], n: int, seed: int = 0, draws: int = 100) -> float:
    """TOP-N averaged over ``draws`` independent tie-breaks."""
    return _mean_over_draws(_scores(model, sessions), sessions, n, seed, draws)


def evaluate(model, sessions: Sequence[Session], seed: int = 0, tie_draws: int = 100) -> EvalReport:
    if not sessions:
        raise ValueError("empty test set")
    probs = model.predict_proba(sessions) if _is_probabilistic(model) else None
    scores = model.scores(sessions) if hasattr(model, "scores") else probs
    report_nll, quantiles, floored = None, None, 0
    if probs is not None:
        losses, floored = session_losses(probs, sessions)
        report_nll = float(math.fsum(losses) / len(losses))
        qs = np.quantile(losses, [0.05, 0.25, 0.5, 0.75, 0.95])
        quantiles = {k: float(v) for k, v in zip(("q05", "q25", "q50", "q75", "q95"), qs)}
    tops = {}
    for n in (1, 5):
        tops[n] = float(top_n_hits(scores, sessions, n, np.random.default_rng(seed)).mean())
        tops[f"{n}m"] = _mean_over_draws(scores, sessions, n, seed, tie_draws)
    return EvalReport(getattr(model, "kind", type(model).__name__), len(sessions), report_nll,
                      tops[1], tops[5], tops["1m"], tops["5m"], quantiles, seed, floored)


# ------------------------------------------------------------ context effects

def context_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    """(m, 2) third-alternative positions -> (m, 3) distributions over (a, b, c)."""
    if hasattr(model, "batch"):
        return model.batch
    return lambda C: np.array(model.predict_proba([context_session(c) for c in np.asarray(C)]))


def kl_divergence(P: np.ndarray, Phat: np.ndarray) -> np.ndarray:
    """Row-wise D(P || Phat), with Phat floored and 0 log 0 = 0."""
    P = np.asarray(P, dtype=float)
    Phat = np.maximum(np.asarray(Phat, dtype=float), PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(np.where(P > 0, P, 1.0)) - np.log(Phat)), 0.0)
    return terms.sum(axis=1)


def expected_kl(oracle, model, n_mc: int = 10000, seed: int = 0, points: np.ndarray | None = None) -> float:
    """Monte Carlo mean over c ~ U([1, 9]^2) of D(P_oracle || P_model) on {a, b, c}."""
    C = sample_context_points(n_mc, seed) if points is None else np.asarray(points, dtype=float)
    kl = kl_divergence(context_fn(oracle)(C), context_fn(model)(C))
    return float(math.fsum(kl) / len(kl))


def grid_axis(resolution: int) -> np.ndarray:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    return np.linspace(CONTEXT_LOW, CONTEXT_HIGH, resolution)


def heatmap(model, resolution: int = 64) -> np.ndarray:
    """Preference P(a) / (P(a) + P(b)) with c on a regular grid.

    Entry ``[r, k]`` has ``c = (x1[k], x2[r])`` with both axes ascending.
    """
    x = grid_axis(resolution)
    X1, X2 = np.meshgrid(x, x)
    P = context_fn(model)(np.column_stack([X1.ravel(), X2.ravel()]))
    return (P[:, 0] / (P[:, 0] + P[:, 1])).reshape(resolution, resolution)


def write_heatmap_csv(path: str | Path, H: np.ndarray) -> None:
    x = grid_axis(H.shape[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x2\\x1", *[repr(float(v)) for v in x]])
        for r in range(H.shape[0]):
            w.writerow([repr(float(x[r])), *[repr(float(v)) for v in H[r]]])


def pgm_bytes(H: np.ndarray) -> bytes:
    """Binary 8-bit grayscale PGM; lighter means stronger preference for a.

    The top image row is the largest x2 so the picture reads like a plot.
    """
    pix = np.clip(np.round(255 * np.asarray(H)), 0, 255).astype(np.uint8)[::-1]
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii")
    return header + pix.tobytes()


def write_heatmap(prefix: str | Path, H: np.ndarray) -> tuple[Path, Path]:
    prefix = Path(prefix)
    csv_path, pgm_path = prefix.with_suffix(".csv"), prefix.with_suffix(".pgm")
    write_heatmap_csv(csv_path, H)
    pgm_path.write_bytes(pgm_bytes(H))
    return csv_path, pgm_path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def is_constant(H: np.ndarray, tol: float = 1e-10) -> bool:
    return float(np.ptp(H)) <= tol
