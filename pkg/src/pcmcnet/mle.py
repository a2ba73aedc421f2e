"""Maximum-likelihood estimation of a full PCMC rate matrix over a finite universe.

Sessions are index based: each alternative is an item of a universe ``0..n-1``.
The log-likelihood sums ``count * log P_S(i)`` over observed sets; its gradient
with respect to the rates flows through the differentiable stationary solve.
Optimization is bounded L-BFGS (a projected quasi-Newton method), restarted
from several random points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .core import SingularSystemError, restrict, solve_stationary, with_diagonal
from .data import Session, item_schema, session_items

log = logging.getLogger(__name__)

ChoiceCounts = dict  # sorted item tuple -> count vector aligned with the tuple


def aggregate_counts(observations: Iterable, n_items: int | None = None) -> ChoiceCounts:
    """Count how often each item was chosen from each distinct set.

    ``observations`` holds index-based :class:`Session` objects or
    ``(items, chosen_position)`` pairs. Keys are sorted item tuples.
    """
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for obs in observations:
        if isinstance(obs, Session):
            items, pos = session_items(obs), obs.choice
        else:
            items, pos = tuple(int(i) for i in obs[0]), int(obs[1])
        if n_items is not None and any(not 0 <= i < n_items for i in items):
            raise IndexError(f"item index out of universe 0..{n_items - 1}: {items}")
        if len(set(items)) != len(items):
            raise ValueError(f"repeated item in choice set {items}")
        key = tuple(sorted(items))
        vec = counts.setdefault(key, np.zeros(len(key)))
        vec[key.index(items[pos])] += 1
    return dict(sorted(counts.items()))


def log_likelihood(Q, counts: ChoiceCounts) -> float:
    total = 0.0
    for S, c in counts.items():
        if len(S) == 1:
            continue
        p = solve_stationary(restrict(Q, S))
        nz = c > 0
        total += float(np.sum(c[nz] * np.log(p[nz])))
    return total


def _offdiag_index(n: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Position of rate (u, v) in the row-major off-diagonal vector of an n-state matrix."""
    return u * (n - 1) + np.where(v < u, v, v - 1)


class _Objective:
    """Smoothed log-likelihood and its gradient as a function of off-diagonal rates."""

    def __init__(self, counts: ChoiceCounts, n: int, smoothing: float):
        self.n = n
        self.total = sum(float(c.sum()) for c in counts.values())
        groups: dict[int, list] = {}
        for S, c in counts.items():
            if len(S) > 1:
                groups.setdefault(len(S), []).append((S, c + smoothing))
        self.groups = []
        for k, items in sorted(groups.items()):
            I, J = np.nonzero(~np.eye(k, dtype=bool))
            sets = np.array([S for S, _ in items])
            idx = _offdiag_index(n, sets[:, I], sets[:, J])
            self.groups.append((k, idx, np.array([c for _, c in items])))
        self.norm = max(sum(float(c.sum()) for _, _, C in self.groups for c in C), 1.0)

    def __call__(self, theta: np.ndarray, grad: bool = True):
        tape = ad.Tape(record=grad)
        rates = tape.param("rates", theta[:, None])
        total = None
        for k, idx, C in self.groups:
            r = ad.reshape(ad.gather_rows(rates, idx.ravel()), idx.shape)
            logp, _ = ad.log_floor(ad.stationary(r, k), 1e-300)
            term = ad.sum_all(ad.mul(logp, tape.constant(C)))
            total = term if total is None else total + term
        if total is None:
            return 0.0, np.zeros_like(theta)
        obj = ad.scale(total, 1.0 / self.norm)
        if not grad:
            return float(obj.value), None
        return float(obj.value), tape.backward(obj)["rates"][:, 0]


@dataclass
class MLEResult:
    Q: np.ndarray
    objective: float
    restart: int
    trace: list[float] = field(default_factory=list)
    restart_objectives: list[float] = field(default_factory=list)

    kind = "pcmc-mle"

    def predict_proba(self, sessions: Sequence[Session]) -> list[np.ndarray]:
        return [solve_stationary(restrict(self.Q, session_items(s))) for s in sessions]

    def to_checkpoint(self) -> dict:
        return {"format_version": 1, "kind": self.kind, "schema": item_schema(self.Q.shape[0]).to_dict(),
                "Q": self.Q.tolist(), "objective": self.objective}

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "MLEResult":
        return cls(np.array(ckpt["Q"], dtype=float), float(ckpt.get("objective", float("nan"))), -1)


def _ascend(f: _Objective, theta: np.ndarray, floor: float, max_iter: int,
            tol: float) -> tuple[np.ndarray, float, list[float]]:
    """Bounded quasi-Newton ascent; the box constraint is the projection onto [floor, inf)."""
    trace = [f(theta, grad=False)[0]]

    def neg(th):
        value, g = f(th)
        if not np.isfinite(value):
            raise FloatingPointError("non-finite objective")
        return -value, -g

    res = minimize(neg, theta, jac=True, method="L-BFGS-B", bounds=[(floor, None)] * theta.size,
                   callback=lambda th: trace.append(f(th, grad=False)[0]),
                   options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-9})
    return res.x, -float(res.fun), trace


def fit_mle(counts: ChoiceCounts, n_items: int, smoothing: float = 0.1, restarts: int = 20,
            max_iter: int = 500, floor: float = 1e-3, tol: float = 1e-12, seed: int = 0) -> MLEResult:
    """Best rate matrix over ``restarts`` bounded ascent runs.

    Each restart draws off-diagonal rates from Uniform(0.5, 1.5) and runs bounded
    L-BFGS; rates are kept at or above ``floor`` so every pair stays connected. ``smoothing`` is added to
    every count of every observed set.
    """
    if n_items < 2:
        raise ValueError("a universe needs at least two items")
    f = _Objective(counts, n_items, smoothing)
    best = None
    objectives = []
    for r in range(restarts):
        theta0 = np.random.default_rng([seed, r]).uniform(0.5, 1.5, size=n_items * (n_items - 1))
        try:
            theta, value, trace = _ascend(f, theta0, floor, max_iter, tol)
        except (SingularSystemError, FloatingPointError) as exc:
            log.warning("restart %d aborted: %s", r, exc)
            objectives.append(float("nan"))
            continue
        if not np.isfinite(value):
            log.warning("restart %d aborted: non-finite objective", r)
            objectives.append(float("nan"))
            continue
        objectives.append(value)
        # strict comparison keeps the lowest restart index on ties
        if best is None or value > best[1]:
            best = (theta, value, trace, r)
    if best is None:
        raise SingularSystemError("every restart failed")
    theta, value, trace, r = best
    Q = np.zeros((n_items, n_items))
    Q[~np.eye(n_items, dtype=bool)] = theta
    return MLEResult(with_diagonal(Q), value * f.norm, r, [v * f.norm for v in trace], objectives)
