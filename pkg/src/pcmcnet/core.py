"""Exact PCMC mathematics on dense rate matrices.

A rate matrix ``Q`` is a square float array whose off-diagonal entry ``Q[i, j]``
is the transition rate from alternative ``i`` to ``j`` and whose diagonal makes
every row sum to zero. The choice distribution on a set ``S`` is the stationary
distribution of the chain restricted to ``S``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

ROW_SUM_TOL = 1e-12
RESIDUAL_TOL = 1e-9
NEGATIVE_TOL = 1e-12


class SingularSystemError(ArithmeticError):
    """The stationary system could not be solved to the required residual."""


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str = ""
    index: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def validate_rate_matrix(Q) -> Validation:
    """Check the rate-matrix invariants; report the first violation found."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
        return Validation(False, f"not a non-empty square matrix: shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        i, j = np.argwhere(~np.isfinite(Q))[0]
        return Validation(False, "non-finite entry", (int(i), int(j)))
    n = Q.shape[0]
    off = ~np.eye(n, dtype=bool)
    neg = np.argwhere((Q < 0) & off)
    if len(neg):
        i, j = neg[0]
        return Validation(False, "negative off-diagonal rate", (int(i), int(j)))
    pair = Q + Q.T
    dead = np.argwhere(np.triu(pair <= 0, k=1))
    if len(dead):
        i, j = dead[0]
        return Validation(False, "q_ij + q_ji must be positive", (int(i), int(j)))
    rows = np.abs(Q.sum(axis=1))
    bad = np.flatnonzero(rows > ROW_SUM_TOL * max(1.0, np.abs(Q[off]).max(initial=0.0)))
    if len(bad):
        return Validation(False, "row does not sum to zero", (int(bad[0]),))
    return Validation(True)


def with_diagonal(rates) -> np.ndarray:
    """Copy of ``rates`` with the diagonal set to minus the off-diagonal row sums."""
    Q = np.array(rates, dtype=float)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def restrict(Q, S: Sequence[int]) -> np.ndarray:
    """Rate matrix of the chain on the states ``S`` (in the given order)."""
    Q = np.asarray(Q, dtype=float)
    idx = np.asarray(S, dtype=int)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("restriction needs a non-empty index list")
    if idx.min() < 0 or idx.max() >= Q.shape[0]:
        raise IndexError(f"index out of range for a {Q.shape[0]}-state matrix: {list(idx)}")
    if len(np.unique(idx)) != idx.size:
        raise ValueError(f"indices must be distinct: {list(idx)}")
    return with_diagonal(Q[np.ix_(idx, idx)])


def stationary_system(Q) -> np.ndarray:
    """``Q`` with its last column replaced by ones."""
    A = np.array(Q, dtype=float)
    A[:, -1] = 1.0
    return A


def solve_stationary(Q) -> np.ndarray:
    """Stationary distribution ``pi`` with ``pi Q = 0`` and ``sum(pi) = 1``.

    Solves ``pi A = e_n`` where ``A`` is ``Q`` with the last column set to ones,
    via an LU factorization with partial pivoting. Raises
    :class:`SingularSystemError` when the residual of the result exceeds 1e-9.
    """
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    if n == 1:
        return np.ones(1)
    A = stationary_system(Q)
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(A, check_finite=False)
        if not np.all(np.isfinite(lu)) or np.any(np.diag(lu) == 0.0):
            raise SingularSystemError("stationary system is singular")
        pi = lu_solve((lu, piv), rhs, trans=1, check_finite=False)
    pi = _clean(pi)
    scale = max(1.0, np.abs(Q).max())
    resid = np.abs(pi @ Q).max() / scale
    if not np.isfinite(resid) or resid >= RESIDUAL_TOL:
        raise SingularSystemError(f"stationary residual {resid:.3g} exceeds {RESIDUAL_TOL}")
    return pi


def _clean(pi: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(pi)):
        raise SingularSystemError("non-finite stationary vector")
    if pi.min() < -NEGATIVE_TOL:
        raise SingularSystemError(f"stationary vector has negative entry {pi.min():.3g}")
    if pi.min() < 0:
        pi = np.maximum(pi, 0.0)
        pi = pi / pi.sum()
    return pi


def pcmc_choice_prob(Q, S: Sequence[int], i: int) -> float:
    """Probability that ``i`` is chosen from ``S`` under the PCMC with rates ``Q``."""
    S = list(S)
    if i not in S:
        raise ValueError(f"{i} is not in the choice set {S}")
    return float(solve_stationary(restrict(Q, S))[S.index(i)])


def choice_distribution(Q, S: Sequence[int]) -> np.ndarray:
    return solve_stationary(restrict(Q, S))


def mnl_rate_matrix(weights) -> np.ndarray:
    """PCMC embedding of an MNL model: every rate into ``j`` equals ``w_j``."""
    w = np.asarray(weights, dtype=float)
    return with_diagonal(np.tile(w, (w.size, 1)))
