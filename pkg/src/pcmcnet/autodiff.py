"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation appends a node to a :class:`Tape`; nodes only reference earlier
nodes, so the tape order is already a topological order and ``backward`` is a
single reverse sweep. There is no broadcasting: operands must have exactly the
shapes an operation documents.

Only the operators PCMC-Net needs are provided, including a linear-solve node
with an adjoint backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .core import SingularSystemError


class ShapeError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable | None


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Append-only record of a computation.

    With ``record=False`` values are computed but nothing is stored, which is
    what inference uses.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self._param_values: dict[str, np.ndarray] = {}

    def constant(self, value) -> Var:
        value = np.asarray(value, dtype=float)
        return self._push("const", (), value, None)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            return Var(self, self.params[name], self._param_values[name])
        value = np.asarray(value, dtype=float)
        var = self._push("param", (), value, None)
        self._param_values[name] = value
        self.params[name] = var.index
        return var

    def _push(self, op, inputs: tuple[Var, ...], value, vjp) -> Var:
        if not self.record:
            return Var(self, -1, value)
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{op}: operand recorded on a different tape")
        self.nodes.append(Node(op, tuple(v.index for v in inputs), vjp))
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter."""
        if not self.record:
            raise RuntimeError("tape was not recording")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for k in range(loss.index, -1, -1):
            g = grads[k]
            node = self.nodes[k]
            if g is None or node.vjp is None:
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                grads[src] = gi if grads[src] is None else grads[src] + gi
        out = {}
        for name, idx in self.params.items():
            g = grads[idx]
            out[name] = np.zeros_like(self._param_values[name]) if g is None else g
        return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _tape_of(*xs: Var) -> Tape:
    return xs[0].tape


# ---------------------------------------------------------------- linear ops

def matmul(a: Var, b: Var) -> Var:
    _check(a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0],
           f"matmul: shapes {a.shape} and {b.shape}")
    A, B = a.value, b.value
    return _tape_of(a)._push("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Var, b: Var) -> Var:
    _check(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape}")
    return _tape_of(a)._push("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    _check(a.shape == b.shape, f"sub: shapes {a.shape} and {b.shape}")
    return _tape_of(a)._push("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    _check(a.shape == b.shape, f"mul: shapes {a.shape} and {b.shape}")
    A, B = a.value, b.value
    return _tape_of(a)._push("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Var, c: float) -> Var:
    return _tape_of(a)._push("scale", (a,), a.value * c, lambda g: (g * c,))


def add_bias(x: Var, b: Var) -> Var:
    """Add a length-k vector to every row of an (m, k) matrix."""
    _check(x.value.ndim == 2 and b.value.ndim == 1 and x.shape[1] == b.shape[0],
           f"add_bias: shapes {x.shape} and {b.shape}")
    return _tape_of(x)._push("add_bias", (x, b), x.value + b.value, lambda g: (g, g.sum(axis=0)))


def concat(xs: Sequence[Var], axis: int = 1) -> Var:
    xs = list(xs)
    _check(len(xs) > 0, "concat: nothing to concatenate")
    vals = [x.value for x in xs]
    nd = vals[0].ndim
    for v in vals:
        _check(v.ndim == nd, "concat: rank mismatch")
        _check(v.shape[:axis] + v.shape[axis + 1:] == vals[0].shape[:axis] + vals[0].shape[axis + 1:],
               f"concat: shapes {[v.shape for v in vals]} along axis {axis}")
    edges = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(edges[k], edges[k + 1]), axis=axis) for k in range(len(vals)))

    return _tape_of(xs[0])._push("concat", tuple(xs), np.concatenate(vals, axis=axis), vjp)


def gather_rows(x: Var, idx) -> Var:
    """Rows ``x[idx]`` of a 2-d tensor; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)
    X = x.value
    _check(X.ndim == 2, f"gather_rows: expected a matrix, got shape {X.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= X.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {X.shape[0]} rows")

    def vjp(g):
        out = np.zeros_like(X)
        np.add.at(out, idx, g)
        return (out,)

    return _tape_of(x)._push("gather_rows", (x,), X[idx], vjp)


def embedding_lookup(table: Var, index) -> Var:
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for a table of {table.shape[0]} rows")
    return gather_rows(table, index)


def slice_rows(x: Var, start: int, stop: int) -> Var:
    X = x.value

    def vjp(g):
        out = np.zeros_like(X)
        out[start:stop] = g
        return (out,)

    return _tape_of(x)._push("slice_rows", (x,), X[start:stop], vjp)


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    old = x.shape
    return _tape_of(x)._push("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),))


def pick(x: Var, idx) -> Var:
    """``x[b, idx[b]]`` for a (B, n) tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    X = x.value
    _check(X.ndim == 2 and idx.shape == (X.shape[0],), f"pick: shapes {X.shape} and {idx.shape}")
    rows = np.arange(X.shape[0])

    def vjp(g):
        out = np.zeros_like(X)
        out[rows, idx] = g
        return (out,)

    return _tape_of(x)._push("pick", (x,), X[rows, idx], vjp)


def sum_all(x: Var) -> Var:
    shape = x.shape
    return _tape_of(x)._push("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Var) -> Var:
    return scale(sum_all(x), 1.0 / x.value.size)


# ------------------------------------------------------------- elementwise

def relu(x: Var) -> Var:
    X = x.value
    return _tape_of(x)._push("relu", (x,), np.maximum(X, 0.0), lambda g: (g * (X > 0),))


def leaky_relu(x: Var, slope: float = 0.01) -> Var:
    X = x.value
    d = np.where(X > 0, 1.0, slope)
    return _tape_of(x)._push("leaky_relu", (x,), X * d, lambda g: (g * d,))


def sigmoid(x: Var) -> Var:
    s = expit(x.value)
    return _tape_of(x)._push("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tanh(x: Var) -> Var:
    t = np.tanh(x.value)
    return _tape_of(x)._push("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": lambda x: leaky_relu(x, 0.01),
}


def dropout(x: Var, p: float, train: bool, rng: np.random.Generator | None) -> Var:
    """Inverted dropout. The mask is drawn once and kept in the node for backward."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _tape_of(x)._push("dropout", (x,), x.value * mask, lambda g: (g * mask,))


def clamp_min_zero_plus_const(x: Var, eps: float) -> Var:
    """``max(0, x) + eps``; with ``eps > 0`` every output is strictly positive."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    X = x.value
    return _tape_of(x)._push("clamp", (x,), np.maximum(X, 0.0) + eps, lambda g: (g * (X > 0),))


def log_floor(x: Var, floor: float = 1e-30) -> tuple[Var, int]:
    """Elementwise ``log(max(x, floor))``; also returns how many entries were floored."""
    X = x.value
    low = X < floor
    safe = np.where(low, floor, X)
    return (_tape_of(x)._push("log", (x,), np.log(safe), lambda g: (np.where(low, 0.0, g / safe),)),
            int(low.sum()))


# ------------------------------------------------------- rate-matrix layers

_OFFDIAG_CACHE: dict[int, np.ndarray] = {}


def _offdiag_mask(n: int) -> np.ndarray:
    m = _OFFDIAG_CACHE.get(n)
    if m is None:
        m = _OFFDIAG_CACHE[n] = ~np.eye(n, dtype=bool)
    return m


def offdiag_to_matrix(rates: Var, n: int) -> Var:
    """(B, n(n-1)) off-diagonal entries in row-major order -> (B, n, n), zero diagonal."""
    R = rates.value
    _check(R.ndim == 2 and R.shape[1] == n * (n - 1), f"offdiag_to_matrix: shape {R.shape} for n={n}")
    mask = _offdiag_mask(n)
    M = np.zeros((R.shape[0], n, n))
    M[:, mask] = R
    return _tape_of(rates)._push("offdiag", (rates,), M, lambda g: (g[:, mask],))


def row_neg_sum_diagonal(q: Var) -> Var:
    """Replace the diagonal so that each row sums to zero; the input diagonal is ignored.

    Accepts a single (n, n) matrix or a (B, n, n) stack.
    """
    Q = q.value
    _check(Q.ndim in (2, 3) and Q.shape[-1] == Q.shape[-2], f"row_neg_sum_diagonal: shape {Q.shape}")
    n = Q.shape[-1]
    eye = np.eye(n, dtype=bool)
    out = np.where(eye, 0.0, Q)
    d = np.arange(n)
    out[..., d, d] = -out.sum(axis=-1)

    def vjp(g):
        diag = np.diagonal(g, axis1=-2, axis2=-1)[..., :, None]
        return (np.where(eye, 0.0, g - diag),)

    return _tape_of(q)._push("row_neg_sum_diagonal", (q,), out, vjp)


def replace_last_column_ones(q: Var) -> Var:
    Q = q.value.copy()
    Q[..., :, -1] = 1.0

    def vjp(g):
        g = g.copy()
        g[..., :, -1] = 0.0
        return (g,)

    return _tape_of(q)._push("replace_last_column", (q,), Q, vjp)


def _solve_rows(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x with x A = b, for (n, n)/(n,) or (B, n, n)/(B, n)."""
    At = np.swapaxes(A, -1, -2)
    try:
        with np.errstate(all="ignore"):
            x = np.linalg.solve(At, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("linear solve produced non-finite values")
    return x


def linear_solve(a: Var, b: Var) -> Var:
    """Row-vector solve ``x A = b`` (LU with partial pivoting).

    Backward uses the adjoint: with upstream gradient ``g``, solve
    ``A lam = g`` for ``lam``; then ``grad_b = lam`` and ``grad_A = -outer(x, lam)``.
    Works on a single system or a (B, n, n) stack.
    """
    A, B = a.value, b.value
    _check(A.ndim in (2, 3) and A.shape[-1] == A.shape[-2] and B.shape == A.shape[:-1],
           f"linear_solve: shapes {A.shape} and {B.shape}")
    x = _solve_rows(A, B)

    def vjp(g):
        try:
            with np.errstate(all="ignore"):
                lam = np.linalg.solve(A, g[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(str(exc)) from exc
        return (-x[..., :, None] * lam[..., None, :], lam)

    return _tape_of(a)._push("linear_solve", (a, b), x, vjp)


def stationary(offdiag_rates: Var, n: int) -> Var:
    """Stationary distributions (B, n) of chains given by their off-diagonal rates (B, n(n-1))."""
    Q = row_neg_sum_diagonal(offdiag_to_matrix(offdiag_rates, n))
    A = replace_last_column_ones(Q)
    rhs = np.zeros((offdiag_rates.shape[0], n))
    rhs[:, -1] = 1.0
    return linear_solve(A, offdiag_rates.tape.constant(rhs))


# ----------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update (gradient *descent*)."""
    t = state.step + 1
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        new[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    state.step = t
    return new, state


# -------------------------------------------------------- gradient checking

def numeric_gradient(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray],
                     h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of several arrays."""
    arrays = [np.array(a, dtype=float) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            fp = f(arrays)
            flat[k] = old - h
            fm = f(arrays)
            flat[k] = old
            gflat[k] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(build: Callable[..., Var], arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and finite differences.

    ``build(*vars)`` must return a scalar Var computed from the given inputs.
    """
    tape = Tape()
    vs = [tape.param(f"x{k}", a) for k, a in enumerate(arrays)]
    grads = tape.backward(build(*vs))

    def f(arrs):
        t = Tape(record=False)
        return float(build(*[t.constant(a) for a in arrs]).value)

    numeric = numeric_gradient(f, arrays, h)
    return max(relative_error(grads[f"x{k}"], g) for k, g in enumerate(numeric))
