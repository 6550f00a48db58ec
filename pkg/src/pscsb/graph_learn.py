"""Online sparse estimation of the SEM adjacency matrix.

The data term ||Y - W Y - Z||_F^2 only depends on the Gram statistics
G = Y Y^T, C = (Y - Z) Y^T and the row energies of Y - Z, so the buffer
keeps those up to date and every solve costs O(K^3) per iteration no matter
how many rounds have been stacked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .sem_core import AdjacencyMatrix, InvalidInputError, _topological_order

L1 = "L1"
DTV = "DTV"


def build_init_matrix(K: int, m: int) -> np.ndarray:
    """Initialization design: column t plays arm t alone."""
    if K < 1 or m < 1:
        raise InvalidInputError("K and m must be positive")
    return np.eye(K, dtype=np.int8)


class FeedbackBuffer:
    """Stacked (y, z) columns since the last graph reset."""

    def __init__(self, K: int, capacity: int = 256) -> None:
        self.K = K
        self._Y = np.empty((K, capacity))
        self._Z = np.empty((K, capacity))
        self.n = 0
        self.gram = np.zeros((K, K))        # Y Y^T
        self.cross = np.zeros((K, K))       # (Y - Z) Y^T
        self.energy = np.zeros(K)           # row sums of (Y - Z)^2
        self.hinge = np.zeros((K, K))       # sum_h max(Y[i,h] - Y[j,h], 0)

    @classmethod
    def from_arrays(cls, Y, Z) -> "FeedbackBuffer":
        Y = np.asarray(Y, dtype=float)
        Z = np.asarray(Z, dtype=float)
        if Y.shape != Z.shape or Y.ndim != 2:
            raise InvalidInputError("Y and Z must be K x n matrices of equal shape")
        buf = cls(Y.shape[0], capacity=max(Y.shape[1], 1))
        for h in range(Y.shape[1]):
            buf.append(Y[:, h], Z[:, h])
        return buf

    @property
    def Y(self) -> np.ndarray:
        return self._Y[:, : self.n].copy()

    @property
    def Z(self) -> np.ndarray:
        return self._Z[:, : self.n].copy()

    def append(self, y, z) -> None:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if self.n == self._Y.shape[1]:
            cap = 2 * self._Y.shape[1]
            for name in ("_Y", "_Z"):
                grown = np.empty((self.K, cap))
                grown[:, : self.n] = getattr(self, name)[:, : self.n]
                setattr(self, name, grown)
        self._Y[:, self.n] = y
        self._Z[:, self.n] = z
        self.n += 1
        d = y - z
        self.gram += np.outer(y, y)
        self.cross += np.outer(d, y)
        self.energy += d * d
        self.hinge += np.maximum(y[:, None] - y[None, :], 0.0)

    def clear(self) -> None:
        self.n = 0
        self.gram[:] = 0.0
        self.cross[:] = 0.0
        self.energy[:] = 0.0
        self.hinge[:] = 0.0

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class LearnerConfig:
    lambda1: float = 1e-6
    lambda2: float = 0.0
    regularizer: str = L1
    allow_cycles: bool = False
    max_iters: int = 500
    step_tolerance: float = 1e-7
    epsilon_residual: float = 1e-6

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidInputError("regularization weights must be nonnegative")
        if self.regularizer not in (L1, DTV):
            raise InvalidInputError(f"unknown regularizer {self.regularizer!r}")
        if self.epsilon_residual < 0:
            raise InvalidInputError("epsilon_residual must be nonnegative")
        if self.regularizer == DTV and not self.allow_cycles:
            object.__setattr__(self, "allow_cycles", True)


@dataclass(eq=False)
class GraphEstimate:
    graph: AdjacencyMatrix
    objective_value: float
    iterations: int
    history: list = field(default_factory=list, repr=False)

    @property
    def W_hat(self) -> np.ndarray:
        return self.graph.entries

    def to_dict(self) -> dict:
        return {
            "W_hat": self.graph.to_list(),
            "objective_value": self.objective_value,
            "iterations": self.iterations,
        }


def dtv_penalty(W, Y) -> float:
    """sum_ij W[i,j] * sum_h max(Y[i,h] - Y[j,h], 0)."""
    W = np.asarray(W, dtype=float)
    Y = np.asarray(Y, dtype=float)
    hinge = np.maximum(Y[:, None, :] - Y[None, :, :], 0.0).sum(axis=2)
    return float(np.sum(W * hinge))


def residual_test(W_hat, y, z, epsilon_residual: float) -> bool:
    """True when the new sample is inconsistent with the current estimate."""
    W = W_hat.W_hat if isinstance(W_hat, GraphEstimate) else np.asarray(W_hat, dtype=float)
    r = np.asarray(y, dtype=float) - W @ y - np.asarray(z, dtype=float)
    return float(r @ r) > epsilon_residual


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def _smooth(W, gram, cross, energy) -> float:
    return float(energy.sum() - 2.0 * np.sum(W * cross) + np.sum((W @ gram) * W))


def _prox(V, a, b, anchor):
    """argmin_w (w - v)^2 / 2 + a|w| + b|w - anchor|, elementwise."""
    if b is None or not np.any(b):
        return np.sign(V) * np.maximum(np.abs(V) - a, 0.0)
    # The minimiser of this convex 1-d problem is a kink (0 or anchor) or a
    # stationary point of one smooth piece; the smallest objective wins.
    candidates = [np.zeros_like(V), np.broadcast_to(anchor, V.shape)]
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            candidates.append(V - s1 * a - s2 * b)
    stack = np.stack(candidates)
    obj = 0.5 * (stack - V) ** 2 + a * np.abs(stack) + b * np.abs(stack - anchor)
    pick = np.argmin(obj, axis=0)
    return np.take_along_axis(stack, pick[None], axis=0)[0]


class _Problem:
    """Data term plus separable penalty restricted to the free entries."""

    def __init__(self, gram, cross, energy, mask, weights, lambda2, anchor):
        self.gram = gram
        self.cross = cross
        self.energy = energy
        self.mask = mask
        self.weights = weights          # lambda1 * per-entry weights
        self.lambda2 = lambda2
        self.anchor = anchor

    def penalty(self, W) -> float:
        val = float(np.sum(self.weights * np.abs(W)))
        if self.lambda2 and self.anchor is not None:
            val += self.lambda2 * float(np.sum(np.abs(W - self.anchor) * self.mask))
        return val

    def objective(self, W) -> float:
        return max(_smooth(W, self.gram, self.cross, self.energy), 0.0) + self.penalty(W)

    def prox(self, V, t):
        b = t * self.lambda2 if (self.lambda2 and self.anchor is not None) else None
        anchor = self.anchor if b is not None else None
        return _prox(V, t * self.weights, b, anchor) * self.mask


@lru_cache(maxsize=None)
def _offdiag_index(K: int) -> np.ndarray:
    idx = np.array([[j for j in range(K) if j != k] for k in range(K)], dtype=int)
    idx.setflags(write=False)
    return idx


def _least_squares_start(gram, cross, mask) -> Optional[np.ndarray]:
    """Unregularised least squares per row, restricted to the free entries."""
    rows, K = mask.shape
    out = np.zeros((rows, K))
    free_counts = mask.sum(axis=1).astype(int)
    if np.all(free_counts == free_counts[0]) and free_counts[0] > 0:
        if rows == K and free_counts[0] == K - 1:
            idx = _offdiag_index(K)
        else:
            idx = np.array([np.flatnonzero(mask[r]) for r in range(rows)])
        A = gram[idx[:, :, None], idx[:, None, :]]
        rhs = cross[np.arange(rows)[:, None], idx]
        try:
            sol = np.linalg.solve(A, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            sol = None
        if sol is not None and np.all(np.isfinite(sol)):
            out[np.arange(rows)[:, None], idx] = sol
            return out
    for r in range(rows):
        free = np.flatnonzero(mask[r])
        if free.size == 0:
            continue
        A = gram[np.ix_(free, free)]
        rhs = cross[r, free]
        try:
            out[r, free] = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            out[r, free] = np.linalg.lstsq(A, rhs, rcond=None)[0]
    if not np.all(np.isfinite(out)):
        return None
    return out


def _proximal_gradient(problem: _Problem, starts: Sequence[np.ndarray], lipschitz: float,
                       max_iters: int, tol: float, polish: bool = True):
    W = min(starts, key=problem.objective) * problem.mask
    F = problem.objective(W)
    history = [F]
    if lipschitz <= 0:
        return W, history, 0
    step = 1.0 / lipschitz
    gram = problem.gram
    it = 0
    while it < max_iters:
        it += 1
        grad = 2.0 * (W @ gram - problem.cross)
        for _ in range(60):
            W_new = problem.prox(W - step * grad, step)
            delta = W_new - W
            curvature = float(np.sum((delta @ gram) * delta))
            sq = float(np.sum(delta * delta))
            if curvature <= sq / (2.0 * step) * (1.0 + 1e-12):
                break
            step *= 0.5
        # exact expansion of the quadratic data term avoids cancellation
        dF = float(np.sum(grad * delta)) + curvature + problem.penalty(W_new) - problem.penalty(W)
        if not dF < 0.0:
            break
        W = W_new
        F_prev, F = F, F + dF
        history.append(F)
        if -dF <= tol * max(abs(F_prev), 1e-300):
            break
    if polish:
        W = _polish(problem, W)
        F_new = problem.objective(W)
        if F_new < F:
            history.append(F_new)
    return W, history, it


def _polish(problem: _Problem, W: np.ndarray) -> np.ndarray:
    """Exact solve on the support found by the iterations, row by row.

    With the support S and signs s fixed, the optimality conditions of an
    L1-type row problem are linear: G_SS w_S = C_S - weights_S * s / 2.  The
    candidate is kept only if it reproduces those signs and satisfies the
    subgradient bound off the support, which certifies it as the minimiser.
    """
    if problem.lambda2 and problem.anchor is not None:
        return W
    gram, cross = problem.gram, problem.cross
    out = W.copy()
    for r in range(W.shape[0]):
        w = W[r]
        support = np.flatnonzero((w != 0) & (problem.mask[r] > 0))
        if support.size == 0:
            continue
        lam = problem.weights[r]
        signs = np.sign(w[support])
        try:
            sol = np.linalg.solve(gram[np.ix_(support, support)],
                                  cross[r, support] - 0.5 * lam[support] * signs)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(sol)) or np.any(np.sign(sol) != signs):
            continue
        cand = np.zeros_like(w)
        cand[support] = sol
        grad = 2.0 * (cand @ gram - cross[r])
        off = (problem.mask[r] > 0) & (cand == 0)
        if np.any(np.abs(grad[off]) > lam[off] * (1.0 + 1e-9) + 1e-12):
            continue
        out[r] = cand  # optimality conditions hold: this is the row minimiser
    return out


def _respects_order(W: np.ndarray, previous: AdjacencyMatrix) -> bool:
    if not previous.dag_constrained or not previous.order:
        return False
    rank = np.empty(W.shape[0], dtype=int)
    rank[list(previous.order)] = np.arange(W.shape[0])
    rows, cols = np.nonzero(W)
    # entry (i, j) is the edge j -> i
    return bool(np.all(rank[cols] < rank[rows]))


def _break_cycles(W: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Drop the weakest edge lying on a cycle until the pattern is acyclic.

    Returns the pruned matrix and its topological order.
    """
    W = W.copy()
    order = _topological_order(W)
    while order is None:
        pattern = W != 0
        # closure[i, j]: some path j -> ... -> i; edge j -> i is on a cycle iff closure[j, i]
        closure = pattern.copy()
        while True:
            grown = closure | ((closure.astype(np.int32) @ closure.astype(np.int32)) > 0)
            if np.array_equal(grown, closure):
                break
            closure = grown
        idx = np.flatnonzero(pattern & closure.T)
        weakest = idx[np.argmin(W.flat[idx])]
        W.flat[weakest] = 0.0
        order = _topological_order(W)
    return W, order


def estimate_adjacency(buffer: FeedbackBuffer, config: LearnerConfig = LearnerConfig(),
                       warm_start: Optional[GraphEstimate] = None,
                       prior: Optional[np.ndarray] = None,
                       rowwise: bool = False) -> GraphEstimate:
    """Sparse SEM fit by proximal gradient with a zero-diagonal constraint.

    Minimises ||Y - W Y - Z||_F^2 + lambda1 * R(W) (+ lambda2 ||W - prior||_1),
    where R is the L1 norm or the directed total variation of Y.  ``prior``
    defaults to the warm start when lambda2 > 0.  Negative entries are
    clamped to zero afterwards; with cycles disallowed, the weakest edge of
    any remaining cycle is dropped.
    """
    if buffer.n < 1:
        raise InvalidInputError("cannot estimate a graph from an empty buffer")
    K = buffer.K
    mask = 1.0 - np.eye(K)
    weights = config.lambda1 * (buffer.hinge if config.regularizer == DTV else np.ones((K, K))) * mask
    anchor = None
    if config.lambda2 > 0:
        if prior is not None:
            anchor = np.asarray(prior, dtype=float)
        elif warm_start is not None:
            anchor = warm_start.W_hat
    gram, cross, energy = buffer.gram, buffer.cross, buffer.energy
    lipschitz = 2.0 * float(np.linalg.eigvalsh(gram)[-1])

    starts = [np.zeros((K, K))]
    if warm_start is not None:
        starts.append(np.array(warm_start.W_hat, dtype=float))
    else:
        ls = _least_squares_start(gram, cross, mask)
        if ls is not None:
            starts.append(ls)
    if anchor is not None:
        starts.append(anchor.copy())

    if rowwise:
        W = np.zeros((K, K))
        history = []
        iterations = 0
        for k in range(K):
            row = slice(k, k + 1)
            sub = _Problem(gram, cross[row], np.array([energy[k]]), mask[row], weights[row],
                           config.lambda2, None if anchor is None else anchor[row])
            w, _, it = _proximal_gradient(sub, [s[row] for s in starts], lipschitz,
                                          config.max_iters, config.step_tolerance,
                                          polish=warm_start is None)
            W[k] = w[0]
            iterations = max(iterations, it)
    problem = _Problem(gram, cross, energy, mask, weights, config.lambda2, anchor)
    if not rowwise:
        W, history, iterations = _proximal_gradient(problem, starts, lipschitz,
                                                    config.max_iters, config.step_tolerance,
                                                    polish=warm_start is None)

    W = np.maximum(W, 0.0)
    np.fill_diagonal(W, 0.0)
    if config.allow_cycles:
        graph = AdjacencyMatrix(W, dag_constrained=False)
    elif warm_start is not None and _respects_order(W, warm_start.graph):
        # every edge still points forward in the previous order, so it remains valid
        graph = AdjacencyMatrix.trusted(W, warm_start.graph.order)
    else:
        W, order = _break_cycles(W)
        graph = AdjacencyMatrix.trusted(W, order)
    return GraphEstimate(graph=graph, objective_value=problem.objective(graph.entries),
                         iterations=iterations, history=history)


def reconstruction_error(W, buffer: FeedbackBuffer) -> float:
    """||Y - W Y - Z||_F^2 over the buffer."""
    W = W.W_hat if isinstance(W, GraphEstimate) else np.asarray(W, dtype=float)
    return max(_smooth(W, buffer.gram, buffer.cross, buffer.energy), 0.0)


def grid_search_lambda(train: FeedbackBuffer, validation: FeedbackBuffer, grid,
                       config: LearnerConfig = LearnerConfig()) -> float:
    """lambda1 from ``grid`` minimising held-out reconstruction error (ties: smaller)."""
    grid = sorted(float(v) for v in grid)
    if not grid:
        raise InvalidInputError("empty lambda grid")
    best, best_err = grid[0], np.inf
    for lam in grid:
        cfg = LearnerConfig(lambda1=lam, lambda2=config.lambda2, regularizer=config.regularizer,
                            allow_cycles=config.allow_cycles, max_iters=config.max_iters,
                            step_tolerance=config.step_tolerance,
                            epsilon_residual=config.epsilon_residual)
        err = reconstruction_error(estimate_adjacency(train, cfg), validation)
        if err < best_err:
            best, best_err = lam, err
    return best

