"""Piecewise-stationary SEM environment.

Rewards follow an error-free linear structural equation model

    y = W y + z,    z = diag(b) x,

where ``b`` holds the instantaneous rewards of the base arms, ``x`` is the
played decision vector and ``W`` the (piecewise constant) causal adjacency
matrix.  Arms are 0-based inside the library; rounds are 1-based everywhere.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import special


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class SingularSystemError(ArithmeticError):
    """Raised when ``I - W`` is singular (only possible for cyclic graphs)."""


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


def _topological_order(entries: np.ndarray) -> Optional[list[int]]:
    """Repeated elimination of zero in-degree nodes; ``None`` if a cycle remains.

    ``entries[i, j] != 0`` is an edge j -> i (arm j influences arm i).  Each
    pass removes a whole layer of sources.
    """
    K = entries.shape[0]
    pattern = entries != 0
    remaining = np.ones(K, dtype=bool)
    order: list[int] = []
    while len(order) < K:
        ready = remaining & ~pattern[:, remaining].any(axis=1)
        if not ready.any():
            return None
        order.extend(np.flatnonzero(ready).tolist())
        remaining &= ~ready
    return order


def validate_dag(W) -> bool:
    """Return True iff the nonzero pattern of ``W`` admits a topological order."""
    entries = W.entries if isinstance(W, AdjacencyMatrix) else np.asarray(W, dtype=float)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise InvalidInputError("adjacency matrix must be square")
    if np.any(np.diag(entries) != 0):
        raise InvalidInputError("adjacency matrix has a nonzero diagonal entry")
    return _topological_order(entries) is not None


def is_nilpotent_pattern(entries: np.ndarray) -> bool:
    """Check that the K-th power of the 0/1 sparsity pattern vanishes.

    Boolean products keep the check exact regardless of weights.
    """
    pattern = (np.asarray(entries) != 0).astype(np.int64)
    K = pattern.shape[0]
    power = np.eye(K, dtype=np.int64)
    for _ in range(K):
        power = ((power @ pattern) > 0).astype(np.int64)
        if not power.any():
            return True
    return not power.any()


def spectral_radius(entries: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(entries)))) if entries.size else 0.0


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    """Nonnegative weighted causal graph with zero diagonal.

    ``entries[i, j]`` is the causal effect of arm j's overall reward on arm i's.
    DAG-constrained matrices carry a topological order used for exact
    back-substitution; cyclic ones must have spectral radius below one.
    """

    entries: np.ndarray
    dag_constrained: bool = True
    order: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        W = np.array(self.entries, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise InvalidInputError(f"adjacency matrix must be square, got shape {W.shape}")
        if np.any(np.diag(W) != 0):
            raise InvalidInputError("adjacency matrix has a nonzero diagonal entry")
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise InvalidInputError("adjacency entries must be finite and nonnegative")
        W.setflags(write=False)
        object.__setattr__(self, "entries", W)
        order = _topological_order(W)
        if self.dag_constrained:
            if order is None:
                raise InvalidInputError("dag_constrained matrix contains a cycle")
        elif order is None and spectral_radius(W) >= 1.0:
            raise SingularSystemError("cyclic adjacency matrix with spectral radius >= 1")
        object.__setattr__(self, "order", tuple(order) if order is not None else ())

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def trusted(cls, entries: np.ndarray, order) -> "AdjacencyMatrix":
        """Skip validation for a matrix already known to be a nonnegative DAG
        with the given topological order (used on the solver's hot path)."""
        obj = cls.__new__(cls)
        W = np.array(entries, dtype=float)
        W.setflags(write=False)
        object.__setattr__(obj, "entries", W)
        object.__setattr__(obj, "dag_constrained", True)
        object.__setattr__(obj, "order", tuple(order))
        return obj

    @classmethod
    def zeros(cls, K: int) -> "AdjacencyMatrix":
        return cls(np.zeros((K, K)))

    def solve(self, z: np.ndarray) -> np.ndarray:
        """Solve ``(I - W) y = z``."""
        z = np.asarray(z, dtype=float)
        W = self.entries
        if not self.order:
            return _generic_solve(W, z)
        y = np.zeros_like(z)
        for k in self.order:  # parents first
            y[k] = z[k] + W[k] @ y
        return y

    def solve_transpose(self, c: np.ndarray) -> np.ndarray:
        """Solve ``v^T (I - W) = c^T``, i.e. ``v = (I - W)^{-T} c``."""
        c = np.asarray(c, dtype=float)
        W = self.entries
        if not self.order:
            return _generic_solve(W.T, c)
        v = np.zeros_like(c)
        for j in reversed(self.order):  # children first
            v[j] = c[j] + W[:, j] @ v
        return v

    def to_list(self) -> list[list[float]]:
        return self.entries.tolist()


def _generic_solve(W: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    A = np.eye(W.shape[0]) - W
    try:
        out = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("I - W is singular") from exc
    if not np.all(np.isfinite(out)):
        raise SingularSystemError("I - W is numerically singular")
    return out


def influence_vector(c: np.ndarray, W) -> np.ndarray:
    """``c^T (I - W)^{-1}`` as a vector: total weight of each arm on the payoff."""
    if isinstance(W, AdjacencyMatrix):
        return W.solve_transpose(c)
    return _generic_solve(np.asarray(W, dtype=float).T, np.asarray(c, dtype=float))


def random_dag(K: int, density: float, weight_range: tuple[float, float], rng) -> AdjacencyMatrix:
    """Random weighted DAG with ``round(density * K(K-1)/2)`` edges.

    A random permutation fixes the topological order; edges are sampled among
    order-respecting pairs, weights uniform on ``weight_range``.
    """
    if not 0.0 <= density <= 1.0:
        raise InvalidInputError("density must lie in [0, 1]")
    lo, hi = weight_range
    if not 0.0 <= lo <= hi:
        raise InvalidInputError("weight_range must satisfy 0 <= low <= high")
    perm = rng.permutation(K)
    pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]
    n_edges = int(round(density * len(pairs)))
    W = np.zeros((K, K))
    if n_edges:
        chosen = rng.choice(len(pairs), size=n_edges, replace=False)
        weights = rng.uniform(lo, hi, size=n_edges)
        for idx, w in zip(np.sort(chosen), weights):
            a, b = pairs[idx]
            W[perm[b], perm[a]] = w  # perm[a] precedes perm[b]
    return AdjacencyMatrix(W)


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


def truncated_mean(mu, noise_scale: float) -> np.ndarray:
    """Mean of N(mu, noise_scale^2) truncated to [0, 1], per coordinate."""
    mu = np.asarray(mu, dtype=float)
    if noise_scale == 0:
        return mu.copy()
    a = (0.0 - mu) / noise_scale
    b = (1.0 - mu) / noise_scale
    mass = special.ndtr(b) - special.ndtr(a)
    pdf_a = np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
    pdf_b = np.exp(-0.5 * b * b) / math.sqrt(2 * math.pi)
    return np.clip(mu + noise_scale * (pdf_a - pdf_b) / mass, 0.0, 1.0)


def draw_instantaneous_rewards(mu, noise_scale: float, rng, size: Optional[int] = None) -> np.ndarray:
    """Independent truncated-normal draws on [0, 1] by inverse-CDF sampling.

    Returns shape ``(K,)``, or ``(size, K)`` when ``size`` is given.
    """
    mu = np.asarray(mu, dtype=float)
    if noise_scale < 0:
        raise InvalidInputError("noise_scale must be nonnegative")
    shape = mu.shape if size is None else (size,) + mu.shape
    if noise_scale == 0:
        return np.broadcast_to(mu, shape).copy()
    lo = special.ndtr((0.0 - mu) / noise_scale)
    hi = special.ndtr((1.0 - mu) / noise_scale)
    u = rng.random(shape)
    draws = mu + noise_scale * special.ndtri(lo + u * (hi - lo))
    return np.clip(draws, 0.0, 1.0)


@dataclass
class RoundFeedback:
    z: np.ndarray
    y: np.ndarray
    payoff: Optional[float] = None


def sem_output(W, b, x) -> RoundFeedback:
    """Exogenous input ``z = diag(b) x`` and overall reward ``y = (I - W)^{-1} z``."""
    z = np.asarray(b, dtype=float) * np.asarray(x, dtype=float)
    if isinstance(W, AdjacencyMatrix):
        y = W.solve(z)
    else:
        y = _generic_solve(np.asarray(W, dtype=float), z)
    return RoundFeedback(z=z, y=y)


def payoff(c, y) -> float:
    return float(np.dot(c, y))


def expected_payoff(c, W, mu, x) -> float:
    """``c^T (I - W)^{-1} diag(mu) x`` with ``mu`` the post-truncation means."""
    v = influence_vector(c, W)
    return float(np.dot(v * np.asarray(mu, dtype=float), np.asarray(x, dtype=float)))


def top_m_positive(scores: np.ndarray, m: int, forced: Optional[np.ndarray] = None) -> np.ndarray:
    """0/1 vector of the ``m`` largest strictly positive scores (ties: lowest index).

    Arms in ``forced`` are included first, as if their score were +inf.
    """
    K = scores.shape[0]
    x = np.zeros(K, dtype=np.int8)
    budget = m
    if forced is not None and forced.any():
        forced_idx = np.flatnonzero(forced)[:m]
        x[forced_idx] = 1
        budget -= forced_idx.size
    if budget <= 0:
        return x
    # stable sort on -score keeps lowest index first among ties
    ranked = np.argsort(-scores, kind="stable")
    for k in ranked:
        if budget == 0 or scores[k] <= 0:
            break
        if not x[k]:
            x[k] = 1
            budget -= 1
    return x


def optimal_action(c, W, mu, m: int) -> tuple[np.ndarray, float]:
    """Exact maximiser of the expected payoff over vectors with at most m ones."""
    M = influence_vector(c, W) * np.asarray(mu, dtype=float)
    x = top_m_positive(M, m)
    return x, float(M @ x)


def brute_force_optimum(c, W, mu, m: int) -> tuple[np.ndarray, float]:
    """Enumerate every feasible decision vector; reference oracle for tests."""
    c = np.asarray(c, dtype=float)
    K = c.shape[0]
    Wm = W.entries if isinstance(W, AdjacencyMatrix) else np.asarray(W, dtype=float)
    inv = np.linalg.inv(np.eye(K) - Wm)
    best_x, best_val = np.zeros(K, dtype=np.int8), 0.0
    for size in range(1, m + 1):
        for subset in itertools.combinations(range(K), size):
            x = np.zeros(K)
            x[list(subset)] = 1
            val = float(c @ inv @ (np.asarray(mu, dtype=float) * x))
            if val > best_val:
                best_x, best_val = x.astype(np.int8), val
    return best_x, best_val


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DistSegment:
    start: int
    mu: np.ndarray
    noise_scale: float

    def __post_init__(self) -> None:
        mu = np.array(self.mu, dtype=float)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    def mean(self) -> np.ndarray:
        return truncated_mean(self.mu, self.noise_scale)

    def same_distribution(self, other: "DistSegment", k: int) -> bool:
        return self.mu[k] == other.mu[k] and self.noise_scale == other.noise_scale


@dataclass(frozen=True, eq=False)
class Scenario:
    """Full description of a piecewise-stationary causal semi-bandit."""

    K: int
    T: int
    m: int
    c: np.ndarray
    graph_segments: tuple[tuple[int, AdjacencyMatrix], ...]
    dist_segments: tuple[DistSegment, ...]
    grouping: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        c = np.array(self.c, dtype=float)
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "graph_segments", tuple((int(s), W) for s, W in self.graph_segments))
        object.__setattr__(self, "dist_segments", tuple(self.dist_segments))
        object.__setattr__(self, "grouping", tuple(tuple(int(k) for k in g) for g in self.grouping))
        self.validate()

    def validate(self) -> None:
        K = self.K
        if K < 1 or self.T < 1:
            raise InvalidInputError("K and T must be positive")
        if not 1 <= self.m <= K:
            raise InvalidInputError("m must satisfy 1 <= m <= K")
        if self.c.shape != (K,) or not np.all(np.isin(self.c, (0.0, 1.0))):
            raise InvalidInputError("c must be a 0/1 vector of length K")
        gstarts = [s for s, _ in self.graph_segments]
        if not gstarts or gstarts[0] != 1 or any(b <= a for a, b in zip(gstarts, gstarts[1:])):
            raise InvalidInputError("graph segment starts must increase strictly from 1")
        if any(b - a < K + 1 for a, b in zip(gstarts, gstarts[1:])):
            raise InvalidInputError("consecutive graph changes must be at least K+1 rounds apart")
        if gstarts[-1] > self.T:
            raise InvalidInputError("graph segment starts beyond the horizon")
        for _, W in self.graph_segments:
            if W.K != K:
                raise InvalidInputError("graph segment has wrong dimension")
        dstarts = [d.start for d in self.dist_segments]
        if not dstarts or dstarts[0] != 1 or any(b <= a for a, b in zip(dstarts, dstarts[1:])):
            raise InvalidInputError("distribution segment starts must increase strictly from 1")
        if dstarts[-1] > self.T:
            raise InvalidInputError("distribution segment starts beyond the horizon")
        for d in self.dist_segments:
            if d.mu.shape != (K,) or np.any(d.mu < 0) or np.any(d.mu > 1):
                raise InvalidInputError("segment means must be a K-vector in [0, 1]")
            if d.noise_scale < 0:
                raise InvalidInputError("noise_scale must be nonnegative")
        members = sorted(k for g in self.grouping for k in g)
        if members != list(range(K)) or any(len(g) == 0 for g in self.grouping):
            raise InvalidInputError("grouping must partition the arms into nonempty groups")

    # -- lookups ------------------------------------------------------------

    @property
    def graph_change_rounds(self) -> list[int]:
        return [s for s, _ in self.graph_segments[1:]]

    @property
    def dist_change_rounds(self) -> list[int]:
        return [d.start for d in self.dist_segments[1:]]

    def graph_at(self, t: int) -> AdjacencyMatrix:
        starts = [s for s, _ in self.graph_segments]
        return self.graph_segments[int(np.searchsorted(starts, t, side="right")) - 1][1]

    def dist_at(self, t: int) -> DistSegment:
        starts = [d.start for d in self.dist_segments]
        return self.dist_segments[int(np.searchsorted(starts, t, side="right")) - 1]

    def group_of(self) -> np.ndarray:
        owner = np.empty(self.K, dtype=int)
        for gi, g in enumerate(self.grouping):
            owner[list(g)] = gi
        return owner

    def changed_groups(self, seg_index: int) -> list[int]:
        """Indices of groups with at least one arm whose distribution changes
        at the start of distribution segment ``seg_index`` (>= 1)."""
        prev, cur = self.dist_segments[seg_index - 1], self.dist_segments[seg_index]
        return [
            gi for gi, g in enumerate(self.grouping)
            if any(not prev.same_distribution(cur, k) for k in g)
        ]

    def intervals(self) -> Iterator[tuple[int, int, AdjacencyMatrix, DistSegment]]:
        """Maximal round ranges ``[start, end]`` with a fixed graph and distribution."""
        bounds = sorted({1, *self.graph_change_rounds, *self.dist_change_rounds, self.T + 1})
        for start, nxt in zip(bounds, bounds[1:]):
            if start > self.T:
                break
            yield start, nxt - 1, self.graph_at(start), self.dist_at(start)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "T": self.T,
            "m": self.m,
            "c": [int(v) for v in self.c],
            "grouping": [[k + 1 for k in g] for g in self.grouping],
            "graph_segments": [
                {"start": s, "dag_constrained": W.dag_constrained, "W": W.to_list()}
                for s, W in self.graph_segments
            ],
            "dist_segments": [
                {"start": d.start, "mu": d.mu.tolist(), "noise_scale": d.noise_scale}
                for d in self.dist_segments
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        try:
            return cls(
                K=int(doc["K"]),
                T=int(doc["T"]),
                m=int(doc["m"]),
                c=np.asarray(doc["c"], dtype=float),
                graph_segments=tuple(
                    (int(g["start"]), AdjacencyMatrix(np.asarray(g["W"], dtype=float),
                                                      bool(g.get("dag_constrained", True))))
                    for g in doc["graph_segments"]
                ),
                dist_segments=tuple(
                    DistSegment(int(d["start"]), np.asarray(d["mu"], dtype=float), float(d["noise_scale"]))
                    for d in doc["dist_segments"]
                ),
                grouping=tuple(tuple(int(k) - 1 for k in g) for g in doc["grouping"]),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed scenario document: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def group_segment_count(scenario: Scenario, g: Sequence[int]) -> int:
    """Number of distribution-stationary segments seen by group ``g``."""
    segs = scenario.dist_segments
    changes = sum(
        1 for prev, cur in zip(segs, segs[1:])
        if cur.start <= scenario.T and any(not prev.same_distribution(cur, k) for k in g)
    )
    return 1 + changes


def total_group_segments(scenario: Scenario) -> int:
    return sum(group_segment_count(scenario, g) for g in scenario.grouping)


def cumulative_regret(actions, scenario: Scenario) -> np.ndarray:
    """Running sum of expected-payoff gaps to the per-round optimum.

    ``actions`` is a ``(T, K)`` array of played vectors, or any object with an
    ``actions`` attribute (e.g. an episode trace).
    """
    X = np.asarray(getattr(actions, "actions", actions), dtype=float)
    if X.shape != (scenario.T, scenario.K):
        raise InvalidInputError("action history does not cover rounds 1..T")
    inc = np.empty(scenario.T)
    for start, end, W, dist in scenario.intervals():
        M = influence_vector(scenario.c, W) * dist.mean()
        _, best = optimal_action(scenario.c, W, dist.mean(), scenario.m)
        inc[start - 1:end] = best - X[start - 1:end] @ M
    # round-off only; x* is the argmax
    inc[(inc < 0) & (inc > -1e-12)] = 0.0
    return np.cumsum(inc)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticParams:
    K: int = 18
    T: int = 25000
    m: int = 4
    group_sizes: tuple[int, ...] = (6, 6, 6)
    n_graph_changes: int = 4
    n_dist_changes: int = 4
    density: float = 0.15
    weight_range: tuple[float, float] = (0.1, 0.9)
    noise_scale: float = 0.05
    c: Optional[tuple[int, ...]] = None
    # None: a random nonempty subset of groups changes at each breakpoint
    groups_per_change: Optional[int] = None

    @classmethod
    def full_scale(cls) -> "SyntheticParams":
        return cls()


def generate_synthetic_scenario(params: SyntheticParams, rng) -> Scenario:
    """Random piecewise-stationary scenario.

    Distribution segments have equal length.  The j-th graph change sits at
    the midpoint of the j-th cell of an equal split of the horizon into
    ``n_graph_changes + 1`` cells, so graph and distribution changes never
    coincide when their counts match.
    """
    K, T = params.K, params.T
    if sum(params.group_sizes) != K or any(s < 1 for s in params.group_sizes):
        raise InvalidInputError("group sizes must be positive and sum to K")
    if not 1 <= params.m <= K:
        raise InvalidInputError("m must satisfy 1 <= m <= K")
    if params.n_graph_changes < 0 or params.n_dist_changes < 0:
        raise InvalidInputError("change counts must be nonnegative")
    n_groups = len(params.group_sizes)
    if params.groups_per_change is not None and not 1 <= params.groups_per_change <= n_groups:
        raise InvalidInputError("groups_per_change must lie in [1, number of groups]")

    dist_starts = [1 + (i * T) // (params.n_dist_changes + 1) for i in range(params.n_dist_changes + 1)]
    ng = params.n_graph_changes
    graph_starts = [1] + [1 + ((2 * j - 1) * T) // (2 * (ng + 1)) for j in range(1, ng + 1)]
    if any(b <= a for a, b in zip(dist_starts, dist_starts[1:])):
        raise InvalidInputError("too many distribution changes for the horizon")
    if any(b - a < K + 1 for a, b in zip(graph_starts, graph_starts[1:])):
        raise InvalidInputError("graph changes too dense: need at least K+1 rounds between changes")

    offsets = np.cumsum((0,) + tuple(params.group_sizes))
    grouping = tuple(tuple(range(offsets[i], offsets[i + 1])) for i in range(n_groups))

    graphs = [random_dag(K, params.density, params.weight_range, rng) for _ in graph_starts]

    mu = rng.uniform(0.0, 1.0, size=K)
    segments = [DistSegment(1, mu, params.noise_scale)]
    for start in dist_starts[1:]:
        if params.groups_per_change is None:
            chosen = np.flatnonzero(rng.random(n_groups) < 0.5)
            while chosen.size == 0:
                chosen = np.flatnonzero(rng.random(n_groups) < 0.5)
        else:
            chosen = np.sort(rng.choice(n_groups, size=params.groups_per_change, replace=False))
        mu = mu.copy()
        for gi in chosen:
            arms = list(grouping[gi])
            mu[arms] = rng.uniform(0.0, 1.0, size=len(arms))
        segments.append(DistSegment(start, mu, params.noise_scale))

    c = np.ones(K) if params.c is None else np.asarray(params.c, dtype=float)
    return Scenario(
        K=K, T=T, m=params.m, c=c,
        graph_segments=tuple(zip(graph_starts, graphs)),
        dist_segments=tuple(segments),
        grouping=grouping,
    )
