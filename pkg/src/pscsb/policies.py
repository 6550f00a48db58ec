"""PS-SEM-UCB with group/local/global restarts and the benchmark policies.

Every policy follows the same two-call protocol per round::

    x = policy.select(t, graph)          # graph: true W_t, only read by baselines
    info = policy.observe(t, x, z, y)    # semi-bandit feedback of round t
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .changepoint import PRACTICAL, DetectorBank
from .graph_learn import (
    FeedbackBuffer,
    GraphEstimate,
    LearnerConfig,
    build_init_matrix,
    estimate_adjacency,
    residual_test,
)
from .sem_core import (
    InvalidInputError,
    Scenario,
    SingularSystemError,
    influence_vector,
    top_m_positive,
    total_group_segments,
)

LOCAL = "local"
GLOBAL = "global"
GROUP = "group"


class OmegaDisciplineError(AssertionError):
    """An arm without observations reached the greedy step unforced."""


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def ucb_index(mu_hat: float, n: int, t: int, tau: int, m: int) -> float:
    """mu_hat + sqrt((m + 1) ln(t - tau) / n)."""
    if n < 1:
        raise InvalidInputError("UCB index undefined for an arm with no observations")
    if t <= tau:
        raise InvalidInputError("UCB index needs t > tau")
    return mu_hat + math.sqrt((m + 1) * math.log(t - tau) / n)


def select_super_arm(c, W_hat, U, m: int, forced=None) -> np.ndarray:
    """Top-m positive entries of M = c^T (I - W_hat)^{-1} diag(U).

    ``forced`` marks arms that behave as if their index were +inf.
    """
    U = np.asarray(U, dtype=float)
    if isinstance(W_hat, GraphEstimate):
        W_hat = W_hat.graph
    M = influence_vector(c, W_hat) * np.where(np.isfinite(U), U, 0.0)
    return top_m_positive(M, m, None if forced is None else np.asarray(forced, dtype=bool))


@dataclass(frozen=True)
class RestartStrategy:
    kind: str
    grouping: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if self.kind not in (LOCAL, GLOBAL, GROUP):
            raise InvalidInputError(f"unknown restart strategy {self.kind!r}")
        members = sorted(k for g in self.grouping for k in g)
        if members != list(range(len(members))):
            raise InvalidInputError("grouping must partition the arms")
        owner = {}
        for g in self.grouping:
            for k in g:
                owner[k] = tuple(sorted(g))
        object.__setattr__(self, "_owner", owner)

    @property
    def K(self) -> int:
        return len(self._owner)

    def arms_to_restart(self, k: int) -> tuple[int, ...]:
        if self.kind == LOCAL:
            return (k,)
        if self.kind == GLOBAL:
            return tuple(range(self.K))
        return self._owner[k]


@dataclass
class RoundInfo:
    detections: tuple[int, ...] = ()
    restarted: tuple[int, ...] = ()
    graph_change: bool = False
    gldg: bool = False
    gldg_start: bool = False
    forced: bool = False


class Policy:
    """Common interface; subclasses override ``select`` and ``observe``."""

    name = "policy"
    uses_true_graph = False

    def reset(self, scenario: Scenario, rng: np.random.Generator) -> None:
        self.K = scenario.K
        self.T = scenario.T
        self.m = scenario.m
        self.c = np.asarray(scenario.c, dtype=float)
        self.grouping = scenario.grouping
        self.rng = rng
        self._graph_cache: tuple[object, np.ndarray] | None = None

    @property
    def graph_estimate(self) -> Optional[GraphEstimate]:
        return None

    def _influence(self, graph) -> np.ndarray:
        if self._graph_cache is None or self._graph_cache[0] is not graph:
            self._graph_cache = (graph, influence_vector(self.c, graph))
        return self._graph_cache[1]

    def select(self, t: int, graph=None) -> np.ndarray:
        raise NotImplementedError

    def observe(self, t: int, x, z, y) -> RoundInfo:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# PS-SEM-UCB family
# ---------------------------------------------------------------------------


class PsSemUcb(Policy):
    """UCB over base arms with GLR detectors, restarts, forced exploration
    and (optionally) online graph learning.

    ``learn_graph=False`` gives the GLR-CUCB baselines, which read the true
    graph passed to :meth:`select`.  ``oracle_restart=True`` disables the
    detectors and restarts the changed groups at the true change rounds.
    """

    def __init__(self, restart: str = GROUP, *, learn_graph: bool = True,
                 oracle_restart: bool = False, delta: Optional[float] = None,
                 p: Optional[float] = None, known_segments: bool = False,
                 learner: LearnerConfig = LearnerConfig(),
                 threshold_mode: str = PRACTICAL, stride: int = 1,
                 check_invariants: bool = False, name: Optional[str] = None) -> None:
        if restart not in (LOCAL, GLOBAL, GROUP):
            raise InvalidInputError(f"unknown restart strategy {restart!r}")
        if p is not None and not 0.0 < p < 1.0:
            raise InvalidInputError("p must lie in (0, 1)")
        if delta is not None and not 0.0 < delta < 1.0:
            raise InvalidInputError("delta must lie in (0, 1)")
        self.restart_kind = restart
        self.learn_graph = learn_graph
        self.oracle_restart = oracle_restart
        self.delta_param = delta
        self.p_param = p
        self.known_segments = known_segments
        self.learner = learner
        self.threshold_mode = threshold_mode
        self.stride = stride
        self.check_invariants = check_invariants
        self.uses_true_graph = not learn_graph
        self.name = name or self._default_name()

    def _default_name(self) -> str:
        suffix = {GROUP: "gr", LOCAL: "lo", GLOBAL: "gl"}[self.restart_kind]
        if self.oracle_restart:
            return "orc-r"
        if self.learn_graph:
            return f"ps-sem-ucb-{suffix}"
        return "glr-cucb" if self.restart_kind == GLOBAL else f"glr-cucb-{suffix}"

    # -- setup --------------------------------------------------------------

    def reset(self, scenario: Scenario, rng: np.random.Generator) -> None:
        super().reset(scenario, rng)
        K, T = self.K, self.T
        self.strategy = RestartStrategy(self.restart_kind, scenario.grouping)
        self.delta = self.delta_param if self.delta_param is not None else 1.0 / max(T, 2)
        if self.p_param is not None:
            self.p = self.p_param
        elif self.known_segments and T > 1:
            n_g = total_group_segments(scenario)
            self.p = min(math.sqrt(n_g * K * math.log(T) / T), 0.5)
        else:
            self.p = 0.05
        self.period = max(1, int(math.floor(K / self.p)))

        self.n = np.zeros(K, dtype=np.int64)
        self.sums = np.zeros(K)
        self.tau = np.zeros(K, dtype=np.int64)
        self.tau_prime = 0
        self.omega: deque[int] = deque()
        self.U = np.full(K, np.nan)
        self.detectors = None if self.oracle_restart else DetectorBank(
            K, self.delta, self.threshold_mode, self.stride)

        self.flag = 1 if self.learn_graph else 0
        self.init = build_init_matrix(K, self.m)
        self.init_cursor = 0
        self.buffer = FeedbackBuffer(K)
        self.estimate: Optional[GraphEstimate] = None
        self.previous_estimate: Optional[GraphEstimate] = None
        self._round_gldg = False
        self._round_forced = False
        self._pending_restart: tuple[int, ...] = ()

        self._oracle_schedule: dict[int, tuple[int, ...]] = {}
        if self.oracle_restart:
            for i in range(1, len(scenario.dist_segments)):
                start = scenario.dist_segments[i].start
                arms = sorted(k for gi in scenario.changed_groups(i) for k in scenario.grouping[gi])
                if arms:
                    self._oracle_schedule[start] = tuple(arms)

    @property
    def mu_hat(self) -> np.ndarray:
        return np.divide(self.sums, self.n, out=np.zeros(self.K), where=self.n > 0)

    @property
    def graph_estimate(self) -> Optional[GraphEstimate]:
        return self.estimate

    # -- restarts -----------------------------------------------------------

    def _restart(self, arms, t: int, anchor: int) -> None:
        arms = list(arms)
        self.n[arms] = 0
        self.sums[arms] = 0.0
        self.tau[arms] = anchor
        self.U[arms] = np.nan
        if self.detectors is not None:
            self.detectors.reset(arms)
        self.tau_prime = anchor
        for k in sorted(arms):
            if k not in self.omega:
                self.omega.append(k)

    # -- action selection ---------------------------------------------------

    def _forced_super_arm(self) -> np.ndarray:
        a = self.omega.popleft()
        chosen = [a]
        need = self.m - 1
        if need and self.omega:
            pool = list(self.omega)
            take = pool if len(pool) <= need else [pool[i] for i in sorted(
                self.rng.choice(len(pool), size=need, replace=False))]
            for k in take:
                self.omega.remove(k)
            chosen.extend(take)
            need -= len(take)
        if need:
            rest = np.setdiff1d(np.arange(self.K), chosen)
            chosen.extend(self.rng.choice(rest, size=min(need, rest.size), replace=False).tolist())
        x = np.zeros(self.K, dtype=np.int8)
        x[chosen] = 1
        return x

    def _greedy_super_arm(self, graph) -> np.ndarray:
        if self.learn_graph:
            v = self._influence(self.estimate.graph)
        else:
            if graph is None:
                raise InvalidInputError(f"{self.name} needs the true graph every round")
            v = self._influence(graph)
        forced = self.n == 0
        scores = v * np.where(forced, 0.0, self.U)
        x = top_m_positive(scores, self.m, forced)
        if self.check_invariants:
            unforced = forced & (x == 0)
            if unforced.any() and forced.sum() <= self.m:
                raise OmegaDisciplineError(
                    f"arms {np.flatnonzero(unforced).tolist()} have no observations and were skipped")
            if np.any(~forced & ~np.isfinite(self.U)):
                raise OmegaDisciplineError("observed arm without a UCB index")
        return x

    def select(self, t: int, graph=None) -> np.ndarray:
        self._pending_restart = ()
        if self._oracle_schedule and t in self._oracle_schedule:
            arms = self._oracle_schedule[t]
            self._restart(arms, t, anchor=t - 1)
            self._pending_restart = arms
        self._round_gldg = bool(self.learn_graph and self.flag)
        self._round_forced = False
        if self._round_gldg:
            return self.init[:, self.init_cursor].copy()
        if self.omega:
            self._round_forced = True
            return self._forced_super_arm()
        return self._greedy_super_arm(graph)

    # -- feedback -----------------------------------------------------------

    def observe(self, t: int, x, z, y) -> RoundInfo:
        x = np.asarray(x)
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        info = RoundInfo(gldg=self._round_gldg, forced=self._round_forced,
                         gldg_start=self._round_gldg and self.init_cursor == 0)
        detections: list[int] = []
        restarted: list[int] = list(self._pending_restart)

        played = np.flatnonzero(x)
        self.n[played] += 1
        self.sums[played] += z[played]
        if self.detectors is not None:
            for k in played:
                if self.detectors[k].push(min(max(float(z[k]), 0.0), 1.0)):
                    detections.append(int(k))
            for k in detections:
                if self.n[k] == 0:
                    continue  # already restarted by a fire earlier this round
                arms = self.strategy.arms_to_restart(k)
                self._restart(arms, t, anchor=t)
                restarted.extend(a for a in arms if a not in restarted)

        if not self._round_gldg and t - self.tau_prime > 0 and (t - self.tau_prime) % self.period == 0:
            self.omega = deque(range(self.K))

        seen = self.n > 0
        if seen.any():
            elapsed = (t - self.tau[seen]).astype(float)
            self.U[seen] = self.sums[seen] / self.n[seen] + np.sqrt(
                (self.m + 1) * np.log(elapsed) / self.n[seen])

        if self.learn_graph:
            self.buffer.append(y, z)
            if self._round_gldg:
                self.init_cursor += 1
                if self.init_cursor == self.K:
                    self._refit(warm=False)
                    self.flag = 0
                    self.init_cursor = 0
            elif residual_test(self.estimate.W_hat, y, z, self.learner.epsilon_residual):
                info.graph_change = True
                self.previous_estimate = self.estimate
                self.flag = 1
                self.init_cursor = 0
                self.buffer.clear()
            else:
                self._refit(warm=True)

        info.detections = tuple(detections)
        info.restarted = tuple(restarted)
        if self.check_invariants:
            self._check_state()
        return info

    def _refit(self, warm: bool) -> None:
        prior = self.previous_estimate.W_hat if (
            self.previous_estimate is not None and self.learner.lambda2 > 0) else None
        try:
            self.estimate = estimate_adjacency(
                self.buffer, self.learner,
                warm_start=self.estimate if warm else None, prior=prior)
        except SingularSystemError:
            # cyclic estimate with spectral radius >= 1: keep the last usable one
            if self.estimate is None:
                raise

    def _check_state(self) -> None:
        if len(set(self.omega)) != len(self.omega):
            raise OmegaDisciplineError("duplicate arm in the restart queue")
        mu = self.mu_hat[self.n > 0]
        if np.any(mu < 0) or np.any(mu > 1):
            raise OmegaDisciplineError("empirical mean outside [0, 1]")


# ---------------------------------------------------------------------------
# Stationary / passive baselines (true graph required)
# ---------------------------------------------------------------------------


class CucbSlidingWindow(Policy):
    """CUCB whose statistics use only each arm's last ``window`` observations."""

    uses_true_graph = True

    def __init__(self, window: Optional[int] = None, name: str = "cucb-sw") -> None:
        if window is not None and window < 1:
            raise InvalidInputError("window must be >= 1")
        self.window_param = window
        self.name = name

    def reset(self, scenario: Scenario, rng: np.random.Generator) -> None:
        super().reset(scenario, rng)
        T = self.T
        self.window = self.window_param or max(1, int(math.ceil(math.sqrt(T * math.log(max(T, 2))))))
        self.history = [deque(maxlen=self.window) for _ in range(self.K)]
        self.U = np.full(self.K, np.nan)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(h) for h in self.history])

    @property
    def mu_hat(self) -> np.ndarray:
        return np.array([sum(h) / len(h) if h else 0.0 for h in self.history])

    def select(self, t: int, graph=None) -> np.ndarray:
        if graph is None:
            raise InvalidInputError(f"{self.name} needs the true graph every round")
        forced = ~np.isfinite(self.U)
        scores = self._influence(graph) * np.where(forced, 0.0, self.U)
        return top_m_positive(scores, self.m, forced)

    def observe(self, t: int, x, z, y) -> RoundInfo:
        for k in np.flatnonzero(x):
            self.history[k].append(float(z[k]))
        tau = max(0, t - self.window)
        for k in range(self.K):
            h = self.history[k]
            if h:
                self.U[k] = sum(h) / len(h) + math.sqrt((self.m + 1) * math.log(t - tau) / len(h))
        return RoundInfo()


class CombinatorialThompson(Policy):
    """Beta-Bernoulli Thompson sampling with Bernoulli resampling of [0, 1] feedback."""

    uses_true_graph = True

    def __init__(self, name: str = "cts") -> None:
        self.name = name

    def reset(self, scenario: Scenario, rng: np.random.Generator) -> None:
        super().reset(scenario, rng)
        self.a = np.ones(self.K)
        self.b = np.ones(self.K)

    @property
    def posterior_mean(self) -> np.ndarray:
        return self.a / (self.a + self.b)

    def select(self, t: int, graph=None) -> np.ndarray:
        if graph is None:
            raise InvalidInputError(f"{self.name} needs the true graph every round")
        theta = self.rng.beta(self.a, self.b)
        return top_m_positive(self._influence(graph) * theta, self.m)

    def observe(self, t: int, x, z, y) -> RoundInfo:
        played = np.flatnonzero(x)
        success = self.rng.random(played.size) < np.asarray(z, dtype=float)[played]
        self.a[played] += success
        self.b[played] += ~success
        return RoundInfo()


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

POLICY_NAMES = (
    "ps-sem-ucb-gr", "ps-sem-ucb-lo", "ps-sem-ucb-gl",
    "glr-cucb", "glr-cucb-lo", "glr-cucb-gr",
    "cucb-sw", "cts", "orc-r",
)


def _learner_from(params: dict) -> LearnerConfig:
    keys = ("lambda1", "lambda2", "regularizer", "allow_cycles", "max_iters",
            "step_tolerance", "epsilon_residual")
    return LearnerConfig(**{k: params.pop(k) for k in keys if k in params})


def make_policy(name: str, **params) -> Policy:
    """Build a policy from its registry name and a parameter map."""
    params = dict(params)
    if name == "cucb-sw":
        return CucbSlidingWindow(**params)
    if name == "cts":
        return CombinatorialThompson(**params)
    restart = {"gr": GROUP, "lo": LOCAL, "gl": GLOBAL}
    if name.startswith("ps-sem-ucb-") and name[-2:] in restart:
        return PsSemUcb(restart[name[-2:]], learner=_learner_from(params), **params)
    if name == "glr-cucb":
        return PsSemUcb(GLOBAL, learn_graph=False, **params)
    if name in ("glr-cucb-lo", "glr-cucb-gr"):
        return PsSemUcb(restart[name[-2:]], learn_graph=False, **params)
    if name == "orc-r":
        return PsSemUcb(GROUP, oracle_restart=True, learner=_learner_from(params), **params)
    raise InvalidInputError(f"unknown policy {name!r}; known: {', '.join(POLICY_NAMES)}")
