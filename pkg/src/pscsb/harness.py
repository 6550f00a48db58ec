"""Episode and replicated-experiment runners, metrics and CSV export."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .policies import Policy, make_policy
from .sem_core import (
    InvalidInputError,
    Scenario,
    SyntheticParams,
    draw_instantaneous_rewards,
    generate_synthetic_scenario,
    influence_vector,
    optimal_action,
)

SeedLike = Union[int, np.random.SeedSequence]


def mse(W_true, W_hat) -> float:
    """||W - W_hat||_F^2 / K^2."""
    A = getattr(W_true, "entries", W_true)
    B = getattr(W_hat, "W_hat", getattr(W_hat, "entries", W_hat))
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2:
        raise InvalidInputError(f"shape mismatch: {A.shape} vs {B.shape}")
    return float(np.sum((A - B) ** 2) / A.shape[0] ** 2)


@dataclass
class EpisodeTrace:
    """One record per round; arrays are indexed by ``t - 1``."""

    policy: str
    actions: np.ndarray
    z: np.ndarray
    y: np.ndarray
    payoff: np.ndarray
    regret: np.ndarray              # per-round increments
    mse: np.ndarray                 # nan for policies without a graph estimate
    gldg: np.ndarray
    gldg_start: np.ndarray
    graph_change: np.ndarray
    detections: dict = field(default_factory=dict)   # t -> fired arms
    restarts: dict = field(default_factory=dict)     # t -> restarted arms

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.regret)

    def record(self, t: int) -> dict:
        i = t - 1
        return {
            "t": t,
            "x": self.actions[i].copy(),
            "z": self.z[i].copy(),
            "y": self.y[i].copy(),
            "payoff": float(self.payoff[i]),
            "regret": float(self.regret[i]),
            "detections": self.detections.get(t, ()),
            "restarted": self.restarts.get(t, ()),
            "graph_change": bool(self.graph_change[i]),
            "gldg": bool(self.gldg[i]),
            "mse": float(self.mse[i]),
        }


def _seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def replication_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    """Independent stream for replication ``rep``; unaffected by the total count."""
    return np.random.SeedSequence(master_seed, spawn_key=(rep,))


def draw_reward_matrix(scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Instantaneous rewards of every arm for rounds 1..T (shape T x K)."""
    B = np.empty((scenario.T, scenario.K))
    segs = scenario.dist_segments
    for i, seg in enumerate(segs):
        end = segs[i + 1].start - 1 if i + 1 < len(segs) else scenario.T
        if seg.start > scenario.T:
            break
        B[seg.start - 1:end] = draw_instantaneous_rewards(seg.mu, seg.noise_scale, rng,
                                                          size=end - seg.start + 1)
    return B


def run_episode(scenario: Scenario, policy: Policy, seed: SeedLike) -> EpisodeTrace:
    """Play ``policy`` for T rounds.  Environment and policy use independent
    child streams of ``seed``; the reward matrix depends only on the seed, so
    different policies run with the same seed see identical rewards."""
    env_ss, pol_ss = _seed_sequence(seed).spawn(2)
    env_rng = np.random.default_rng(env_ss)
    policy.reset(scenario, np.random.default_rng(pol_ss))
    if policy.K != scenario.K:
        raise InvalidInputError("policy and scenario disagree on the number of arms")
    T, K = scenario.T, scenario.K
    B = draw_reward_matrix(scenario, env_rng)

    actions = np.zeros((T, K), dtype=np.int8)
    Z = np.zeros((T, K))
    Y = np.zeros((T, K))
    pay = np.zeros(T)
    regret = np.zeros(T)
    mse_series = np.full(T, np.nan)
    gldg = np.zeros(T, dtype=bool)
    gldg_start = np.zeros(T, dtype=bool)
    graph_change = np.zeros(T, dtype=bool)
    detections: dict = {}
    restarts: dict = {}

    c = scenario.c
    for start, end, W, dist in scenario.intervals():
        M = influence_vector(c, W) * dist.mean()
        _, best = optimal_action(c, W, dist.mean(), scenario.m)
        for t in range(start, end + 1):
            x = policy.select(t, W if policy.uses_true_graph else None)
            x = np.asarray(x, dtype=np.int8)
            if x.shape != (K,) or int(x.sum()) > scenario.m or np.any((x != 0) & (x != 1)):
                raise InvalidInputError(f"{policy.name} played an infeasible vector at t={t}")
            z = B[t - 1] * x
            y = W.solve(z)
            info = policy.observe(t, x, z, y)
            i = t - 1
            actions[i] = x
            Z[i] = z
            Y[i] = y
            pay[i] = c @ y
            gap = best - float(M @ x)
            regret[i] = gap if gap > 0.0 or gap < -1e-12 else 0.0
            est = policy.graph_estimate
            if est is not None:
                mse_series[i] = mse(W.entries, est.W_hat)
            gldg[i] = info.gldg
            gldg_start[i] = info.gldg_start
            graph_change[i] = info.graph_change
            if info.detections:
                detections[t] = info.detections
            if info.restarted:
                restarts[t] = info.restarted
    return EpisodeTrace(policy.name, actions, Z, Y, pay, regret, mse_series, gldg,
                        gldg_start, graph_change, detections, restarts)


# ---------------------------------------------------------------------------
# Replicated experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    scenario: Optional[Scenario] = None
    scenario_path: Optional[str] = None
    generator: Optional[SyntheticParams] = None
    policies: Sequence[tuple[str, dict]] = ()
    replications: int = 20
    seed: int = 0
    threads: Optional[int] = None

    def resolve_scenario(self) -> Scenario:
        if self.scenario is not None:
            return self.scenario
        if self.scenario_path is not None:
            return Scenario.load(self.scenario_path)
        if self.generator is not None:
            return generate_synthetic_scenario(self.generator, np.random.default_rng(self.seed))
        raise InvalidInputError("experiment needs a scenario, a scenario file or generator params")


@dataclass
class Event:
    policy: str
    rep: int
    t: int
    event_type: str
    arms: tuple[int, ...]
    delay: Optional[int] = None


@dataclass
class EpisodeSummary:
    policy: str
    rep: int
    cum_regret: np.ndarray
    mse: np.ndarray
    gldg_start: np.ndarray
    detections: dict
    restarts: dict
    graph_change: np.ndarray

    @property
    def relearn_count(self) -> int:
        return int(self.gldg_start.sum())


def summarize(trace: EpisodeTrace, rep: int) -> EpisodeSummary:
    return EpisodeSummary(trace.policy, rep, trace.cum_regret, trace.mse, trace.gldg_start,
                          trace.detections, trace.restarts, trace.graph_change)


@dataclass
class MetricsBundle:
    T: int
    policies: list[str]
    replications: int
    mean_regret: dict
    se_regret: dict
    mean_mse: dict
    events: list
    summaries: list = field(repr=False, default_factory=list)

    def final(self, policy: str) -> tuple[float, float]:
        return float(self.mean_regret[policy][-1]), float(self.se_regret[policy][-1])

    def final_values(self, policy: str) -> np.ndarray:
        return np.array([s.cum_regret[-1] for s in self.summaries if s.policy == policy])

    def band(self, policy: str, width: float = 2.0) -> tuple[float, float]:
        mean, se = self.final(policy)
        return mean - width * se, mean + width * se


def _run_one(task) -> EpisodeSummary:
    scenario, name, params, rep_seed, rep = task
    trace = run_episode(scenario, make_policy(name, **params), rep_seed)
    return summarize(trace, rep)


def _thread_cap(threads: Optional[int]) -> int:
    if threads is None:
        env = os.environ.get("CSB_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def attribute_delay(scenario: Scenario, t: int, arms: Sequence[int]) -> Optional[int]:
    """Rounds since the latest true change (at or before ``t``) touching ``arms``."""
    segs = scenario.dist_segments
    for i in range(len(segs) - 1, 0, -1):
        s = segs[i].start
        if s > t:
            continue
        if any(not segs[i - 1].same_distribution(segs[i], k) for k in arms):
            return t - s
    return None


def _events(scenario: Scenario, summary: EpisodeSummary) -> list[Event]:
    out = []
    restarts = summary.restarts
    for t in sorted(set(summary.detections) | set(restarts)):
        fired = summary.detections.get(t, ())
        restarted = restarts.get(t, ())
        for k in fired:
            out.append(Event(summary.policy, summary.rep, t, "detection", (k,),
                             attribute_delay(scenario, t, restarted or (k,))))
        if restarted:
            out.append(Event(summary.policy, summary.rep, t, "restart", tuple(restarted)))
    for t in np.flatnonzero(summary.graph_change) + 1:
        out.append(Event(summary.policy, summary.rep, int(t), "graph_change", ()))
    for t in np.flatnonzero(summary.gldg_start) + 1:
        out.append(Event(summary.policy, summary.rep, int(t), "graph_relearn", ()))
    out.sort(key=lambda e: (e.t, e.event_type))
    return out


def run_experiment(config: ExperimentConfig) -> MetricsBundle:
    if config.replications < 1:
        raise InvalidInputError("replications must be >= 1")
    scenario = config.resolve_scenario()
    specs = [(name, dict(params)) for name, params in config.policies]
    for name, params in specs:
        make_policy(name, **params)  # fail fast on unknown names
    tasks = [
        (scenario, name, params, replication_seed(config.seed, rep), rep)
        for name, params in specs
        for rep in range(config.replications)
    ]
    workers = min(_thread_cap(config.threads), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(task) for task in tasks]
    results.sort(key=lambda s: ([n for n, _ in specs].index(s.policy), s.rep))
    return aggregate(scenario, [n for n, _ in specs], results)


def aggregate(scenario: Scenario, policies: Sequence[str], results: Sequence[EpisodeSummary]) -> MetricsBundle:
    mean_regret, se_regret, mean_mse = {}, {}, {}
    events: list[Event] = []
    reps = 0
    for name in policies:
        mine = [s for s in results if s.policy == name]
        reps = len(mine)
        curves = np.stack([s.cum_regret for s in mine])
        mean_regret[name] = curves.mean(axis=0)
        se_regret[name] = (curves.std(axis=0, ddof=1) / np.sqrt(len(mine))
                           if len(mine) > 1 else np.zeros(scenario.T))
        mses = np.stack([s.mse for s in mine])
        have = (~np.isnan(mses)).sum(axis=0)
        mean_mse[name] = np.divide(np.nansum(mses, axis=0), have,
                                   out=np.full(scenario.T, np.nan), where=have > 0)
        for s in mine:
            events.extend(_events(scenario, s))
    return MetricsBundle(scenario.T, list(policies), reps, mean_regret, se_regret, mean_mse,
                         events, list(results))


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

ROUND_COLUMNS = ("policy", "rep", "t", "cum_regret", "mse", "detections", "restarted_arms",
                 "graph_relearn")
AGGREGATE_COLUMNS = ("policy", "t", "mean_cum_regret", "se_cum_regret", "band_low",
                     "band_high", "mean_mse")
EVENT_COLUMNS = ("policy", "rep", "t", "event_type", "arms")


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else format(v, ".10g")


def _arms(arms) -> str:
    return ";".join(str(k + 1) for k in arms)


def rounds_csv(bundle: MetricsBundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for s in bundle.summaries:
        for i in range(bundle.T):
            t = i + 1
            w.writerow((s.policy, s.rep, t, _fmt(s.cum_regret[i]), _fmt(s.mse[i]),
                        _arms(s.detections.get(t, ())), _arms(s.restarts.get(t, ())),
                        int(s.gldg_start[i])))
    return buf.getvalue()


def aggregate_csv(bundle: MetricsBundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for name in bundle.policies:
        mean, se, m = bundle.mean_regret[name], bundle.se_regret[name], bundle.mean_mse[name]
        for i in range(bundle.T):
            w.writerow((name, i + 1, _fmt(mean[i]), _fmt(se[i]), _fmt(mean[i] - 2 * se[i]),
                        _fmt(mean[i] + 2 * se[i]), _fmt(m[i])))
    return buf.getvalue()


def events_csv(bundle: MetricsBundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for e in bundle.events:
        w.writerow((e.policy, e.rep, e.t, e.event_type, _arms(e.arms)))
    return buf.getvalue()


def write_atomic(files: dict) -> None:
    """Write every ``path -> text`` pair via temp files, then rename them all."""
    staged = []
    try:
        for path, text in files.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
            tmp.write_text(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise


def write_outputs(bundle: MetricsBundle, out_dir) -> dict:
    out = Path(out_dir)
    files = {
        out / "rounds.csv": rounds_csv(bundle),
        out / "aggregate.csv": aggregate_csv(bundle),
        out / "events.csv": events_csv(bundle),
    }
    write_atomic(files)
    return {p.name: p for p in files}
