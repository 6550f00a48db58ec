"""Closed-form regret bounds and the restart-cost comparison.

All functions evaluate formulas; they do not simulate anything.  The
scenario helpers derive the gap and path-weight constants from a concrete
environment by enumeration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .sem_core import InvalidInputError, Scenario, group_segment_count, influence_vector

LOCAL = "local"
GLOBAL = "global"
GROUP = "group"
GROUP_WITH_UNCHANGED = "group_with_unchanged"
REMARK_CASES = (LOCAL, GLOBAL, GROUP, GROUP_WITH_UNCHANGED)


@dataclass(frozen=True)
class BoundParams:
    omega_max: float
    m: int
    K: int
    T: float
    delta_min: float
    delta_max: float
    delta: float = 0.0                  # detector confidence
    p: float = 0.0                      # forced-exploration probability
    d: float = 0.0                      # worst detection delay (rounds)
    group_profile: tuple[tuple[int, int], ...] = ()   # (N_g, K_g) per group
    N_W: int = 1
    delta_min_change: float = 1.0

    def __post_init__(self) -> None:
        if not self.group_profile:
            object.__setattr__(self, "group_profile", ((1, self.K),))
        else:
            object.__setattr__(self, "group_profile",
                               tuple((int(n), int(k)) for n, k in self.group_profile))
        if self.delta_min <= 0 or self.delta_max <= 0:
            raise InvalidInputError("gaps must be strictly positive")
        if self.delta_min > self.delta_max:
            raise InvalidInputError("delta_min must not exceed delta_max")
        if min(self.m, self.K, self.N_W) < 1 or self.T < 1:
            raise InvalidInputError("m, K, N_W and T must be at least 1")
        if any(n < 1 or k < 1 for n, k in self.group_profile):
            raise InvalidInputError("group profile entries must be at least 1")
        if not 0.0 <= self.p < 1.0 or not 0.0 <= self.delta < 1.0:
            raise InvalidInputError("p and delta must lie in [0, 1)")
        if self.d < 0 or self.omega_max < 0:
            raise InvalidInputError("d and omega_max must be nonnegative")

    @property
    def N_G(self) -> int:
        return sum(n for n, _ in self.group_profile)

    def replace(self, **changes) -> "BoundParams":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return BoundParams(**fields)


def _check_gap(value: float, name: str) -> None:
    if not value > 0:
        raise InvalidInputError(f"{name} must be strictly positive")


def stationary_coefficient(params: BoundParams) -> float:
    """R0(T) = 4 w^2 m^2 (m + 1) ln T * D_max / D_min^2, the per-arm log term."""
    _check_gap(params.delta_min, "delta_min")
    w, m = params.omega_max, params.m
    return 4.0 * w * w * m * m * (m + 1) * math.log(params.T) * params.delta_max / params.delta_min ** 2


def lemma1_bound(params: BoundParams) -> float:
    """Stationary bound: one distribution and one graph segment."""
    _check_gap(params.delta_min, "delta_min")
    w, m, K = params.omega_max, params.m, params.K
    log_term = 4.0 * w * w * m * m * (m + 1) * K * math.log(params.T) / params.delta_min ** 2
    return (log_term + math.pi ** 2 / 3.0 * m * K + K) * params.delta_max


def theorem1_bound(params: BoundParams) -> float:
    """Piecewise-stationary bound for group restarts."""
    r0 = stationary_coefficient(params)
    dmax, m, T, K = params.delta_max, params.m, params.T, params.K
    per_group = sum(
        n * k * r0 + (params.delta * T + 1.0 + math.pi ** 2 * m / 3.0) * n * k * dmax
        for n, k in params.group_profile
    )
    N_G = params.N_G
    tail = (T * params.p + params.d * N_G + params.delta * T * (K + N_G) + params.N_W * K) * dmax
    return per_group + tail


def corollary_bound(params: BoundParams) -> float:
    """Order-level bound with delta = 1/T and the matching p; constants set to 1."""
    _check_gap(params.delta_min, "delta_min")
    _check_gap(params.delta_min_change, "delta_min_change")
    T, K = params.T, params.K
    logT = math.log(T)
    segments = sum(n * k for n, k in params.group_profile) * logT / params.delta_min
    detection = math.sqrt(params.N_G * K * T * logT) / params.delta_min_change ** 2
    return (segments + detection + params.N_W * K) * params.delta_max


def remark1_increment(case: str, C1: float, C2: float, kappa: float, eta: float = 1.0,
                      s: float = 0.0, K: Optional[int] = None) -> float:
    """Regret added at one breakpoint by each restart strategy.

    kappa: arms whose distribution changed; eta: groups containing them;
    s: unchanged arms restarted along with them; K: arm count (global case).
    """
    if min(C1, C2, kappa, eta, s) < 0:
        raise InvalidInputError("remark inputs must be nonnegative")
    if case == LOCAL:
        return C1 * kappa + C2 * kappa
    if case == GLOBAL:
        if K is None:
            raise InvalidInputError("the global case needs K")
        return C1 * K + C2
    if case == GROUP:
        return C1 * kappa + C2 * eta
    if case == GROUP_WITH_UNCHANGED:
        return C1 * (kappa + s) + C2 * eta
    raise InvalidInputError(f"unknown case {case!r}; expected one of {', '.join(REMARK_CASES)}")


def remark1_table(C1: float, C2: float, kappa: float, eta: float, s: float, K: int) -> dict:
    return {case: remark1_increment(case, C1, C2, kappa, eta, s, K) for case in REMARK_CASES}


# ---------------------------------------------------------------------------
# Constants of a concrete scenario
# ---------------------------------------------------------------------------


def omega_max(scenario: Scenario) -> float:
    """Largest entry of c^T (I - W)^{-1} diag(x) over graph segments and feasible x.

    Any single arm is feasible, so this is the largest influence coefficient.
    """
    return max(float(influence_vector(scenario.c, W).max()) for _, W in scenario.graph_segments)


def _feasible_vectors(K: int, m: int) -> np.ndarray:
    rows = []
    for size in range(0, m + 1):
        for subset in itertools.combinations(range(K), size):
            x = np.zeros(K)
            x[list(subset)] = 1.0
            rows.append(x)
    return np.array(rows)


def suboptimality_gaps(scenario: Scenario, tol: float = 1e-12) -> tuple[float, float]:
    """(smallest positive gap, largest gap) over every stationary interval."""
    X = _feasible_vectors(scenario.K, scenario.m)
    lo, hi = math.inf, 0.0
    for _, _, W, dist in scenario.intervals():
        values = X @ (influence_vector(scenario.c, W) * dist.mean())
        gaps = values.max() - values
        positive = gaps[gaps > tol]
        if positive.size:
            lo = min(lo, float(positive.min()))
            hi = max(hi, float(positive.max()))
    if not math.isfinite(lo):
        raise InvalidInputError("every feasible action is optimal: the smallest gap is zero")
    return lo, hi


def smallest_change_magnitude(scenario: Scenario) -> float:
    """Minimum over breakpoints of the largest per-arm shift in mean reward."""
    segs = scenario.dist_segments
    shifts = [float(np.max(np.abs(cur.mean() - prev.mean())))
              for prev, cur in zip(segs, segs[1:]) if cur.start <= scenario.T]
    shifts = [v for v in shifts if v > 0]
    return min(shifts) if shifts else 1.0


def params_from_scenario(scenario: Scenario, delta: Optional[float] = None,
                         p: Optional[float] = None, d: float = 0.0) -> BoundParams:
    """Bound parameters of a scenario; delta and p default to the corollary tuning."""
    T = scenario.T
    profile = tuple((group_segment_count(scenario, g), len(g)) for g in scenario.grouping)
    n_g = sum(n for n, _ in profile)
    if delta is None:
        delta = 1.0 / T if T > 1 else 0.0
    if p is None:
        p = min(math.sqrt(n_g * scenario.K * math.log(T) / T), 0.99) if T > 1 else 0.0
    dmin, dmax = suboptimality_gaps(scenario)
    n_w = sum(1 for s, _ in scenario.graph_segments if s <= T)
    return BoundParams(omega_max=omega_max(scenario), m=scenario.m, K=scenario.K, T=T,
                       delta_min=dmin, delta_max=dmax, delta=delta, p=p, d=d,
                       group_profile=profile, N_W=n_w,
                       delta_min_change=smallest_change_magnitude(scenario))


def bound_table(params: BoundParams) -> dict:
    return {
        "lemma1": lemma1_bound(params),
        "theorem1": theorem1_bound(params),
        "corollary (order bound)": corollary_bound(params),
    }


def group_profile_for(kind: str, K: int, n_segments: int, group_sizes: Sequence[int] = ()) -> tuple:
    """Profiles used to compare strategies when every arm changes at every breakpoint."""
    if kind == GLOBAL:
        return ((n_segments, K),)
    if kind == LOCAL:
        return tuple((n_segments, 1) for _ in range(K))
    return tuple((n_segments, k) for k in group_sizes)
