"""Bernoulli-KL generalized likelihood ratio (GLR) change-point detector.

Samples are bounded in [0, 1] and fed to the Bernoulli statistic directly,
without binarization.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import xlogy

from .sem_core import InvalidInputError

PRACTICAL = "practical"
THEORETICAL = "theoretical"


def kl_bernoulli(x, y):
    """Binary relative entropy kl(x, y) with the convention 0 log 0 = 0.

    Works elementwise on arrays.  ``y`` must lie strictly inside (0, 1).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((y <= 0) | (y >= 1)):
        raise ValueError("kl_bernoulli: y must lie strictly inside (0, 1)")
    if np.any((x < 0) | (x > 1)):
        raise ValueError("kl_bernoulli: x must lie in [0, 1]")
    out = xlogy(x, x) - xlogy(x, y) + xlogy(1 - x, 1 - x) - xlogy(1 - x, 1 - y)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def _neg_entropy(q: np.ndarray) -> np.ndarray:
    # q log q + (1 - q) log(1 - q); the floor inside the log makes 0 log 0 = 0
    r = 1.0 - q
    return q * np.log(np.maximum(q, 1e-300)) + r * np.log(np.maximum(r, 1e-300))


def _inverse_time_function(x: float) -> float:
    # Closed-form approximation of the calibration function used in the
    # theoretical threshold, valid for x >= 5 (and an upper bound below).
    return x + 4.0 * math.log(1.0 + x + math.sqrt(2.0 * x))


def glr_threshold(n: int, delta: float, mode: str = PRACTICAL) -> float:
    """Detection threshold for ``n`` samples at confidence ``delta``.

    practical:    ln(3 n sqrt(n) / delta)
    theoretical:  2 T(ln(3 n sqrt(n) / delta) / 2) + 6 ln(1 + ln n),
                  with T(x) ~ x + 4 ln(1 + x + sqrt(2x)).
    """
    if n < 2:
        raise InvalidInputError("threshold needs n >= 2")
    if not 0.0 < delta < 1.0:
        raise InvalidInputError("delta must lie in (0, 1)")
    base = math.log(3.0 * n * math.sqrt(n) / delta)
    if mode == PRACTICAL:
        return base
    if mode == THEORETICAL:
        return 2.0 * _inverse_time_function(base / 2.0) + 6.0 * math.log(1.0 + math.log(n))
    raise InvalidInputError(f"unknown threshold mode {mode!r}")


def glr_statistic_from_prefix(prefix: np.ndarray, n: int, stride: int = 1) -> float:
    """sup over splits of the two-segment Bernoulli log-likelihood ratio.

    ``prefix[i]`` is the sum of the first ``i`` samples (``prefix[0] == 0``).
    """
    if n < 2:
        return 0.0
    total = prefix[n]
    overall = total / n
    if overall <= 0.0 or overall >= 1.0:
        return 0.0
    alpha = np.arange(1, n, stride)
    head = prefix[alpha]
    left = np.clip(head / alpha, 0.0, 1.0)
    right = np.clip((total - head) / (n - alpha), 0.0, 1.0)
    if np.max(np.abs(left - right)) <= 1e-12:
        # identical samples up to prefix-sum round-off: no change is expressible
        return 0.0
    # alpha kl(left, overall) + (n - alpha) kl(right, overall) with the
    # cross-entropy terms collected: they sum to n times the overall term.
    values = alpha * _neg_entropy(left) + (n - alpha) * _neg_entropy(right)
    values -= n * float(_neg_entropy(np.array(overall)))
    return max(float(values.max()), 0.0)


def chi2_upper_bound(prefix: np.ndarray, n: int, stride: int = 1) -> float:
    """Log-free upper bound on :func:`glr_statistic_from_prefix`.

    kl(p, q) <= (p - q)^2 / (q (1 - q)), and summed over both sides of a
    split at alpha this collapses to (H - alpha q)^2 n / (alpha (n - alpha) q (1 - q)).
    """
    if n < 2:
        return 0.0
    total = prefix[n]
    overall = total / n
    if overall <= 0.0 or overall >= 1.0:
        return 0.0
    alpha = np.arange(1, n, stride, dtype=float)
    dev = prefix[1:n:stride] - alpha * overall
    return float(np.max(dev * dev / (alpha * (n - alpha)))) * n / (overall * (1.0 - overall))


class GlrDetector:
    """Sample buffer since the last reset plus the GLR test on it."""

    def __init__(self, delta: float, threshold_mode: str = PRACTICAL, stride: int = 1) -> None:
        if not 0.0 < delta < 1.0:
            raise InvalidInputError("delta must lie in (0, 1)")
        if stride < 1:
            raise InvalidInputError("stride must be >= 1")
        glr_threshold(2, delta, threshold_mode)  # validates the mode
        self.delta = delta
        self.threshold_mode = threshold_mode
        self.stride = stride
        self._samples = np.empty(64)
        self._prefix = np.zeros(65)
        self.n = 0

    @property
    def samples(self) -> np.ndarray:
        return self._samples[: self.n].copy()

    @property
    def prefix_sums(self) -> np.ndarray:
        return self._prefix[: self.n + 1].copy()

    def _grow(self) -> None:
        cap = 2 * self._samples.size
        samples = np.empty(cap)
        samples[: self.n] = self._samples[: self.n]
        prefix = np.zeros(cap + 1)
        prefix[: self.n + 1] = self._prefix[: self.n + 1]
        self._samples, self._prefix = samples, prefix

    def statistic(self) -> float:
        return glr_statistic_from_prefix(self._prefix, self.n, self.stride)

    def test(self) -> bool:
        if self.n < 2:
            return False
        gamma = glr_threshold(self.n, self.delta, self.threshold_mode)
        # the bound rules out most rounds without evaluating any logarithm
        if chi2_upper_bound(self._prefix, self.n, self.stride) < gamma:
            return False
        return self.statistic() >= gamma

    def push(self, s: float) -> bool:
        """Append one sample and report whether a change is detected."""
        if not 0.0 <= s <= 1.0:
            raise InvalidInputError(f"sample {s!r} outside [0, 1]")
        if self.n == self._samples.size:
            self._grow()
        self._samples[self.n] = s
        self._prefix[self.n + 1] = self._prefix[self.n] + s
        self.n += 1
        return self.test()

    def reset(self) -> None:
        self.n = 0

    def __len__(self) -> int:
        return self.n


class DetectorBank:
    """One detector per base arm."""

    def __init__(self, K: int, delta: float, threshold_mode: str = PRACTICAL, stride: int = 1) -> None:
        self.detectors = [GlrDetector(delta, threshold_mode, stride) for _ in range(K)]

    def __getitem__(self, k: int) -> GlrDetector:
        return self.detectors[k]

    def __len__(self) -> int:
        return len(self.detectors)

    def reset(self, arms) -> None:
        for k in arms:
            self.detectors[k].reset()
