"""Cox proportional hazards partial likelihood.

Risk sets follow the Breslow convention ``{j : T_j >= T_i}``: sample ``i`` is
in its own risk set and tied event times share one denominator. A
``strict=True`` mode uses ``T_j > T_i`` instead and drops any term whose risk
set is empty.

All sums over risk sets are done with cumulative log-sum-exp, so scores of
magnitude several hundred do not overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import InvalidArgumentError, NoEventsError


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: bool

    def __post_init__(self) -> None:
        if not self.time > 0 or not np.isfinite(self.time):
            raise InvalidArgumentError(f"survival time must be positive and finite, got {self.time}")


Records = Union[Sequence[SurvivalRecord], tuple[np.ndarray, np.ndarray]]


def as_arrays(records: Records) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, events)`` arrays from records or an existing pair."""
    if isinstance(records, tuple) and len(records) == 2 and isinstance(records[0], np.ndarray):
        times, events = records
        return np.asarray(times, dtype=np.float64), np.asarray(events, dtype=bool)
    times = np.fromiter((r.time for r in records), dtype=np.float64, count=len(records))
    events = np.fromiter((r.event for r in records), dtype=bool, count=len(records))
    return times, events


def risk_set(records: Records, i: int, strict: bool = False) -> np.ndarray:
    times, events = as_arrays(records)
    if not 0 <= i < times.size:
        raise InvalidArgumentError(f"index {i} out of range")
    if not events[i]:
        raise InvalidArgumentError(f"sample {i} is censored and has no risk set")
    mask = times > times[i] if strict else times >= times[i]
    return np.flatnonzero(mask)


def _prepare(h, records: Records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    times, events = as_arrays(records)
    if h.size != times.size:
        raise InvalidArgumentError(f"{h.size} risks for {times.size} records")
    if not events.any():
        raise NoEventsError("partial likelihood needs at least one event")
    if not np.all(np.isfinite(h)):
        raise InvalidArgumentError("risk scores must be finite")
    return h, times, events


def _group_bounds(sorted_times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each position in a sorted array, first and last index of its tie group."""
    n = sorted_times.size
    new = np.empty(n, dtype=bool)
    new[0] = True
    new[1:] = sorted_times[1:] != sorted_times[:-1]
    starts = np.flatnonzero(new)
    group = np.cumsum(new) - 1
    ends = np.append(starts[1:], n) - 1
    return starts[group], ends[group]


def log_risk_denominators(h, records: Records, strict: bool = False) -> np.ndarray:
    """``log sum_{j in R_i} exp(h_j)`` for every sample (``-inf`` if empty)."""
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    times, _ = as_arrays(records)
    order = np.argsort(-times, kind="stable")
    lse = np.logaddexp.accumulate(h[order])
    first, last = _group_bounds(times[order])
    out = np.empty_like(h)
    if strict:
        # everything strictly later sits before the tie group in descending order
        prev = np.where(first > 0, lse[np.maximum(first - 1, 0)], -np.inf)
        out[order] = prev
    else:
        out[order] = lse[last]
    return out


def neg_log_partial_likelihood(h, records: Records, strict: bool = False) -> float:
    """``-sum_{i: E_i} (h_i - log sum_{j in R_i} exp(h_j))``."""
    h, times, events = _prepare(h, records)
    log_den = log_risk_denominators(h, (times, events), strict)
    use = events & np.isfinite(log_den)
    return float(-np.sum(h[use] - log_den[use]))


def cox_loss_gradient(h, records: Records, strict: bool = False) -> np.ndarray:
    """Derivative of :func:`neg_log_partial_likelihood` w.r.t. every ``h_k``.

    ``dL/dh_k = -E_k + sum_{i: E_i, k in R_i} exp(h_k - log_den_i)``
    """
    h, times, events = _prepare(h, records)
    log_den = log_risk_denominators(h, (times, events), strict)
    active = events & np.isfinite(log_den)
    # k is in R_i iff T_i <= T_k (or < when strict); accumulate -log_den_i over
    # active events in ascending time order
    order = np.argsort(times, kind="stable")
    contrib = np.where(active[order], -log_den[order], -np.inf)
    acc = np.logaddexp.accumulate(contrib)
    first, last = _group_bounds(times[order])
    if strict:
        acc_k = np.where(first > 0, acc[np.maximum(first - 1, 0)], -np.inf)
    else:
        acc_k = acc[last]
    log_sum = np.empty_like(h)
    log_sum[order] = acc_k
    return np.exp(h + log_sum) - active.astype(np.float64)
