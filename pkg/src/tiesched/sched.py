"""TIE scoring, risk coefficient policies and the waiting queue.

The waiting queue is an indexed binary min-heap.  New requests enter keyed
by their ``max_tokens`` so that unpredicted work sinks below everything
already scored; when a prediction lands the entry is re-keyed in place to
``E + beta * CVaR`` and sifted.  Equal keys pop in ascending request id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import ConfigError, UsageError


class Policy(str, enum.Enum):
    FCFS = "fcfs"
    SEPT = "sept"
    TIE = "tie"


@dataclass(frozen=True)
class Fixed:
    beta: float

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")


@dataclass(frozen=True)
class AdaptiveLinear:
    """``beta = beta_max * min(1, queue_len / q_sat)``."""

    beta_max: float = 0.5
    q_sat: int = 128

    def __post_init__(self):
        if not self.beta_max >= 0:
            raise ConfigError("beta_max must be >= 0")
        if self.q_sat < 1:
            raise ConfigError("q_sat must be >= 1")


BetaPolicy = Union[Fixed, AdaptiveLinear]


@dataclass(frozen=True)
class ScoreConfig:
    cvar_alpha: float = 0.9
    beta_policy: BetaPolicy = field(default_factory=AdaptiveLinear)
    rebuild_drift: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.cvar_alpha < 1.0):
            raise ConfigError("cvar_alpha must lie in [0, 1)")
        if not self.rebuild_drift > 0:
            raise ConfigError("rebuild_drift must be > 0")


def compute_beta(queue_len: int, policy: BetaPolicy) -> float:
    if isinstance(policy, Fixed):
        return policy.beta
    return policy.beta_max * min(1.0, queue_len / policy.q_sat)


def compute_score(expectation: float, cvar: float, beta: float) -> float:
    if cvar < expectation:
        raise UsageError(f"cvar ({cvar}) below expectation ({expectation})")
    return expectation + beta * cvar


@dataclass
class QueueEntry:
    req_id: int
    key: float
    expectation: Optional[float] = None
    cvar: Optional[float] = None
    predicted: bool = False

    def order(self):
        return (self.key, self.req_id)


class WaitingQueue:
    """Indexed min-heap of :class:`QueueEntry` with in-place re-keying."""

    def __init__(self, beta_at_build: float = 0.0):
        self._heap: list[QueueEntry] = []
        self._pos: dict[int, int] = {}
        self.beta_at_build = beta_at_build

    def __len__(self):
        return len(self._heap)

    def __contains__(self, req_id):
        return req_id in self._pos

    def __iter__(self):
        return iter(list(self._heap))

    def entry(self, req_id) -> QueueEntry:
        return self._heap[self._pos[req_id]]

    def peek(self) -> Optional[QueueEntry]:
        return self._heap[0] if self._heap else None

    # -- sifting -------------------------------------------------------------

    def _swap(self, i, j):
        h = self._heap
        h[i], h[j] = h[j], h[i]
        self._pos[h[i].req_id] = i
        self._pos[h[j].req_id] = j

    def _sift_up(self, i):
        h = self._heap
        while i > 0:
            parent = (i - 1) // 2
            if h[i].order() < h[parent].order():
                self._swap(i, parent)
                i = parent
            else:
                break
        return i

    def _sift_down(self, i):
        h = self._heap
        n = len(h)
        while True:
            smallest = i
            for child in (2 * i + 1, 2 * i + 2):
                if child < n and h[child].order() < h[smallest].order():
                    smallest = child
            if smallest == i:
                return i
            self._swap(i, smallest)
            i = smallest

    def _restore(self, i):
        if self._sift_up(i) == i:
            self._sift_down(i)

    # -- public operations ---------------------------------------------------

    def push(self, req_id: int, key: float) -> None:
        if req_id in self._pos:
            raise UsageError(f"request {req_id} already queued")
        self._heap.append(QueueEntry(req_id, float(key)))
        self._pos[req_id] = len(self._heap) - 1
        self._sift_up(len(self._heap) - 1)

    def update(self, req_id: int, expectation: float, cvar: float, beta_now: float) -> None:
        if req_id not in self._pos:
            raise UsageError(f"request {req_id} is not queued")
        i = self._pos[req_id]
        e = self._heap[i]
        if e.predicted:
            raise UsageError(f"request {req_id} already has a prediction")
        e.key = compute_score(expectation, cvar, beta_now)
        e.expectation = expectation
        e.cvar = cvar
        e.predicted = True
        self._restore(i)

    def pop_min(self) -> Optional[QueueEntry]:
        """Remove and return the minimum entry, or ``None`` when empty."""
        h = self._heap
        if not h:
            return None
        self._swap(0, len(h) - 1)
        top = h.pop()
        del self._pos[top.req_id]
        if h:
            self._sift_down(0)
        return top

    def rebuild_if_drifted(self, beta_now: float, drift: float) -> bool:
        if abs(beta_now - self.beta_at_build) <= drift:
            return False
        for e in self._heap:
            if e.predicted:
                e.key = compute_score(e.expectation, e.cvar, beta_now)
        for i in range(len(self._heap) // 2 - 1, -1, -1):
            self._sift_down(i)
        self.beta_at_build = beta_now
        return True

    def heap_ok(self) -> bool:
        h = self._heap
        for i in range(1, len(h)):
            if h[i].order() < h[(i - 1) // 2].order():
                return False
        return all(self._pos[e.req_id] == i for i, e in enumerate(h)) and len(self._pos) == len(h)


def policy_next(policy: Policy, q: WaitingQueue, score_cfg: ScoreConfig) -> Optional[int]:
    """Pick the next request id to admit (``None`` if the queue is empty).

    FCFS and SEPT pop the heap directly: the FCFS queue is keyed by arrival
    time and SEPT entries are scored with beta = 0.  TIE first re-keys the
    heap if the risk coefficient has drifted.
    """
    if not len(q):
        return None
    if Policy(policy) is Policy.TIE:
        beta_now = compute_beta(len(q), score_cfg.beta_policy)
        q.rebuild_if_drifted(beta_now, score_cfg.rebuild_drift)
    return q.pop_min().req_id


def effective_score_config(policy: Policy, score_cfg: ScoreConfig) -> ScoreConfig:
    """SEPT is TIE with the risk term switched off."""
    if Policy(policy) is Policy.SEPT:
        return ScoreConfig(score_cfg.cvar_alpha, Fixed(0.0), score_cfg.rebuild_drift)
    return score_cfg
