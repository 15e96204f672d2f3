"""Discrete-event clock and link delay models for the desk-scale ledger."""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass


class Scheduler:
    """Simulated clock with a timer heap. Callbacks run in time order."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list = []
        self._ids = itertools.count()

    def call_at(self, when: float, fn, *args) -> None:
        heapq.heappush(self._heap, (max(when, self.now), next(self._ids), fn, args))

    def call_later(self, delay: float, fn, *args) -> None:
        self.call_at(self.now + delay, fn, *args)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def step(self) -> bool:
        if not self._heap:
            return False
        when, _, fn, args = heapq.heappop(self._heap)
        self.now = when
        fn(*args)
        return True

    def run(self, until: float | None = None, max_events: int = 10_000_000) -> None:
        for _ in range(max_events):
            if not self._heap or (until is not None and self._heap[0][0] > until):
                break
            self.step()
        else:
            raise RuntimeError("simulation did not settle")
        if until is not None and until > self.now:
            self.now = until

    def advance(self, dt: float) -> None:
        self.run(until=self.now + dt)


@dataclass(frozen=True)
class LinkModel:
    """One-way delay: ``mean`` seconds with log-normal jitter of shape ``jitter``.

    ``bandwidth`` (bytes/s) adds a serialization term proportional to size.
    """

    mean: float = 0.0
    jitter: float = 0.3
    bandwidth: float = 12.5e6

    def sample(self, rng: random.Random, size: int = 0) -> float:
        if self.mean < 0:
            raise ValueError("negative delay")
        base = 0.0
        if self.mean > 0:
            s = self.jitter
            base = self.mean * (rng.lognormvariate(-s * s / 2, s) if s > 0 else 1.0)
        return base + (size / self.bandwidth if self.bandwidth and size else 0.0)


# Placements: within Europe, Europe to Australia, US to Australia.
PRESETS = {
    "zero": LinkModel(0.0, 0.0, 0.0),
    "short": LinkModel(0.012),
    "medium": LinkModel(0.110),
    "long": LinkModel(0.160),
}


def preset(name_or_model) -> LinkModel:
    if isinstance(name_or_model, LinkModel):
        return name_or_model
    try:
        return PRESETS[name_or_model]
    except KeyError:
        raise ValueError(f"unknown link preset {name_or_model!r}; have {sorted(PRESETS)}") from None


def exponential(rng: random.Random, rate: float) -> float:
    return -math.log(1.0 - rng.random()) / rate
