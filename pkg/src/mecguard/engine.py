"""Deterministic discrete-event core.

Simulated time is an integer count of microseconds so that event ordering
never depends on floating point behaviour. Helpers convert from seconds and
milliseconds.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable

SimTime = int

US_PER_MS = 1_000
US_PER_S = 1_000_000


def seconds(value: float | int | str | Fraction) -> SimTime:
    """Convert seconds to SimTime, rounding to the nearest microsecond."""
    return round(Fraction(value) * US_PER_S)


def millis(value: float | int | str | Fraction) -> SimTime:
    return round(Fraction(value) * US_PER_MS)


def fmt_time(t: SimTime) -> str:
    return f"{t // US_PER_S}.{t % US_PER_S:06d}"


class EventKind(str, Enum):
    PACKET_ARRIVAL = "packet-arrival"
    FLOW_TIMEOUT = "flow-timeout"
    DETECTOR_TICK = "detector-tick"
    MESSAGE_DELIVERY = "orchestration-message-delivery"
    VM_BOOT_COMPLETE = "vm-boot-complete"
    VM_CRASH = "vm-crash"
    MODEL_UPDATE = "model-update-arrival"
    SCENARIO_DIRECTIVE = "scenario-directive"


class SchedulingInPast(ValueError):
    pass


@dataclass(eq=False)
class Event:
    fire_at: SimTime
    seq: int
    kind: EventKind
    payload: Any = None
    callback: Callable[["Event"], None] | None = field(default=None, repr=False)
    cancelled: bool = False


@dataclass
class RunSummary:
    clock: SimTime
    processed: int
    by_kind: dict[str, int]


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class RngStreams:
    """Named, independent random streams derived from one 64-bit seed.

    Adding a consumer never shifts the draws another consumer sees.
    """

    def __init__(self, seed: int):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, label: str) -> random.Random:
        rng = self._streams.get(label)
        if rng is None:
            rng = random.Random(derive_seed(self.seed, label))
            self._streams[label] = rng
        return rng


class Engine:
    def __init__(self, seed: int = 0, trace: bool = False):
        self.now: SimTime = 0
        self.rng = RngStreams(seed)
        self._queue: list[tuple[SimTime, int, Event]] = []
        self._seq = 0
        self._handlers: dict[EventKind, Callable[[Event], None]] = {}
        self._counts: Counter[str] = Counter()
        self._running = False
        # (fire_at, seq, kind) of every processed event, only when tracing
        self.trace: list[tuple[SimTime, int, str]] | None = [] if trace else None
        # called after every processed event; used by invariant checks
        self.probes: list[Callable[[Event], None]] = []

    def on(self, kind: EventKind, handler: Callable[[Event], None]) -> None:
        self._handlers[kind] = handler

    def schedule(
        self,
        fire_at: SimTime,
        kind: EventKind,
        payload: Any = None,
        callback: Callable[[Event], None] | None = None,
    ) -> Event:
        if fire_at < self.now:
            raise SchedulingInPast(f"fire_at={fire_at} is before clock={self.now}")
        event = Event(fire_at, self._seq, kind, payload, callback)
        self._seq += 1
        heapq.heappush(self._queue, (fire_at, event.seq, event))
        return event

    def schedule_in(self, delay: SimTime, kind: EventKind, payload: Any = None,
                    callback: Callable[[Event], None] | None = None) -> Event:
        return self.schedule(self.now + delay, kind, payload, callback)

    @staticmethod
    def cancel(event: Event) -> None:
        event.cancelled = True

    def pending(self) -> int:
        return sum(1 for _, _, e in self._queue if not e.cancelled)

    def run_until(self, end: SimTime) -> RunSummary:
        if self._running:
            raise RuntimeError("engine is not re-entrant")
        self._running = True
        queue = self._queue
        handlers = self._handlers
        counts: Counter[str] = Counter()
        trace = self.trace
        processed = 0
        try:
            while queue and queue[0][0] <= end:
                event = heapq.heappop(queue)[2]
                if event.cancelled:
                    continue
                self.now = event.fire_at
                if trace is not None:
                    trace.append((event.fire_at, event.seq, event.kind.value))
                counts[event.kind.value] += 1
                self._counts[event.kind.value] += 1
                processed += 1
                callback = event.callback or handlers.get(event.kind)
                if callback is not None:
                    callback(event)
                if self.probes:
                    for probe in self.probes:
                        probe(event)
            if self.now < end:
                self.now = end
        finally:
            self._running = False
        return RunSummary(self.now, processed, dict(sorted(counts.items())))
