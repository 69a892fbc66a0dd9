"""Deterministic discrete-event kernel.

A single run owns one :class:`Simulator` with a global integer tick clock.
One tick is the maximum point-to-point delay of an off-chain message between
two honest parties; every other latency in the system (chain confirmation,
event delivery, adversarial message delay) is expressed in the same ticks.

Events are totally ordered by ``(fire_at, seq)`` where ``seq`` is a
monotonically increasing insertion counter, so runs are reproducible down to
the byte given the same seed, configuration and delay policies.  An event
scheduled for the current tick while another event at that tick is being
processed fires after the current event completes, still within the same
tick.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

Ticks = int

# A delay policy maps (sender, receiver, base_delay, max_delay) to the chosen
# delay.  The kernel enforces base <= chosen <= max; the honest policy always
# picks the base delay.
DelayPolicy = Callable[[str, str, Any, int, int], int]


def honest_delay(sender: str, receiver: str, msg: Any, base: int, bound: int) -> int:
    return base


class SchedulingError(RuntimeError):
    """Raised for programming errors such as scheduling in the past."""


@dataclass
class Event:
    fire_at: Ticks
    seq: int
    kind: str
    source: Optional[str]
    target: Union[str, Callable[["Event"], None]]
    payload: Any
    cancelled: bool = False


class EventHandle:
    __slots__ = ("_event",)

    def __init__(self, event: Event):
        self._event = event

    def cancel(self) -> None:
        self._event.cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._event.cancelled


@dataclass
class TraceRecord:
    time: Ticks
    seq: int
    kind: str
    source: Optional[str]
    target: str
    summary: str

    def line(self) -> str:
        return f"{self.time}\t{self.seq}\t{self.kind}\t{self.source or '-'}\t{self.target}\t{self.summary}"


def _summarize(payload: Any, limit: int = 96) -> str:
    text = repr(payload)
    return text if len(text) <= limit else text[: limit - 3] + "..."


class Simulator:
    """Single-threaded discrete-event loop with per-message delay hooks."""

    def __init__(
        self,
        *,
        seed: int = 0,
        message_delay_bound: int = 1,
        delay_policy: Optional[DelayPolicy] = None,
        trace: bool = True,
    ):
        if message_delay_bound < 1:
            raise ValueError("message_delay_bound must be >= 1")
        self.now: Ticks = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self.message_delay_bound = message_delay_bound
        self.delay_policy: DelayPolicy = delay_policy or honest_delay
        self._queue: list[tuple[Ticks, int, Event]] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[Event], None]] = {}
        self._trace_on = trace
        self._trace: list[TraceRecord] = []

    # -- registration -----------------------------------------------------

    def register(self, name: str, handler: Callable[[Event], None]) -> None:
        if name in self._handlers:
            raise SchedulingError(f"handler already registered for {name!r}")
        self._handlers[name] = handler

    def known(self, name: str) -> bool:
        return name in self._handlers

    # -- scheduling -------------------------------------------------------

    def schedule(
        self,
        at: Ticks,
        payload: Any,
        target: Union[str, Callable[[Event], None]],
        *,
        kind: str = "timer",
        source: Optional[str] = None,
    ) -> EventHandle:
        if at < self.now:
            raise SchedulingError(f"cannot schedule at {at} < now {self.now}")
        self._seq += 1
        event = Event(at, self._seq, kind, source, target, payload)
        heapq.heappush(self._queue, (at, self._seq, event))
        return EventHandle(event)

    def send(self, frm: str, to: str, msg: Any) -> None:
        """Point-to-point message; delivered after the policy-chosen delay."""
        d = self.delay_policy(frm, to, msg, 1, self.message_delay_bound)
        if not 1 <= d <= self.message_delay_bound:
            raise SchedulingError(
                f"delay policy chose {d} outside [1, {self.message_delay_bound}]"
            )
        if to not in self._handlers:
            self._log(self.now, self._seq, "drop", frm, to, _summarize(msg))
            return
        self.schedule(self.now + d, msg, to, kind="msg", source=frm)

    # -- execution --------------------------------------------------------

    def run_until(self, t: Ticks) -> None:
        """Process every event with ``fire_at <= t``; leaves ``now == t``."""
        while self._queue and self._queue[0][0] <= t:
            _, _, event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = event.fire_at
            self._dispatch(event)
        if t > self.now:
            self.now = t

    def run(self, max_time: Optional[Ticks] = None) -> None:
        """Run until the queue is empty (or ``max_time`` is reached)."""
        while self._queue:
            head = self._queue[0][0]
            if max_time is not None and head > max_time:
                self.now = max_time
                return
            _, _, event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = event.fire_at
            self._dispatch(event)
        if max_time is not None and max_time > self.now:
            self.now = max_time

    def _dispatch(self, event: Event) -> None:
        target = event.target
        if callable(target):
            name = getattr(target, "__name__", "fn")
            self._log(event.fire_at, event.seq, event.kind, event.source, name,
                      _summarize(event.payload))
            target(event)
            return
        handler = self._handlers.get(target)
        if handler is None:
            self._log(event.fire_at, event.seq, "drop", event.source, target,
                      _summarize(event.payload))
            return
        self._log(event.fire_at, event.seq, event.kind, event.source, target,
                  _summarize(event.payload))
        handler(event)

    # -- tracing ----------------------------------------------------------

    def _log(self, time: Ticks, seq: int, kind: str, source: Optional[str],
             target: str, summary: str) -> None:
        if self._trace_on:
            self._trace.append(TraceRecord(time, seq, kind, source, target, summary))

    def log_note(self, kind: str, source: Optional[str], summary: str) -> None:
        """Record an out-of-band trace line (assertions, milestones)."""
        self._log(self.now, self._seq, kind, source, "-", summary)

    @property
    def trace(self) -> list[TraceRecord]:
        return self._trace

    def trace_lines(self) -> list[str]:
        return [r.line() for r in self._trace]
