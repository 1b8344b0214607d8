"""Deterministic discrete-event engine.

Virtual time is an integer count of nanoseconds.  Events are ordered by
``(at, seq)`` where ``seq`` is assigned when the event is scheduled, so two
events at the same instant dispatch in FIFO order.

Every observable effect of a simulation is written to a :class:`Trace`.  The
canonical byte form of a trace is one line per record::

    <at>\\t<actor>\\t<action>\\t<detail>\\t<cost>\\n

with integers in plain decimal and ``detail`` rendered as comma-separated
``key=value`` pairs in the order the emitter supplied them.  ``trace_hash``
is SHA-256 over that byte stream, so the hash of an empty trace is
``EMPTY_TRACE_HASH``.

Pseudo-random numbers come from :class:`Prng`, a SplitMix64 generator::

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z <- state
    z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2**64)
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2**64)
    out <- z ^ (z >> 31)

Named sub-streams are derived by mixing the parent seed with the 64-bit
FNV-1a hash of the stream name, which keeps them identical on every platform.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, NamedTuple, Optional

from twogear.errors import PastTime

SimTime = int
EventId = int

MASK64 = (1 << 64) - 1

GEAR1 = "gear1"
GEAR2 = "gear2"
DVM = "dvm"
MACHINE = "machine"


def vm_actor(vm: int, vcpu: int) -> str:
    return f"vm{vm}.{vcpu}"


class EventKind(enum.Enum):
    IRQ_RAISED = "IrqRaised"
    TIMER_FIRE = "TimerFire"
    GUEST_STEP = "GuestStep"
    WATCHDOG_CHECK = "WatchdogCheck"
    IO_COMPLETE = "IoComplete"
    CUSTOM = "Custom"


@dataclass(slots=True)
class Event:
    at: SimTime
    kind: EventKind = EventKind.CUSTOM
    payload: Any = None
    handler: Optional[Callable[["Event"], None]] = None
    seq: int = -1


class TraceRecord(NamedTuple):
    at: SimTime
    actor: str
    action: str
    detail: tuple = ()
    cost: int = 0

    def get(self, key: str, default: Any = None) -> Any:
        d = self.detail
        for i in range(0, len(d), 2):
            if d[i] == key:
                return d[i + 1]
        return default

    def line(self) -> str:
        d = self.detail
        detail = ",".join(f"{d[i]}={d[i + 1]}" for i in range(0, len(d), 2))
        return f"{self.at}\t{self.actor}\t{self.action}\t{detail}\t{self.cost}\n"


class Trace:
    """Append-only list of trace records in dispatch order."""

    def __init__(self, records: Iterable[TraceRecord] = ()) -> None:
        self.records: list[TraceRecord] = list(records)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def select(self, action: str | None = None, actor: str | None = None) -> list[TraceRecord]:
        return [r for r in self.records
                if (action is None or r.action == action) and (actor is None or r.actor == actor)]

    def lines(self) -> Iterator[str]:
        for r in self.records:
            yield r.line()

    def dump(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.writelines(self.lines())

    @classmethod
    def load(cls, path) -> "Trace":
        out = cls()
        with open(path, encoding="ascii", newline="") as fh:
            for raw in fh:
                at, actor, action, detail, cost = raw.rstrip("\n").split("\t")
                pairs: list = []
                if detail:
                    for item in detail.split(","):
                        k, v = item.split("=", 1)
                        pairs.extend((k, int(v) if _is_int(v) else v))
                out.append(TraceRecord(int(at), actor, action, tuple(pairs), int(cost)))
        return out


def _is_int(s: str) -> bool:
    return s.lstrip("-").isdigit()


EMPTY_TRACE_HASH = hashlib.sha256(b"").hexdigest()


def trace_hash(trace: Trace | Iterable[TraceRecord]) -> str:
    """SHA-256 hex digest of the canonical serialization."""
    h = hashlib.sha256()
    buf: list[str] = []
    for r in trace:
        buf.append(r.line())
        if len(buf) >= 4096:
            h.update("".join(buf).encode("ascii"))
            buf.clear()
    if buf:
        h.update("".join(buf).encode("ascii"))
    return h.hexdigest()


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


class Prng:
    """SplitMix64; see module docstring for the update equations."""

    __slots__ = ("seed", "state")

    def __init__(self, seed: int) -> None:
        self.seed = seed & MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange bound must be positive")
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def expovariate(self, rate: float) -> float:
        return -math.log(1.0 - self.random()) / rate

    def stream(self, name: str) -> "Prng":
        """Independent sub-stream keyed by ``name``; does not advance self."""
        mixer = Prng(self.seed ^ _fnv1a64(name))
        return Prng(mixer.next_u64())


class Engine:
    """Single-threaded event loop with virtual time and a trace."""

    def __init__(self, seed: int = 0) -> None:
        self._queue: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._now: SimTime = 0
        self._cancelled: set[int] = set()
        self.trace = Trace()
        self.prng = Prng(seed)
        self.seed = seed
        self.dispatched = 0

    @property
    def now(self) -> SimTime:
        return self._now

    def schedule(self, event: Event) -> EventId:
        if event.at < self._now:
            raise PastTime(f"event at {event.at} is before now={self._now}")
        seq = self._seq
        self._seq += 1
        event.seq = seq
        heapq.heappush(self._queue, (event.at, seq, event))
        return seq

    def call_at(self, at: SimTime, handler: Callable[[Event], None],
                kind: EventKind = EventKind.CUSTOM, payload: Any = None) -> EventId:
        return self.schedule(Event(at, kind, payload, handler))

    def cancel(self, event_id: EventId) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return len(self._queue) - len(self._cancelled)

    def peek_time(self) -> Optional[SimTime]:
        while self._queue and self._queue[0][1] in self._cancelled:
            _, seq, _ = heapq.heappop(self._queue)
            self._cancelled.discard(seq)
        return self._queue[0][0] if self._queue else None

    def emit(self, actor: str, action: str, detail: tuple = (), cost: int = 0) -> TraceRecord:
        if cost < 0:
            raise ValueError("cost_charged must be non-negative")
        rec = TraceRecord(self._now, actor, action, detail, cost)
        self.trace.records.append(rec)
        return rec

    def run_until(self, deadline: SimTime) -> Trace:
        """Dispatch every event with ``at <= deadline``.

        ``now`` only moves to the time of dispatched events; an empty queue
        leaves it where it was.
        """
        queue = self._queue
        cancelled = self._cancelled
        pop = heapq.heappop
        while queue and queue[0][0] <= deadline:
            at, seq, ev = pop(queue)
            if seq in cancelled:
                cancelled.discard(seq)
                continue
            self._now = at
            self.dispatched += 1
            if ev.handler is not None:
                ev.handler(ev)
            else:
                self._default_dispatch(ev)
        return self.trace

    def _default_dispatch(self, ev: Event) -> None:
        detail: tuple = ()
        if isinstance(ev.payload, dict):
            detail = tuple(x for kv in ev.payload.items() for x in kv)
        elif ev.payload is not None:
            detail = ("payload", ev.payload)
        self.emit(MACHINE, ev.kind.value, detail)


@dataclass
class Counter:
    """Small named-counter bag used by several components for audit totals."""

    values: dict[str, int] = field(default_factory=dict)

    def add(self, key: str, n: int = 1) -> None:
        self.values[key] = self.values.get(key, 0) + n

    def __getitem__(self, key: str) -> int:
        return self.values.get(key, 0)
