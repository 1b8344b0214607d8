"""Layered watchdog supervision.

L1 runs inside each guest, L2 is Gear2 watching guest VMs, L3 is Gear1
watching Gear2 and L4 stands for an external controller that only observes
the SoC.  Each layer has its own periodic check event; a check is skipped
while the checking entity itself is dead, which is what lets a lower layer
catch a dead upper one.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from twogear.errors import UnknownWatchdog
from twogear.simcore import GEAR1, GEAR2, MACHINE, Engine, EventKind

MS = 1_000_000


class Layer(enum.Enum):
    L1 = "L1RS"
    L2 = "L2RS"
    L3 = "L3RS"
    L4 = "L4RS"


class Action(enum.Enum):
    RESTART_VM = "RestartVm"
    RESTART_GEAR2 = "RestartGear2"
    SOC_RESET = "SocReset"
    LOG_ONLY = "LogOnly"


DEFAULT_PERIODS = {Layer.L1: 100 * MS, Layer.L2: 250 * MS, Layer.L3: 500 * MS, Layer.L4: 1000 * MS}
CHECKER = {Layer.L1: "guest", Layer.L2: "gear2", Layer.L3: "gear1", Layer.L4: "mcu"}
# trace actor reporting each layer's findings; the external MCU shows up as the machine
REPORTER = {Layer.L1: GEAR2, Layer.L2: GEAR2, Layer.L3: GEAR1, Layer.L4: MACHINE}


@dataclass
class Watchdog:
    layer: Layer
    subject: str
    period: int
    last_kick: int = 0
    action: Action = Action.LOG_ONLY


@dataclass(frozen=True)
class SupervisionEvent:
    at: int
    layer: Layer
    subject: str
    action: Action


@dataclass
class SupervisionConfig:
    periods: dict[Layer, int] = field(default_factory=lambda: dict(DEFAULT_PERIODS))
    actions: dict[Layer, Action] = field(default_factory=lambda: {l: Action.LOG_ONLY for l in Layer})
    escalate_after: int = 3
    escalate_window: int = 2000 * MS


class Supervisor:
    """Watchdog registry plus per-layer check scheduling.

    ``alive`` maps a checker name to a predicate; ``on_event`` is called
    with each emitted event so the owner can carry out the action.
    """

    def __init__(self, engine: Engine, config: Optional[SupervisionConfig] = None,
                 alive: Optional[dict[str, Callable[[], bool]]] = None,
                 on_event: Optional[Callable[[SupervisionEvent], None]] = None) -> None:
        self.engine = engine
        self.config = config or SupervisionConfig()
        self.watchdogs: dict[tuple[Layer, str], Watchdog] = {}
        self.alive = alive or {}
        self.on_event = on_event or (lambda ev: None)
        self.events: list[SupervisionEvent] = []
        self._l2_failures: deque[int] = deque()
        self.checks: dict[Layer, int] = {l: 0 for l in Layer}

    def register(self, layer: Layer, subject: str, period: Optional[int] = None,
                 action: Optional[Action] = None) -> Watchdog:
        wd = Watchdog(layer, subject, period or self.config.periods[layer], self.engine.now,
                      action or self.config.actions[layer])
        self.watchdogs[(layer, subject)] = wd
        return wd

    def kick(self, layer: Layer, subject: str) -> None:
        wd = self.watchdogs.get((layer, subject))
        if wd is None:
            raise UnknownWatchdog(f"{layer.value}/{subject}")
        wd.last_kick = self.engine.now

    def has(self, layer: Layer, subject: str) -> bool:
        return (layer, subject) in self.watchdogs

    def _checker_alive(self, layer: Layer) -> bool:
        pred = self.alive.get(CHECKER[layer])
        return pred() if pred else True

    def check_all(self, layer: Optional[Layer] = None) -> list[SupervisionEvent]:
        """Expired subjects of ``layer`` (all layers when None)."""
        now = self.engine.now
        out: list[SupervisionEvent] = []
        for (lay, subject), wd in list(self.watchdogs.items()):
            if layer is not None and lay is not layer:
                continue
            if now - wd.last_kick > wd.period:
                ev = SupervisionEvent(now, lay, subject, wd.action)
                out.append(ev)
                if lay is Layer.L2:
                    out.extend(self._escalate(now))
        return out

    def _escalate(self, now: int) -> list[SupervisionEvent]:
        fails = self._l2_failures
        fails.append(now)
        while fails and now - fails[0] > self.config.escalate_window:
            fails.popleft()
        if len(fails) >= self.config.escalate_after:
            fails.clear()
            return [SupervisionEvent(now, Layer.L3, "escalated", self.config.actions[Layer.L3])]
        return []

    def start(self) -> None:
        for layer in Layer:
            if any(l is layer for l, _ in self.watchdogs):
                self._schedule(layer, self.engine.now + self.config.periods[layer])

    def _schedule(self, layer: Layer, at: int) -> None:
        self.engine.call_at(at, self._check_event, EventKind.WATCHDOG_CHECK, layer)

    def _check_event(self, ev) -> None:
        layer: Layer = ev.payload
        self._schedule(layer, self.engine.now + self.config.periods[layer])
        if not self._checker_alive(layer):
            return
        self.checks[layer] += 1
        for sev in self.check_all(layer):
            self.events.append(sev)
            self.engine.emit(REPORTER[sev.layer], "supervision_event",
                             ("layer", sev.layer.value, "subject", sev.subject, "action", sev.action.value))
            self.on_event(sev)
