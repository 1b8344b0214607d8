"""The simulated SoC: pcpus, RAM, GIC, generic timers, LLC and device stubs."""

from __future__ import annotations

import enum
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from twogear.errors import SimError, UnknownLine
from twogear.simcore import MACHINE, Engine, EventKind, SimTime

PAGE_SIZE = 4096

# GIC interrupt id space
SGI_MAX = 15
PPI_EL2_PHYS_TIMER = 26
PPI_VIRT_TIMER = 27
PPI_EL1_PHYS_TIMER = 30
SPI_BASE = 32

GICD_BASE = 0x0800_0000
GICD_SIZE = 0x1_0000
GICC_BASE = 0x0801_0000
GICC_SIZE = 0x1_0000
GICD_ISENABLER = 0x100
GICD_ICENABLER = 0x180
GICD_ITARGETSR = 0x800
GICD_SGIR = 0xF00
GICC_IAR = 0x0C
GICC_EOIR = 0x10


class Cluster(enum.Enum):
    BIG = "big"
    LITTLE = "little"


class Power(enum.Enum):
    OFF = "off"
    ON = "on"


@dataclass(frozen=True)
class VmWorld:
    vm: int
    vcpu: int

    def __str__(self) -> str:
        return f"vm{self.vm}.{self.vcpu}"


GEAR1_WORLD = "gear1"


@dataclass
class Pcpu:
    id: int
    cluster: Cluster = Cluster.BIG
    power: Power = Power.OFF
    current_world: object = None

    @property
    def on(self) -> bool:
        return self.power is Power.ON


class GicDistributor:
    """Physical distributor: enable bits, routing, pending bits, SGI filter."""

    def __init__(self) -> None:
        self.configured: set[int] = set()
        self.enabled: set[int] = set()
        self.route: dict[int, tuple[int, int]] = {}
        self.target_pcpu: dict[int, int] = {}
        self.pending: set[int] = set()
        self.sgi_filter: dict[int, frozenset[int]] = {}

    def configure(self, line: int, vm: int, vcpu: int, pcpu: int, enabled: bool = True) -> None:
        self.configured.add(line)
        self.route[line] = (vm, vcpu)
        self.target_pcpu[line] = pcpu
        if enabled:
            self.enabled.add(line)
        else:
            self.enabled.discard(line)

    def set_enable(self, line: int, enable: bool) -> None:
        if line not in self.configured:
            raise UnknownLine(line)
        if enable:
            self.enabled.add(line)
        else:
            self.enabled.discard(line)

    def allowed_sgi_targets(self, vm: int, targets: set[int]) -> set[int]:
        allowed = self.sgi_filter.get(vm)
        if allowed is None:
            return set(targets)
        return set(targets) & allowed


@dataclass
class ListRegister:
    line: int
    priority: int
    state: str = "pending"


class VirtualCpuInterface:
    """Per-vcpu virtual CPU interface.

    Injected virtual interrupts live in one of ``nr_lr`` list registers or in
    the software overflow queue; nothing is dropped.  Injecting a line that is
    already pending merges with it (counted in ``coalesced``).
    """

    def __init__(self, nr_lr: int = 4) -> None:
        self.list_registers: list[Optional[ListRegister]] = [None] * nr_lr
        self.overflow: deque[ListRegister] = deque()
        self.active: Optional[int] = None
        self.injected = 0
        self.delivered = 0
        self.coalesced = 0

    def _pending_lines(self):
        for lr in self.list_registers:
            if lr is not None:
                yield lr.line
        for lr in self.overflow:
            yield lr.line

    def inject(self, line: int, priority: int = 0xA0) -> bool:
        if line in self._pending_lines():
            self.coalesced += 1
            return False
        self.injected += 1
        entry = ListRegister(line, priority)
        for i, lr in enumerate(self.list_registers):
            if lr is None:
                self.list_registers[i] = entry
                return True
        self.overflow.append(entry)
        return True

    def pending_count(self) -> int:
        return sum(lr is not None for lr in self.list_registers) + len(self.overflow)

    def has_pending(self) -> bool:
        return any(lr is not None for lr in self.list_registers) or bool(self.overflow)

    def acknowledge(self) -> Optional[int]:
        """Highest-priority pending line (lowest value, then LR order)."""
        best = None
        for i, lr in enumerate(self.list_registers):
            if lr is not None and (best is None or lr.priority < self.list_registers[best].priority):
                best = i
        if best is None:
            return None
        line = self.list_registers[best].line
        self.list_registers[best] = None
        if self.overflow:
            self.list_registers[best] = self.overflow.popleft()
        self.delivered += 1
        self.active = line
        return line

    def eoi(self) -> None:
        self.active = None

    def lost(self) -> int:
        """Zero whenever the no-loss invariant holds."""
        return self.injected - self.delivered - self.pending_count()

    def reset(self) -> None:
        self.list_registers = [None] * len(self.list_registers)
        self.overflow.clear()
        self.active = None


TIMER_KINDS = ("cntv", "cnthp", "cntp")
TIMER_LINES = {"cntv": PPI_VIRT_TIMER, "cnthp": PPI_EL2_PHYS_TIMER, "cntp": PPI_EL1_PHYS_TIMER}


@dataclass
class Comparator:
    value: SimTime = 0
    enabled: bool = False


class TimerUnit:
    """Per-pcpu comparators against the shared system counter.

    ``cntv`` holds the EL1 virtual comparator of whichever vcpu is loaded on
    the pcpu, ``cnthp`` the EL2 physical timer and ``cntp`` the EL1 physical
    timer that the primary VM uses for its own scheduling tick.
    """

    def __init__(self, engine: Engine, npcpus: int) -> None:
        self.engine = engine
        self.comparators = {(p, k): Comparator() for p in range(npcpus) for k in TIMER_KINDS}
        self._event: dict[tuple[int, str], int] = {}
        self.on_fire: Callable[[int, str], None] = lambda pcpu, kind: None

    @property
    def system_count(self) -> SimTime:
        return self.engine.now

    def program(self, pcpu: int, kind: str, value: SimTime, enable: bool = True) -> None:
        cmp_ = self.comparators[(pcpu, kind)]
        cmp_.value = value
        cmp_.enabled = enable
        key = (pcpu, kind)
        old = self._event.pop(key, None)
        if old is not None:
            self.engine.cancel(old)
        if enable:
            at = max(value, self.engine.now)
            self._event[key] = self.engine.call_at(at, self._fire_event, EventKind.TIMER_FIRE, key)

    def disarm(self, pcpu: int, kind: str) -> None:
        self.comparators[(pcpu, kind)].enabled = False
        old = self._event.pop((pcpu, kind), None)
        if old is not None:
            self.engine.cancel(old)

    def read(self, pcpu: int, kind: str) -> Comparator:
        return self.comparators[(pcpu, kind)]

    def _fire_event(self, ev) -> None:
        self._event.pop(ev.payload, None)
        self.timer_tick()

    def timer_tick(self) -> list[tuple[int, str]]:
        """Fire every enabled comparator <= system count, in pcpu id order."""
        now = self.engine.now
        fired = []
        for (pcpu, kind), c in sorted(self.comparators.items(),
                                      key=lambda kv: (kv[0][0], TIMER_KINDS.index(kv[0][1]))):
            if c.enabled and c.value <= now:
                c.enabled = False
                old = self._event.pop((pcpu, kind), None)
                if old is not None:
                    self.engine.cancel(old)
                fired.append((pcpu, kind))
        for pcpu, kind in fired:
            self.on_fire(pcpu, kind)
        return fired


@dataclass(frozen=True)
class LlcGeometry:
    sets: int = 2048
    ways: int = 16
    line_bytes: int = 64
    page_bytes: int = PAGE_SIZE

    def __post_init__(self) -> None:
        for name in ("sets", "line_bytes", "page_bytes"):
            v = getattr(self, name)
            if v <= 0 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two")
        if self.ways <= 0:
            raise ValueError("ways must be positive")

    @property
    def colors(self) -> int:
        return max(1, self.sets * self.line_bytes // self.page_bytes)

    def set_index(self, pa: int) -> int:
        return (pa // self.line_bytes) % self.sets

    def line_addr(self, pa: int) -> int:
        return pa // self.line_bytes

    def color(self, pa: int) -> int:
        return (pa // self.page_bytes) % self.colors


class LlcResult(enum.Enum):
    HIT = "hit"
    COLD = "cold"
    CONFLICT_SELF = "conflict_self"
    CONFLICT_CROSS = "conflict_cross"

    @property
    def is_miss(self) -> bool:
        return self is not LlcResult.HIT


class LlcModel:
    """Set-associative LLC with per-set LRU.

    A miss is COLD the first time a line is ever referenced.  Later misses
    are classified by who evicted the line: CONFLICT_CROSS when the evicting
    access came from a different VM than the one that owned the evicted
    entry, CONFLICT_SELF otherwise.
    """

    def __init__(self, geometry: LlcGeometry = LlcGeometry(), log: bool = False) -> None:
        self.geometry = geometry
        self.occupancy: list[OrderedDict[int, int]] = [OrderedDict() for _ in range(geometry.sets)]
        self._seen: set[int] = set()
        self._evicted_by: dict[int, tuple[int, int]] = {}
        self.counts = {r: 0 for r in LlcResult}
        self.cross_by_vm: dict[int, int] = {}
        self.log: Optional[list[tuple[int, int]]] = [] if log else None

    def llc_access(self, vm: int, pa: int) -> LlcResult:
        g = self.geometry
        line = pa // g.line_bytes
        occ = self.occupancy[line % g.sets]
        if self.log is not None:
            self.log.append((vm, pa))
        if line in occ:
            occ.move_to_end(line)
            self.counts[LlcResult.HIT] += 1
            return LlcResult.HIT
        if line not in self._seen:
            self._seen.add(line)
            result = LlcResult.COLD
        else:
            owner, evictor = self._evicted_by.pop(line)
            result = LlcResult.CONFLICT_CROSS if owner != evictor else LlcResult.CONFLICT_SELF
            if result is LlcResult.CONFLICT_CROSS:
                self.cross_by_vm[vm] = self.cross_by_vm.get(vm, 0) + 1
        if len(occ) >= g.ways:
            victim, victim_vm = occ.popitem(last=False)
            self._evicted_by[victim] = (victim_vm, vm)
        occ[line] = vm
        self.counts[result] += 1
        return result

    def max_occupancy(self) -> int:
        return max((len(s) for s in self.occupancy), default=0)


class DeviceBehavior(enum.Enum):
    BLOCK = "block"
    CONSOLE = "console"
    NET = "net"
    CUSTOM = "custom"


@dataclass
class DeviceStub:
    """An MMIO window plus an interrupt line.

    When assigned pass-through, a write to offset 0 submits a request that
    completes after ``service_ns``; requests queue FIFO up to ``queue_depth``
    and submissions beyond that are refused.
    """

    id: int
    mmio_base: int
    mmio_len: int
    irq_line: int
    behavior: DeviceBehavior = DeviceBehavior.BLOCK
    service_ns: int = 80998
    queue_depth: int = 64
    queued: int = 0
    submitted: int = 0
    completed: int = 0
    refused: int = 0
    busy: bool = False
    regs: dict = field(default_factory=dict)

    def contains(self, pa: int) -> bool:
        return self.mmio_base <= pa < self.mmio_base + self.mmio_len


class AccessOp(enum.Enum):
    READ = "R"
    WRITE = "W"


class Machine:
    """Hardware state.  Hypervisor policy is injected through three hooks:

    ``translate(vm, ipa) -> pa`` (raises Stage2Fault), ``irq_sink(pcpu, line)``
    which returns a delivery-outcome string, and ``device_irq`` wiring set up
    by :meth:`attach`.
    """

    def __init__(self, engine: Engine, pcpus: list[Pcpu], llc: LlcModel,
                 devices: list[DeviceStub] = (), nr_lr: int = 4,
                 llc_hit_ns: int = 2, llc_miss_ns: int = 80) -> None:
        self.engine = engine
        self.pcpus = pcpus
        self.llc = llc
        self.nr_lr = nr_lr
        self.llc_hit_ns = llc_hit_ns
        self.llc_miss_ns = llc_miss_ns
        self.gicd = GicDistributor()
        self.timers = TimerUnit(engine, len(pcpus))
        self.memory: dict[int, int] = {}
        self.devices: dict[int, DeviceStub] = {}
        for d in devices:
            self.add_device(d)
        self.translate: Callable[[int, int], int] = lambda vm, ipa: ipa
        self.irq_sink: Callable[[int, int], str] = lambda pcpu, line: "unhandled"
        self.irq_count: dict[int, int] = {}

    def add_device(self, dev: DeviceStub) -> None:
        for other in self.devices.values():
            if dev.mmio_base < other.mmio_base + other.mmio_len and other.mmio_base < dev.mmio_base + dev.mmio_len:
                raise SimError(f"device {dev.id} MMIO overlaps device {other.id}")
        self.devices[dev.id] = dev

    def device_at(self, pa: int) -> Optional[DeviceStub]:
        for d in self.devices.values():
            if d.contains(pa):
                return d
        return None

    # interrupts

    def raise_irq(self, line: int, pcpu: Optional[int] = None) -> str:
        """Assert ``line``.  PPIs/SGIs need ``pcpu``; SPIs use the route."""
        if line >= SPI_BASE:
            if line not in self.gicd.configured:
                raise UnknownLine(line)
            if line not in self.gicd.enabled:
                self.gicd.pending.add(line)
                self.engine.emit(MACHINE, "irq_pending", ("line", line))
                return "pending"
            pcpu = self.gicd.target_pcpu[line]
        elif pcpu is None:
            raise UnknownLine(f"line {line} needs a target pcpu")
        self.irq_count[line] = self.irq_count.get(line, 0) + 1
        return self.irq_sink(pcpu, line)

    def release_pending(self, line: int) -> Optional[str]:
        if line in self.gicd.pending and line in self.gicd.enabled:
            self.gicd.pending.discard(line)
            return self.raise_irq(line)
        return None

    # memory

    def mem_access(self, vm: int, ipa: int, op: AccessOp, nbytes: int = 8, value: int = 0) -> tuple[int, int]:
        """Translate and perform an access.  Returns ``(value, cost_ns)``.

        Stage2Fault propagates to the caller, which owns trap delivery.
        """
        pa = self.translate(vm, ipa)
        dev = self.device_at(pa)
        if dev is not None:
            return self.device_access(dev, pa - dev.mmio_base, op, value), 0
        result = self.llc.llc_access(vm, pa)
        cost = self.llc_miss_ns if result.is_miss else self.llc_hit_ns
        word = pa & ~7
        if op is AccessOp.WRITE:
            self.memory[word] = value & ((1 << (8 * min(nbytes, 8))) - 1)
            return value, cost
        return self.memory.get(word, 0), cost

    def device_access(self, dev: DeviceStub, offset: int, op: AccessOp, value: int) -> int:
        if op is AccessOp.READ:
            if offset == 0x8:
                return dev.completed
            return dev.regs.get(offset, 0)
        if offset != 0:
            dev.regs[offset] = value
            return value
        if dev.queued >= dev.queue_depth:
            dev.refused += 1
            return 0
        dev.queued += 1
        dev.submitted += 1
        if not dev.busy:
            dev.busy = True
            self.engine.call_at(self.engine.now + dev.service_ns, self._device_complete,
                                EventKind.IO_COMPLETE, dev.id)
        return value

    def _device_complete(self, ev) -> None:
        dev = self.devices[ev.payload]
        dev.queued -= 1
        dev.completed += 1
        if dev.queued:
            self.engine.call_at(self.engine.now + dev.service_ns, self._device_complete,
                                EventKind.IO_COMPLETE, dev.id)
        else:
            dev.busy = False
        self.raise_irq(dev.irq_line)
