"""Synthetic guest workloads.

A guest is a tiny program of instructions executed by :class:`GuestVcpu`.
Text form, one instruction per entry::

    Compute 1000                     spend 1000 ns
    Mmio 0x0a000000 W blocking 7     write 7; "nonblocking" also accepted
    Mmio 0x0a000000 R                reads are always blocking
    Hypercall WATCHDOG_KICK 2        name or numeric id, then integer args
    ArmTimer 4000000 periodic        one-shot when "periodic" is absent
    Wfi
    MemTouch 0x40000000 64 128       ipa, stride, count
    KickWatchdog
    LoopTo 0 99                      jump to 0 another 99 times; "forever" loops

``LoopTo i n`` keeps a counter per LoopTo instruction, so the body before it
runs ``n + 1`` times in total and the counter resets when the loop exits.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence, Union

from twogear.errors import ProgramEnd, SimError
from twogear.simcore import Prng

if TYPE_CHECKING:
    from twogear.gear1 import VcpuContext

FOREVER = -1


@dataclass(frozen=True)
class Compute:
    ns: int


@dataclass(frozen=True)
class Mmio:
    addr: int
    write: bool
    blocking: bool = True
    value: int = 0
    size: int = 8


@dataclass(frozen=True)
class Hypercall:
    id: int
    args: tuple = ()


@dataclass(frozen=True)
class ArmTimer:
    delta: int
    periodic: bool = False


@dataclass(frozen=True)
class Wfi:
    pass


@dataclass(frozen=True)
class MemTouch:
    ipa: int
    stride: int
    count: int


@dataclass(frozen=True)
class KickWatchdog:
    pass


@dataclass(frozen=True)
class LoopTo:
    index: int
    times: int


Instruction = Union[Compute, Mmio, Hypercall, ArmTimer, Wfi, MemTouch, KickWatchdog, LoopTo]


# actions queued by interrupt handlers; they run before the program resumes

@dataclass(frozen=True)
class Sample:
    expected: int


@dataclass(frozen=True)
class Backend:
    device: int
    desc: object


@dataclass(frozen=True)
class Ack:
    device: int
    desc: object


@dataclass(frozen=True)
class GicCpuTrap:
    offset: int


def _int(tok: str) -> int:
    return int(tok, 0)


def parse_instruction(text: str) -> Instruction:
    from twogear.gear1 import HypercallId

    toks = text.split()
    if not toks:
        raise SimError("empty instruction")
    op, rest = toks[0], toks[1:]
    try:
        if op == "Compute":
            return Compute(_int(rest[0]))
        if op == "Mmio":
            addr, rw = _int(rest[0]), rest[1].upper()
            if rw not in ("R", "W"):
                raise SimError(f"bad access kind {rw!r}")
            blocking = True
            value = 0
            for tok in rest[2:]:
                if tok == "blocking":
                    blocking = True
                elif tok == "nonblocking":
                    blocking = False
                else:
                    value = _int(tok)
            return Mmio(addr, rw == "W", blocking or rw == "R", value)
        if op == "Hypercall":
            name = rest[0]
            hid = int(HypercallId[name]) if name in HypercallId.__members__ else _int(name)
            return Hypercall(hid, tuple(_int(t) for t in rest[1:]))
        if op == "ArmTimer":
            return ArmTimer(_int(rest[0]), len(rest) > 1 and rest[1] == "periodic")
        if op == "Wfi":
            return Wfi()
        if op == "MemTouch":
            return MemTouch(_int(rest[0]), _int(rest[1]), _int(rest[2]))
        if op == "KickWatchdog":
            return KickWatchdog()
        if op == "LoopTo":
            times = FOREVER if rest[1] == "forever" else _int(rest[1])
            return LoopTo(_int(rest[0]), times)
    except (IndexError, ValueError) as exc:
        raise SimError(f"cannot parse instruction {text!r}: {exc}") from None
    raise SimError(f"unknown instruction {op!r}")


def format_instruction(ins: Instruction) -> str:
    if isinstance(ins, Compute):
        return f"Compute {ins.ns}"
    if isinstance(ins, Mmio):
        kind = "W" if ins.write else "R"
        mode = "blocking" if ins.blocking else "nonblocking"
        tail = f" {ins.value}" if ins.write else ""
        return f"Mmio {ins.addr:#x} {kind} {mode}{tail}"
    if isinstance(ins, Hypercall):
        return " ".join(["Hypercall", f"{ins.id:#x}", *map(str, ins.args)])
    if isinstance(ins, ArmTimer):
        return f"ArmTimer {ins.delta}" + (" periodic" if ins.periodic else "")
    if isinstance(ins, Wfi):
        return "Wfi"
    if isinstance(ins, MemTouch):
        return f"MemTouch {ins.ipa:#x} {ins.stride} {ins.count}"
    if isinstance(ins, KickWatchdog):
        return "KickWatchdog"
    if isinstance(ins, LoopTo):
        return f"LoopTo {ins.index} " + ("forever" if ins.times == FOREVER else str(ins.times))
    raise TypeError(ins)


@dataclass
class WorkloadProgram:
    instructions: list[Instruction] = field(default_factory=list)

    def __post_init__(self) -> None:
        n = len(self.instructions)
        for i, ins in enumerate(self.instructions):
            if isinstance(ins, LoopTo) and not (0 <= ins.index <= i and (ins.times >= 0 or ins.times == FOREVER)):
                raise SimError(f"LoopTo at {i} targets {ins.index}")
        self.size = n

    @classmethod
    def parse(cls, lines: Sequence[str]) -> "WorkloadProgram":
        return cls([parse_instruction(line) for line in lines])

    def to_text(self) -> list[str]:
        return [format_instruction(i) for i in self.instructions]

    def __len__(self) -> int:
        return len(self.instructions)


class ProfileKind(enum.Enum):
    IO_BOUND = "io_bound"
    CPU_BOUND = "cpu_bound"


# doorbell write followed by this much work keeps a device with the default
# 80998 ns service time saturated (submissions outpace completions)
IO_BOUND_GAP_NS = 60_000
CPU_BOUND_TICK_NS = 4_000_000
CPU_BOUND_CHUNK_NS = 1_000_000


def make_profile(kind: ProfileKind | str, duration: int, doorbell: int = 0x0A00_0000) -> WorkloadProgram:
    """Workload driving a known interrupt rate for ``duration`` ns.

    IO_BOUND rings ``doorbell`` (a pass-through block device) and computes;
    the device then completes at its service rate.  CPU_BOUND computes under
    a 250 Hz periodic guest tick.
    """
    kind = ProfileKind(kind)
    if duration <= 0:
        return WorkloadProgram([])
    if kind is ProfileKind.IO_BOUND:
        n = max(1, math.ceil(duration / IO_BOUND_GAP_NS))
        return WorkloadProgram([Mmio(doorbell, True, False, 1), Compute(IO_BOUND_GAP_NS), LoopTo(0, n)])
    n = max(1, math.ceil(duration / CPU_BOUND_CHUNK_NS))
    return WorkloadProgram([ArmTimer(CPU_BOUND_TICK_NS, True), Compute(CPU_BOUND_CHUNK_NS), LoopTo(1, n)])


def cyclictest_program(period: int, loops: int = FOREVER) -> WorkloadProgram:
    return WorkloadProgram([ArmTimer(period, True), Wfi(), LoopTo(1, loops)])


@dataclass(frozen=True)
class NoiseProfile:
    """Guest wake-up overhead ``fixed + width * u**shape`` plus contention.

    ``contention_ns`` bounds the extra uniform delay seen when other VMs run
    on the same SoC; ``host_p``/``host_max_ns`` parameterize host scheduling
    noise for the monolithic-hypervisor baseline.
    """

    name: str
    fixed_ns: int
    width_ns: int
    shape: float
    contention_ns: int
    host_p: float = 0.02
    host_max_ns: int = 2_500_000

    def wake_cost(self, rng: Prng) -> int:
        return self.fixed_ns + int(self.width_ns * rng.random() ** self.shape)

    def contention(self, rng: Prng) -> int:
        return int(self.contention_ns * rng.random())

    def host_noise(self, rng: Prng) -> int:
        hit = rng.random() < self.host_p
        amount = rng.random()
        return int(self.host_max_ns * amount) if hit else 0


XENOMAI = NoiseProfile("xenomai", fixed_ns=1000, width_ns=37000, shape=36, contention_ns=2000)
PREEMPT_RT = NoiseProfile("preempt_rt", fixed_ns=5000, width_ns=36000, shape=35, contention_ns=5000)
NOISE_PROFILES = {p.name: p for p in (XENOMAI, PREEMPT_RT)}


@dataclass
class RtTaskConfig:
    period: int = 1_000_000
    profile: NoiseProfile = XENOMAI
    contended: bool = True
    records: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class LatencyStats:
    count: int
    min: int
    avg: float
    max: int
    normalized_jitter: float = 1.0

    @classmethod
    def from_samples(cls, samples: Sequence[int], native_max: Optional[int] = None) -> "LatencyStats":
        if not samples:
            return cls(0, 0, 0.0, 0, 0.0)
        mx = max(samples)
        norm = mx / native_max if native_max else 1.0
        return cls(len(samples), min(samples), sum(samples) / len(samples), mx, norm)

    def normalized(self, native_max: int) -> "LatencyStats":
        return LatencyStats(self.count, self.min, self.avg, self.max,
                            self.max / native_max if native_max else 0.0)


class GuestVcpu:
    """Interpreter state for one vcpu.  Execution is driven by the simulation."""

    def __init__(self, ctx: "VcpuContext", program: WorkloadProgram, seed: int = 0,
                 rt: Optional[RtTaskConfig] = None) -> None:
        self.ctx = ctx
        self.program = program
        self.rt = rt
        self.actions: deque = deque()
        self.loop_counts: dict[int, int] = {}
        # remaining time of an in-progress timed op, per slot ("act", "prog")
        self.rem: dict[str, Optional[int]] = {"act": None, "prog": None}
        self.slot: Optional[str] = None
        self.compute_end = 0
        self.period: Optional[int] = None
        self.deadline: Optional[int] = None
        self.woke = False
        self.hung = False
        self.ended = False
        self.discard_suspend = False
        self.generation = 0
        self.samples: list[int] = []
        self.irqs: dict[int, int] = {}
        base = Prng(seed)
        self.rng_wake = base.stream("rt-wake")
        self.rng_contention = base.stream("rt-contention")
        self.rng_host = base.stream("rt-host")

    @property
    def key(self) -> tuple[int, int]:
        return (self.ctx.vm, self.ctx.vcpu)

    def current(self) -> tuple[Optional[str], object]:
        if self.actions:
            return "act", self.actions[0]
        pp = self.ctx.program_point
        if pp < len(self.program.instructions):
            return "prog", self.program.instructions[pp]
        return None, None

    def advance(self, slot: str = "prog") -> None:
        """Move past the current op of ``slot``."""
        if slot == "act":
            self.actions.popleft()
            self.rem["act"] = None
            return
        self.rem["prog"] = None
        if self.ctx.program_point < len(self.program.instructions):
            self.ctx.program_point += 1

    def loop(self, ins: LoopTo) -> None:
        pp = self.ctx.program_point
        if ins.times == FOREVER:
            self.ctx.program_point = ins.index
            return
        done = self.loop_counts.get(pp, 0)
        if done < ins.times:
            self.loop_counts[pp] = done + 1
            self.ctx.program_point = ins.index
        else:
            self.loop_counts[pp] = 0
            self.ctx.program_point = pp + 1

    def check_end(self) -> None:
        if self.current()[0] is None:
            raise ProgramEnd(f"vm{self.ctx.vm}.{self.ctx.vcpu} ran off its program")

    def reset(self) -> None:
        self.actions.clear()
        self.loop_counts.clear()
        self.rem = {"act": None, "prog": None}
        self.period = None
        self.deadline = None
        self.woke = False
        self.hung = False
        self.ended = False
        self.discard_suspend = True
        self.generation += 1
