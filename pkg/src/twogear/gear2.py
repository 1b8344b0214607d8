"""Scheduling-policy layer that runs inside the primary VM.

One idle thread and one run queue per pcpu; vcpu threads are bound to the
pcpu named by their manifest affinity.  The active scheduler decides which
thread gets the pcpu and Gear2 runs it through the RunVcpu hypercall.
"""

from __future__ import annotations

import abc
import enum
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from twogear.errors import BadRequest, DvmRingFull, SimError
from twogear.gear1 import (SGI_GEAR2_KICK, GicdAccess, Hypercall, MmioRead, MmioWrite,
                           PhysIrq, Runstate, Stage2Perm, VcpuContext, VmKind, Wfi, Yield)
from twogear.machine import PPI_EL1_PHYS_TIMER, PPI_EL2_PHYS_TIMER, PPI_VIRT_TIMER, SPI_BASE
from twogear.simcore import GEAR2

if TYPE_CHECKING:
    from twogear.system import Simulation

DEFAULT_QUANTUM_NS = 1_000_000
RING_RETRY_NS = 10_000


class ThreadKind(enum.Enum):
    IDLE = "idle"
    VCPU = "vcpu"
    SERVICE = "service"


class ThreadState(enum.Enum):
    READY = "ready"
    RUNNING = "running"
    BLOCKED = "blocked"


@dataclass(eq=False)
class Thread:
    kind: ThreadKind
    pcpu: int
    vm: int = -1
    vcpu: int = -1
    state: ThreadState = ThreadState.READY
    block_reason: Optional[str] = None
    ctx: Optional[VcpuContext] = None
    priority: int = 0
    dispatches: int = 0

    @property
    def name(self) -> str:
        if self.kind is ThreadKind.IDLE:
            return f"idle{self.pcpu}"
        return f"vm{self.vm}.{self.vcpu}"


class SchedulerPolicy(abc.ABC):
    """Per-pcpu policy.  ``pick_next`` removes and returns the chosen thread."""

    quantum: int = DEFAULT_QUANTUM_NS

    @abc.abstractmethod
    def on_ready(self, thread: Thread) -> None: ...

    @abc.abstractmethod
    def on_block(self, thread: Thread) -> None: ...

    @abc.abstractmethod
    def pick_next(self) -> Optional[Thread]: ...

    @abc.abstractmethod
    def ready_threads(self) -> list[Thread]: ...

    def has_ready(self) -> bool:
        return bool(self.ready_threads())


class RoundRobin(SchedulerPolicy):
    def __init__(self, quantum: int = DEFAULT_QUANTUM_NS) -> None:
        self.quantum = quantum
        self.queue: deque[Thread] = deque()

    def on_ready(self, thread: Thread) -> None:
        if thread not in self.queue:
            self.queue.append(thread)

    def on_block(self, thread: Thread) -> None:
        try:
            self.queue.remove(thread)
        except ValueError:
            pass

    def pick_next(self) -> Optional[Thread]:
        return self.queue.popleft() if self.queue else None

    def ready_threads(self) -> list[Thread]:
        return list(self.queue)


class StrictPriority(SchedulerPolicy):
    """Highest ``priority`` first, FIFO within a level."""

    def __init__(self, quantum: int = DEFAULT_QUANTUM_NS) -> None:
        self.quantum = quantum
        self.ready: list[Thread] = []

    def on_ready(self, thread: Thread) -> None:
        if thread not in self.ready:
            self.ready.append(thread)

    def on_block(self, thread: Thread) -> None:
        if thread in self.ready:
            self.ready.remove(thread)

    def pick_next(self) -> Optional[Thread]:
        if not self.ready:
            return None
        best = max(self.ready, key=lambda t: t.priority)
        self.ready.remove(best)
        return best

    def ready_threads(self) -> list[Thread]:
        return list(self.ready)


POLICIES = {"round_robin": RoundRobin, "strict_priority": StrictPriority}


@dataclass
class VmExitMessage:
    source: tuple[int, int]
    reason: object
    completion: Optional[tuple[int, int]] = None
    cause: str = ""


@dataclass
class IoRequest:
    tag: int
    source: tuple[int, int]
    pcpu: int
    device: int
    write: bool
    addr: int
    size: int
    value: int
    blocking: bool
    issued_at: int
    result: int = 0
    error: bool = False
    generation: int = 0     # source guest incarnation; a restart makes older requests stale


@dataclass
class IoCounters:
    issued_blocking: int = 0
    issued_nonblocking: int = 0
    acks: int = 0
    ip_advances: int = 0
    completion_virqs: int = 0
    ring_full: int = 0
    errors: int = 0
    stale: int = 0


class Gear2:
    def __init__(self, sim: "Simulation", quantum: int = DEFAULT_QUANTUM_NS,
                 policy: str = "round_robin") -> None:
        self.sim = sim
        self.quantum = quantum
        self.policy_name = policy
        self.policies: dict[int, SchedulerPolicy] = {}
        self.threads: dict[tuple[int, int], Thread] = {}
        self.idle: dict[int, Thread] = {}
        self.current: dict[int, Optional[Thread]] = {}
        self.q_start: dict[int, int] = {}
        self.mailbox: dict[int, deque] = {}
        self.pending_io: dict[int, IoRequest] = {}
        self.io = IoCounters()
        self._tag = 0
        self.alive = True
        self.booted = False

    # boot

    def boot(self, pcpu: int = 0) -> None:
        sim = self.sim
        g1 = sim.gear1
        sim.charge(pcpu, GEAR2, "boot", 0, ("pcpu", pcpu))
        self._bring_up(pcpu)
        for p in sorted(g1.manifests[g1.primary_id].affinity):
            if p == pcpu:
                continue
            g1.hypercall(pcpu, g1.primary_ctx(pcpu), 0xC4000003, (p, "gear2_idle"))
        for (vm, v), ctx in g1.contexts.items():
            kind = g1.kind(vm)
            if kind in (VmKind.PRIMARY, VmKind.RTVM):
                continue
            home = g1.manifests[vm].affinity[v]
            t = Thread(ThreadKind.VCPU, home, vm, v, ctx=ctx)
            self.threads[(vm, v)] = t
            ctx.runstate = Runstate.READY
            sim.engine.emit(GEAR2, "thread_create", ("vm", vm, "vcpu", v, "pcpu", home))
        self.booted = True
        for t in self.threads.values():
            if t.pcpu in self.policies:
                self.policies[t.pcpu].on_ready(t)
        sim.after(pcpu, self.reschedule, pcpu)

    def _bring_up(self, pcpu: int) -> None:
        self.idle[pcpu] = Thread(ThreadKind.IDLE, pcpu)
        self.current[pcpu] = None
        self.mailbox.setdefault(pcpu, deque())
        self.register_policy(POLICIES[self.policy_name](self.quantum), pcpu)

    def cpu_entry(self, pcpu: int) -> None:
        """Secondary pcpu entry after CPU_ON: idle loop plus local queue."""
        self._bring_up(pcpu)
        if self.booted:
            for t in self.threads.values():
                if t.pcpu == pcpu and t.state is ThreadState.READY:
                    self.policies[pcpu].on_ready(t)
        self.reschedule(pcpu)

    def register_policy(self, policy: SchedulerPolicy, pcpu: int) -> None:
        old = self.policies.get(pcpu)
        if old is not None:
            for t in old.ready_threads():
                policy.on_ready(t)
        self.policies[pcpu] = policy
        self.sim.engine.emit(GEAR2, "register_policy", ("pcpu", pcpu, "policy", type(policy).__name__,
                                                        "quantum", policy.quantum))

    # scheduling

    def _block(self, t: Thread, reason: str) -> None:
        t.state = ThreadState.BLOCKED
        t.block_reason = reason
        t.ctx.runstate = Runstate.BLOCKED
        t.ctx.block_reason = reason
        self.policies[t.pcpu].on_block(t)
        if self.current.get(t.pcpu) is t:
            self.current[t.pcpu] = None
        self.sim.engine.emit(GEAR2, "block", ("vm", t.vm, "vcpu", t.vcpu, "reason", reason))

    def _ready(self, t: Thread) -> None:
        t.state = ThreadState.READY
        t.block_reason = None
        t.ctx.runstate = Runstate.READY
        t.ctx.block_reason = None
        self.policies[t.pcpu].on_ready(t)
        self._arm_quantum(t.pcpu)

    def wake(self, pcpu: int, ctx: VcpuContext, reason: str = "wfi") -> bool:
        t = self.threads.get((ctx.vm, ctx.vcpu))
        if t is None or t.state is not ThreadState.BLOCKED or t.block_reason != reason:
            return False
        self._ready(t)
        self.sim.engine.emit(GEAR2, "wake", ("vm", t.vm, "vcpu", t.vcpu, "pcpu", t.pcpu))
        return True

    def _arm_quantum(self, pcpu: int) -> None:
        timers = self.sim.machine.timers
        cur = self.current.get(pcpu)
        if cur is not None and self.policies[pcpu].has_ready():
            if not timers.read(pcpu, "cntp").enabled:
                at = max(self.sim.engine.now, self.q_start[pcpu] + self.policies[pcpu].quantum)
                timers.program(pcpu, "cntp", at, True)
        elif timers.read(pcpu, "cntp").enabled:
            timers.disarm(pcpu, "cntp")

    def pick_next(self, pcpu: int) -> Thread:
        t = self.policies[pcpu].pick_next()
        if t is None:
            return self.idle[pcpu]
        if t.pcpu != pcpu:
            raise SimError(f"policy returned {t.name} bound to pcpu {t.pcpu} on pcpu {pcpu}")
        return t

    def reschedule(self, pcpu: int, cause: str = "sched") -> None:
        """Run the current thread again or pick the next one."""
        sim = self.sim
        ex = sim.execs[pcpu]
        ex.cont = None
        if not self.alive:
            ex.mode = "gear2_idle"
            return
        while ex.latched:
            self.handle_line(pcpu, ex.latched.popleft(), "irq")
        if self.mailbox.get(pcpu):
            self.drain_mailbox(pcpu)
        cur = self.current.get(pcpu)
        if cur is None:
            nxt = self.pick_next(pcpu)
            if nxt.kind is ThreadKind.IDLE:
                self._arm_quantum(pcpu)
                if ex.mode != "gear2_idle" or sim.delay(pcpu):
                    sim.engine.emit(GEAR2, "idle", ("pcpu", pcpu))
                sim.settle(pcpu, "gear2_idle")
                return
            cur = nxt
            self.current[pcpu] = cur
            cur.state = ThreadState.RUNNING
            cur.dispatches += 1
            self.q_start[pcpu] = sim.offset(pcpu)
            sim.engine.emit(GEAR2, "dispatch", ("vm", cur.vm, "vcpu", cur.vcpu, "pcpu", pcpu))
        self._arm_quantum(pcpu)
        sim.gear1.run_vcpu(pcpu, cur.ctx, cause)

    def on_phys_irq(self, pcpu: int, line: int) -> str:
        """Interrupt taken while the primary VM owns ``pcpu``: no trap."""
        sim = self.sim
        sim.engine.emit(GEAR2, "irq_direct", ("line", line, "pcpu", pcpu))
        self.handle_line(pcpu, line, "irq")
        if sim.execs[pcpu].mode == "gear2_idle":
            self.reschedule(pcpu)
        return "direct_gear2"

    def handle_line(self, pcpu: int, line: int, cause: str, source: Optional[tuple[int, int]] = None) -> None:
        sim = self.sim
        g1 = sim.gear1
        if line == PPI_EL1_PHYS_TIMER:
            self._quantum_expired(pcpu)
        elif line == SGI_GEAR2_KICK:
            self.drain_mailbox(pcpu)
        elif line == PPI_EL2_PHYS_TIMER:
            # latched while a path was in flight; it belongs to Gear1
            g1.el2_timer_trap(pcpu)
        elif line == PPI_VIRT_TIMER:
            if source is not None:
                g1.inject_virq(pcpu, g1.contexts[source], PPI_VIRT_TIMER, cause=cause, actor=GEAR2)
        elif line >= SPI_BASE:
            route = sim.machine.gicd.route.get(line)
            if route is None or route[0] == g1.primary_id:
                sim.engine.emit(GEAR2, "irq_local", ("line", line))
                return
            g1.inject_virq(pcpu, g1.contexts[route], line, cause=cause, actor=GEAR2)
        else:
            sim.engine.emit(GEAR2, "irq_ignored", ("line", line, "pcpu", pcpu))

    def _quantum_expired(self, pcpu: int) -> None:
        cur = self.current.get(pcpu)
        if cur is None or not self.policies[pcpu].has_ready():
            return
        self.sim.engine.emit(GEAR2, "quantum_expire", ("vm", cur.vm, "vcpu", cur.vcpu, "pcpu", pcpu))
        cur.state = ThreadState.READY
        self.current[pcpu] = None
        self.policies[pcpu].on_ready(cur)

    # mailbox from Gear1 / other pcpus

    def post(self, pcpu: int, msg: tuple) -> None:
        self.mailbox.setdefault(pcpu, deque()).append(msg)

    def drain_mailbox(self, pcpu: int) -> None:
        box = self.mailbox.get(pcpu)
        g1 = self.sim.gear1
        while box:
            msg = box.popleft()
            if msg[0] == "wake":
                self.wake(pcpu, g1.contexts[(msg[1], msg[2])])
            elif msg[0] == "ivc":
                ring = g1.ivc_rings[g1.primary_id]
                mine = [m for m in ring if m.dst_vcpu == pcpu]
                for m in mine:
                    ring.remove(m)
                    self.io_ack(pcpu, m.word)
            elif msg[0] == "retry":
                self._submit(pcpu, self.pending_io[msg[1]])

    # VM exits routed by Gear1

    def on_vm_exit(self, pcpu: int, msg: VmExitMessage) -> None:
        sim = self.sim
        sim.execs[pcpu].cont = None
        if not self.alive:
            sim.settle(pcpu, "gear2_idle")
            return
        t = self.threads[msg.source]
        r = msg.reason
        sim.engine.emit(GEAR2, "vm_exit", ("vm", t.vm, "vcpu", t.vcpu, "reason", r.tag, "pcpu", pcpu))
        guest = sim.guests[msg.source]
        if isinstance(r, PhysIrq):
            self.handle_line(pcpu, r.line, msg.cause, source=msg.source)
            self.reschedule(pcpu, cause=msg.cause)
            return
        if isinstance(r, (MmioRead, MmioWrite)):
            self._mmio(pcpu, t, r)
        elif isinstance(r, Wfi):
            if not t.ctx.pending_virqs.has_pending():
                self._block(t, "wfi")
        elif isinstance(r, Yield):
            if r.ended:
                self._block(t, "ended")
            else:
                t.state = ThreadState.READY
                self.current[pcpu] = None
                self.policies[pcpu].on_ready(t)
        elif isinstance(r, Stage2Perm):
            sim.engine.emit(GEAR2, "abort_injected", ("vm", t.vm, "vcpu", t.vcpu, "addr", r.addr))
            guest.advance()
        elif isinstance(r, (Hypercall, GicdAccess)):
            sim.engine.emit(GEAR2, "unexpected_exit", ("reason", r.tag))
        self.reschedule(pcpu, cause=msg.cause)

    def _mmio(self, pcpu: int, t: Thread, r) -> None:
        sim = self.sim
        write = isinstance(r, MmioWrite)
        blocking = r.blocking if write else True
        dev = sim.devmodel.device_for(r.addr)
        self._tag += 1
        req = IoRequest(self._tag, (t.vm, t.vcpu), pcpu, dev.id if dev else -1, write, r.addr,
                        r.size, r.value if write else 0, blocking, sim.engine.now,
                        generation=sim.guests[(t.vm, t.vcpu)].generation)
        if blocking:
            self.io.issued_blocking += 1
        else:
            self.io.issued_nonblocking += 1
        sim.engine.emit(GEAR2, "mmio_queue", ("tag", req.tag, "vm", t.vm, "vcpu", t.vcpu,
                                              "addr", r.addr, "blocking", int(blocking)))
        self.pending_io[req.tag] = req
        if blocking:
            self._block(t, "mmio")
        if dev is None:
            # nothing emulates this hole: complete with an error value
            req.error = True
            req.result = -1
            self.io.errors += 1
            self._complete(pcpu, req)
            return
        self._submit(pcpu, req)

    def _submit(self, pcpu: int, req: IoRequest) -> None:
        sim = self.sim
        t = self.threads[req.source]
        try:
            sim.devmodel.submit(req)
        except DvmRingFull:
            self.io.ring_full += 1
            sim.engine.emit(GEAR2, "ring_full", ("tag", req.tag))
            if t.state is not ThreadState.BLOCKED:
                self._block(t, "ring")
            at = sim.offset(pcpu) + RING_RETRY_NS
            sim.engine.call_at(at, lambda ev: (self.post(pcpu, ("retry", req.tag)),
                                               sim.machine.raise_irq(SGI_GEAR2_KICK, pcpu)))
            return
        if not req.blocking:
            if t.block_reason == "ring":
                self.wake(pcpu, t.ctx, "ring")
            sim.guests[req.source].advance()
        dvm = sim.devmodel.dvm_ctx()
        from twogear.devmodel import GDM_NOTIFY_LINE
        sim.gear1.inject_virq(pcpu, dvm, GDM_NOTIFY_LINE, cause="mmio", actor=GEAR2)

    def io_ack(self, pcpu: int, tag: int) -> None:
        req = self.pending_io.get(tag)
        if req is None:
            raise BadRequest(f"ack for unknown request {tag}")
        self._complete(pcpu, req)

    def _complete(self, pcpu: int, req: IoRequest) -> None:
        sim = self.sim
        del self.pending_io[req.tag]
        self.io.acks += 1
        sim.engine.emit(GEAR2, "io_ack", ("tag", req.tag, "vm", req.source[0], "vcpu", req.source[1],
                                          "latency", sim.offset(pcpu) - req.issued_at,
                                          "error", int(req.error)))
        ctx = sim.gear1.contexts[req.source]
        if req.generation != sim.guests[req.source].generation:
            # issued before the source VM restarted: nothing left to resume
            self.io.stale += 1
            sim.engine.emit(GEAR2, "io_stale", ("tag", req.tag))
            return
        if req.blocking:
            if not req.write:
                ctx.general_regs[0] = req.result & ((1 << 64) - 1)
            sim.guests[req.source].advance()
            self.io.ip_advances += 1
            self.wake(pcpu, ctx, "mmio")
        if req.device >= 0 and not req.error:
            dev = sim.machine.devices[req.device]
            self.io.completion_virqs += 1
            sim.gear1.inject_virq(pcpu, ctx, dev.irq_line, cause="virtio", actor=GEAR2)

    # supervision hooks

    def stall(self) -> None:
        self.alive = False
        self.sim.engine.emit(GEAR2, "stalled", ())

    def restart(self) -> None:
        self.alive = True
        self.sim.engine.emit(GEAR2, "restart", ())
        for p in list(self.policies):
            if self.sim.execs[p].mode == "gear2_idle":
                self.sim.engine.call_at(self.sim.engine.now, lambda ev, p=p: self.reschedule(p))
