"""Wires machine, Gear1, Gear2, the device model and guests into one run.

Each pcpu has a small executor.  Hypervisor paths run atomically when their
event is dispatched: every charge is recorded at the dispatch instant and
accumulated in ``delay``; the next step of the path is scheduled at
``now + delay``.  Interrupts that arrive while a path is in flight are
latched and taken when the pcpu next returns to a guest or to Gear2.  Guest
computation is interruptible: the remaining time is saved and resumed.

Executor modes: ``off``, ``hyp`` (a charged path is in flight), ``gear2_idle``,
``guest`` (computing) and ``guest_wfi`` (an RTVM waiting without a trap).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from twogear.costs import CostModel
from twogear.devmodel import (GDM_NOTIFY_LINE, IVC_NOTIFY_LINE, BackingStore, Gdm)
from twogear.errors import BadRequest, SimError, UnknownHypercall
from twogear.gear1 import (BUSY, NOT_SUPPORTED, SGI_GEAR1_RELOAD, SGI_GEAR2_KICK, FaultKind, Gear1,
                           GicdAccess, HypercallId, MmioRead, MmioWrite, PhysIrq, RtMode, Runstate,
                           Stage2Fault, Stage2Perm, VmKind)
from twogear.gear1 import Wfi as WfiExit
from twogear.gear1 import Yield as YieldExit
from twogear.gear2 import Gear2, ThreadState
from twogear.guests import (Ack, ArmTimer, Backend, Compute, GicCpuTrap, GuestVcpu, Hypercall,
                            KickWatchdog, LoopTo, MemTouch, Mmio, Sample, Wfi)
from twogear.machine import (GICC_BASE, GICC_EOIR, GICC_IAR, GICC_SIZE, GICD_BASE, GICD_SIZE,
                             PPI_EL2_PHYS_TIMER, PPI_VIRT_TIMER, TIMER_LINES, AccessOp, LlcModel,
                             Machine, Pcpu, Power)
from twogear.simcore import GEAR1, MACHINE, Engine, EventKind, vm_actor
from twogear.supervision import Action, Layer, SupervisionEvent, Supervisor

NO_PROGRESS_LIMIT = 100_000
HANG_SLICE_NS = 1_000_000


@dataclass
class PcpuExec:
    id: int
    mode: str = "off"
    cont: Optional[int] = None
    delay: int = 0
    busy_until: int = 0
    latched: deque = field(default_factory=deque)
    guest: Optional[GuestVcpu] = None


class Simulation:
    """One independent simulation instance built from a :class:`Scenario`."""

    def __init__(self, scenario) -> None:
        self.scenario = scenario
        self.engine = Engine(scenario.seed)
        self.costs: CostModel = scenario.costs
        pcpus = [Pcpu(i, c) for i, c in enumerate(scenario.clusters)]
        self.machine = Machine(self.engine, pcpus, LlcModel(scenario.llc), scenario.devices,
                               nr_lr=scenario.nr_lr)
        self.execs = [PcpuExec(i) for i in range(len(pcpus))]
        self.gear1 = Gear1(self)
        self.gear2 = Gear2(self, scenario.quantum, scenario.policy)
        self.devmodel = Gdm(self, BackingStore(scenario.block_size, scenario.image_path,
                                               scenario.console_path),
                            scenario.kernel_module, scenario.ring_depth)
        self.guests: dict[tuple[int, int], GuestVcpu] = {}
        self.machine.translate = self.gear1.translate
        self.machine.irq_sink = self.on_phys_irq
        self.machine.timers.on_fire = self._timer_fired
        self.supervisor = Supervisor(self.engine, scenario.supervision,
                                     alive={"gear2": lambda: self.gear2.alive},
                                     on_event=self._on_supervision)
        self._init_partitions()

    # construction

    def _init_partitions(self) -> None:
        sc = self.scenario
        g1 = self.gear1
        manifests = [spec.manifest for spec in sc.vms]
        g1.init(manifests, sc.reserved)
        gicd = self.machine.gicd
        for m in manifests:
            for dev_id in m.passthrough:
                dev = self.machine.devices[dev_id]
                gicd.configure(dev.irq_line, m.vm_id, 0, m.affinity[0])
            for dev_id in m.virtio:
                if dev_id not in self.devmodel.devices:
                    self.devmodel.add_device(self.machine.devices[dev_id])
            if m.kind is VmKind.DVM and self.devmodel.dvm is None:
                self.devmodel.dvm = (m.vm_id, 0)
        for spec in sc.vms:
            m = spec.manifest
            if m.kind is VmKind.PRIMARY:
                continue
            for v in range(m.vcpus):
                prog = spec.programs[v] if v < len(spec.programs) else spec.programs[-1]
                rt = spec.rt if v == 0 else None
                self.guests[(m.vm_id, v)] = GuestVcpu(g1.contexts[(m.vm_id, v)], prog, sc.seed, rt)
        self._register_watchdogs()
        self.engine.call_at(0, lambda ev: self._boot())
        for fault in sc.faults:
            self.engine.call_at(fault["at"], lambda ev, f=fault: self._inject_fault(f))

    def _register_watchdogs(self) -> None:
        sc = self.scenario
        if not sc.supervision_enabled:
            return
        sup = self.supervisor
        for spec in sc.vms:
            m = spec.manifest
            if m.kind in (VmKind.SECONDARY, VmKind.DVM) and m.watchdog_period:
                sup.register(Layer.L2, f"vm{m.vm_id}", m.watchdog_period)
                if sc.l1_watchdogs:
                    sup.register(Layer.L1, f"vm{m.vm_id}", m.watchdog_period)
        sup.register(Layer.L3, "gear2")
        sup.register(Layer.L4, "soc")
        periods = sc.supervision.periods
        self._hk_period = min(periods[Layer.L3], periods[Layer.L4]) // 2
        self.engine.call_at(self._hk_period, self._housekeeping)
        sup.start()

    def _housekeeping(self, ev) -> None:
        # Gear2's own liveness heartbeat towards Gear1 and the external MCU
        self.engine.call_at(self.engine.now + self._hk_period, self._housekeeping)
        if self.gear2.alive:
            self.supervisor.kick(Layer.L3, "gear2")
            self.supervisor.kick(Layer.L4, "soc")

    def _boot(self) -> None:
        g1 = self.gear1
        p0 = self.machine.pcpus[0]
        p0.power = Power.ON
        p0.current_world = g1.primary_ctx(0).world
        g1.primary_ctx(0).runstate = Runstate.RUNNING
        self.execs[0].mode = "hyp"
        self.engine.emit(GEAR1, "enter_primary", ("pcpu", 0))
        for m in g1.manifests.values():
            if m.kind is VmKind.RTVM:
                for v, p in enumerate(m.affinity):
                    self._start_rtvm(p, g1.contexts[(m.vm_id, v)])
        self.gear2.boot(0)

    def _start_rtvm(self, p: int, ctx) -> None:
        pc = self.machine.pcpus[p]
        pc.power = Power.ON
        pc.current_world = "gear1"
        self.execs[p].mode = "hyp"
        self.engine.emit(GEAR1, "rtvm_start", ("vm", ctx.vm, "vcpu", ctx.vcpu, "pcpu", p))
        self.gear1.world_switch(p, None, ctx, "boot")
        self.after(p, self.guest_resume, p)

    def cpu_entry(self, p: int, entry=None) -> None:
        g1 = self.gear1
        self.machine.pcpus[p].current_world = g1.primary_ctx(p).world
        g1.primary_ctx(p).runstate = Runstate.RUNNING
        ex = self.execs[p]
        ex.mode = "hyp"
        self.engine.emit(GEAR1, "cpu_on", ("pcpu", p, "entry", entry or "gear2_idle"))
        self.gear2.cpu_entry(p)

    # executor primitives

    def costs_for(self, vm: int) -> CostModel:
        m = self.gear1.manifests.get(vm)
        if m is not None and m.kind is VmKind.RTVM and m.rt_mode is RtMode.KVM_LIKE:
            return self.scenario.kvm_costs
        return self.costs

    def charge(self, p: int, actor: str, action: str, cost: int, detail: tuple = ()) -> None:
        self.engine.emit(actor, action, detail, cost)
        self.execs[p].delay += cost

    def delay(self, p: int) -> int:
        return self.execs[p].delay

    def offset(self, p: int) -> int:
        return self.engine.now + self.execs[p].delay

    def after(self, p: int, fn: Callable, *args) -> None:
        ex = self.execs[p]
        at = self.engine.now + ex.delay
        ex.delay = 0
        ex.mode = "hyp"
        ex.busy_until = at
        ex.cont = self.engine.call_at(at, lambda ev: fn(*args))

    def settle(self, p: int, mode: str) -> None:
        """End a hypervisor path and park the pcpu in ``mode``."""
        ex = self.execs[p]
        if ex.delay:
            self.after(p, self._enter_mode, p, mode)
        else:
            self._enter_mode(p, mode)

    def _enter_mode(self, p: int, mode: str) -> None:
        ex = self.execs[p]
        ex.cont = None
        ex.mode = mode
        if mode == "gear2_idle" and (ex.latched or self.gear2.mailbox.get(p)):
            self.gear2.reschedule(p)

    def send_sgi(self, from_p: int, to_p: int, sgi: int) -> None:
        self.engine.call_at(self.offset(from_p), lambda ev: self.machine.raise_irq(sgi, to_p),
                            EventKind.IRQ_RAISED, {"line": sgi, "pcpu": to_p})

    def _timer_fired(self, pcpu: int, kind: str) -> None:
        self.machine.raise_irq(TIMER_LINES[kind], pcpu)

    def host_noise(self, vm: int) -> int:
        g = self.guests.get((vm, 0))
        if g is None or g.rt is None:
            return 0
        return g.rt.profile.host_noise(g.rng_host)

    def watchdog_kick(self, ctx, layer: int) -> bool:
        sup = self.supervisor
        if ctx.vm == self.gear1.primary_id:
            subject, lay = "gear2", Layer.L3
        else:
            subject, lay = f"vm{ctx.vm}", {1: Layer.L1, 2: Layer.L2}.get(layer)
        if lay is None or not sup.has(lay, subject):
            return False
        sup.kick(lay, subject)
        return True

    # interrupts

    def on_phys_irq(self, p: int, line: int) -> str:
        ex = self.execs[p]
        if ex.mode == "off":
            self.engine.emit(MACHINE, "irq_dropped", ("line", line, "pcpu", p))
            return "dropped"
        if ex.mode == "hyp":
            ex.latched.append(line)
            return "latched"
        return self._take_irq(p, line)

    def _take_irq(self, p: int, line: int, resume: bool = True) -> str:
        g1 = self.gear1
        world = self.machine.pcpus[p].current_world
        prim = g1._primary_by_pcpu.get(p)
        if prim is not None and world == prim.world:
            if line == PPI_EL2_PHYS_TIMER:
                g1.el2_timer_trap(p)
                self.gear2.reschedule(p)
                return "trap_gear1"
            return self.gear2.on_phys_irq(p, line)
        g = self.guests[(world.vm, world.vcpu)]
        m = g1.manifests[world.vm]
        direct = (m.kind is VmKind.RTVM and m.rt_mode in (RtMode.PASSTHROUGH, RtMode.NATIVE)
                  and line != PPI_EL2_PHYS_TIMER)
        self._suspend(p)
        if direct:
            if line not in (SGI_GEAR1_RELOAD, SGI_GEAR2_KICK):
                g.ctx.pending_virqs.inject(line)
                self.engine.emit(vm_actor(world.vm, world.vcpu), "irq_direct", ("line", line, "pcpu", p))
            if resume:
                self.guest_resume(p)
            else:
                self.execs[p].mode = "guest"
            return "direct_vm"
        g1.trap(p, g.ctx, PhysIrq(line))
        return "trap_gear1"

    def _suspend(self, p: int) -> None:
        ex = self.execs[p]
        if ex.cont is not None:
            self.engine.cancel(ex.cont)
            ex.cont = None
        g = ex.guest
        if ex.mode == "guest" and g is not None and g.slot is not None:
            if g.discard_suspend:
                g.discard_suspend = False
            elif g.slot != "hang":
                g.rem[g.slot] = max(0, g.compute_end - self.engine.now)
            g.slot = None
        ex.mode = "hyp"

    # guest execution

    def guest_resume(self, p: int) -> None:
        ex = self.execs[p]
        ex.cont = None
        world = self.machine.pcpus[p].current_world
        g = self.guests[(world.vm, world.vcpu)]
        ex.guest = g
        ex.mode = "guest"
        while ex.latched:
            if self._take_irq(p, ex.latched.popleft(), resume=False) != "direct_vm":
                return
        if g.discard_suspend:
            g.discard_suspend = False
        self._deliver(p, g)
        self._step(p, g)

    def _gicc_emulated(self, vm: int) -> bool:
        m = self.gear1.manifests[vm]
        return m.kind is VmKind.RTVM and m.rt_mode is RtMode.VGIC_EMUL

    def _deliver(self, p: int, g: GuestVcpu) -> None:
        ctx = g.ctx
        vgic = ctx.pending_virqs
        if ctx.irq_mask or not vgic.has_pending():
            return
        in_wfi = isinstance(g.current()[1], Wfi)
        actor = vm_actor(ctx.vm, ctx.vcpu)
        emulated = self._gicc_emulated(ctx.vm)
        while vgic.has_pending():
            line = vgic.acknowledge()
            vgic.eoi()
            g.irqs[line] = g.irqs.get(line, 0) + 1
            self.engine.emit(actor, "virq_handled", ("line", line, "pcpu", p))
            if emulated:
                g.actions.append(GicCpuTrap(GICC_IAR))
                g.actions.append(GicCpuTrap(GICC_EOIR))
            self._handler(p, g, line)
        if in_wfi:
            g.woke = True

    def _handler(self, p: int, g: GuestVcpu, line: int) -> None:
        if line == PPI_VIRT_TIMER:
            expected = g.deadline
            if g.period:
                g.deadline = expected + g.period
                self.machine.timers.program(p, "cntv", g.deadline, True)
            else:
                g.deadline = None
            if g.rt is not None and expected is not None:
                prof = g.rt.profile
                wake = prof.wake_cost(g.rng_wake)
                extra = prof.contention(g.rng_contention)
                if g.rt.contended:
                    wake += extra
                g.actions.append(Compute(wake))
                g.actions.append(Sample(expected))
        elif line == GDM_NOTIFY_LINE:
            hop = 0 if self.devmodel.kernel_module else self.costs.gdm_user_hop_ns
            for dev_id, desc in self.devmodel.pending():
                if hop:
                    g.actions.append(Compute(hop))
                g.actions.append(Backend(dev_id, desc))
                g.actions.append(Ack(dev_id, desc))
        elif line == IVC_NOTIFY_LINE:
            ring = self.gear1.ivc_rings[g.ctx.vm]
            while ring:
                msg = ring.popleft()
                self.engine.emit(vm_actor(g.ctx.vm, g.ctx.vcpu), "ivc_recv", ("src", msg.src_vm, "word", msg.word))

    def _trap(self, p: int, g: GuestVcpu, reason) -> None:
        self.execs[p].mode = "hyp"
        self.gear1.trap(p, g.ctx, reason)

    def _step(self, p: int, g: GuestVcpu) -> None:
        ex = self.execs[p]
        for _ in range(NO_PROGRESS_LIMIT):
            if g.hung:
                self._start_timed(p, g, "hang", HANG_SLICE_NS)
                return
            slot, op = g.current()
            if slot is None:
                if not g.ended:
                    g.ended = True
                    self.engine.emit(vm_actor(g.ctx.vm, g.ctx.vcpu), "program_end", ())
                if self.gear1.kind(g.ctx.vm) is VmKind.RTVM:
                    ex.mode = "guest_wfi"
                    return
                self._trap(p, g, YieldExit(ended=True))
                return
            rem = g.rem[slot]
            if rem is None:
                rem = self._exec(p, g, slot, op)
                if rem is None:
                    return
                if rem < 0:
                    continue
                if rem == 0:
                    g.advance(slot)
                    continue
            self._start_timed(p, g, slot, rem)
            return
        raise SimError(f"vm{g.ctx.vm}.{g.ctx.vcpu} makes no progress")

    def _start_timed(self, p: int, g: GuestVcpu, slot: str, ns: int) -> None:
        ex = self.execs[p]
        g.rem[slot] = ns if slot != "hang" else None
        g.slot = slot
        g.compute_end = self.engine.now + ns
        ex.mode = "guest"
        ex.cont = self.engine.call_at(g.compute_end, lambda ev: self._compute_done(p), EventKind.GUEST_STEP)

    def _compute_done(self, p: int) -> None:
        ex = self.execs[p]
        ex.cont = None
        g = ex.guest
        slot, g.slot = g.slot, None
        if slot != "hang":
            g.advance(slot)
        self._step(p, g)

    def _exec(self, p: int, g: GuestVcpu, slot: str, op) -> Optional[int]:
        """Run one op.  Returns ns to spend, -1 when already advanced, None when control left."""
        ctx = g.ctx
        g1 = self.gear1
        actor = vm_actor(ctx.vm, ctx.vcpu)
        if isinstance(op, Compute):
            return op.ns
        if isinstance(op, LoopTo):
            g.loop(op)
            return -1
        if isinstance(op, ArmTimer):
            g.period = op.delta if op.periodic else None
            g.deadline = self.engine.now + op.delta
            self.machine.timers.program(p, "cntv", g.deadline, True)
            g.advance(slot)
            return -1
        if isinstance(op, Wfi):
            if ctx.pending_virqs.has_pending():
                self._deliver(p, g)
                return -1
            if g.woke:
                g.woke = False
                g.advance(slot)
                return -1
            if g1.kind(ctx.vm) is VmKind.RTVM:
                self.execs[p].mode = "guest_wfi"
                return None
            self._trap(p, g, WfiExit())
            return None
        if isinstance(op, Sample):
            lat = self.engine.now - op.expected
            g.samples.append(lat)
            if g.rt is not None:
                g.rt.records.append(lat)
            self.engine.emit(actor, "rt_sample", ("expected", op.expected, "latency", lat))
            g.advance(slot)
            return -1
        if isinstance(op, Mmio):
            return self._mmio(p, g, slot, op)
        if isinstance(op, Hypercall):
            g.advance(slot)
            self._hypercall(p, g, op.id, op.args)
            return None
        if isinstance(op, KickWatchdog):
            g.advance(slot)
            subject = f"vm{ctx.vm}"
            if self.supervisor.has(Layer.L1, subject):
                self.supervisor.kick(Layer.L1, subject)
            self._hypercall(p, g, HypercallId.WATCHDOG_KICK, (2,))
            return None
        if isinstance(op, MemTouch):
            cost = 0
            for i in range(op.count):
                addr = op.ipa + i * op.stride
                try:
                    _, c = self.machine.mem_access(ctx.vm, addr, AccessOp.READ)
                except Stage2Fault as f:
                    self._fault_trap(p, g, slot, f, addr, False, 0, True, 8)
                    return None
                cost += c
            return cost
        if isinstance(op, GicCpuTrap):
            g.advance(slot)
            self._trap(p, g, GicdAccess(GICD_SIZE + op.offset, AccessOp.READ))
            return None
        if isinstance(op, Backend):
            req = self.gear2.pending_io.get(op.desc.tag)
            try:
                value = self.devmodel.handle_io_event(op.device, op.desc)
                if req is not None:
                    req.result = value
            except BadRequest:
                self.gear2.io.errors += 1
                if req is not None:
                    req.error = True
                    req.result = -1
            g.advance(slot)
            return -1
        if isinstance(op, Ack):
            g.advance(slot)
            desc = op.desc
            rc = self._hypercall(p, g, HypercallId.IVC_SEND, (g1.primary_id, desc.pcpu, desc.tag))
            if rc == BUSY:
                g.actions.appendleft(op)
                g.actions.appendleft(Compute(1000))
            else:
                self.devmodel.ack(op.device)
            return None
        raise SimError(f"unknown op {op!r}")

    def _hypercall(self, p: int, g: GuestVcpu, hid: int, args: tuple) -> int:
        ctx = g.ctx
        self.execs[p].mode = "hyp"
        try:
            rc = self.gear1.hypercall(p, ctx, hid, args)
        except UnknownHypercall:
            self.charge(p, GEAR1, "hypercall", self.costs_for(ctx.vm).hypercall_ns,
                        ("vm", ctx.vm, "vcpu", ctx.vcpu, "id", hid, "pcpu", p))
            rc = NOT_SUPPORTED
        ctx.general_regs[0] = rc & ((1 << 64) - 1)
        self.after(p, self.guest_resume, p)
        return rc

    def _mmio(self, p: int, g: GuestVcpu, slot: str, op: Mmio) -> Optional[int]:
        ctx = g.ctx
        self.engine.emit(vm_actor(ctx.vm, ctx.vcpu), "mmio_issue",
                         ("addr", op.addr, "op", "W" if op.write else "R"))
        m = self.gear1.manifests[ctx.vm]
        in_gic = GICD_BASE <= op.addr < GICC_BASE + GICC_SIZE
        if in_gic and m.kind is VmKind.RTVM and m.rt_mode is RtMode.NATIVE:
            return 0
        acc = AccessOp.WRITE if op.write else AccessOp.READ
        try:
            value, cost = self.machine.mem_access(ctx.vm, op.addr, acc, op.size, op.value)
        except Stage2Fault as f:
            self._fault_trap(p, g, slot, f, op.addr, op.write, op.value, op.blocking, op.size)
            return None
        if not op.write:
            ctx.general_regs[0] = value
        return cost

    def _fault_trap(self, p: int, g: GuestVcpu, slot: str, f: Stage2Fault, addr: int,
                    write: bool, value: int, blocking: bool, size: int) -> None:
        if f.kind is FaultKind.MMIO:
            if GICD_BASE <= addr < GICC_BASE + GICC_SIZE:
                g.advance(slot)
                acc = AccessOp.WRITE if write else AccessOp.READ
                self._trap(p, g, GicdAccess(addr - GICD_BASE, acc, value))
                return
            if write:
                self._trap(p, g, MmioWrite(addr, size, value, blocking))
            else:
                self._trap(p, g, MmioRead(addr, size))
            return
        self._trap(p, g, Stage2Perm(addr))

    # faults and supervision actions

    def _inject_fault(self, fault: dict) -> None:
        target = fault["target"]
        self.engine.emit(MACHINE, "fault_injected", ("target", target, "vm", fault.get("vm", -1)))
        if target == "gear2":
            self.gear2.stall()
        elif target == "vm":
            for (vm, v), g in self.guests.items():
                if vm == fault["vm"]:
                    g.hung = True
        else:
            raise SimError(f"unknown fault target {target!r}")

    def _on_supervision(self, ev: SupervisionEvent) -> None:
        if ev.action is Action.RESTART_VM and ev.subject.startswith("vm"):
            self.restart_vm(int(ev.subject[2:]))
        elif ev.action is Action.RESTART_GEAR2:
            self.gear2.restart()
            if self.supervisor.has(Layer.L3, "gear2"):
                self.supervisor.kick(Layer.L3, "gear2")

    def restart_vm(self, vm: int) -> None:
        g1 = self.gear1
        g1.restart_vm(vm)
        for (gvm, v), g in self.guests.items():
            if gvm != vm:
                continue
            g.reset()
            home = g1.manifests[vm].affinity[v]
            loaded = self.machine.pcpus[home].current_world == g.ctx.world
            if loaded:
                self.machine.timers.disarm(home, "cntv")
                self.engine.call_at(self.engine.now, lambda ev, h=home: self.machine.raise_irq(SGI_GEAR1_RELOAD, h))
            t = self.gear2.threads.get((gvm, v))
            if t is not None and t.state is ThreadState.BLOCKED:
                self.gear2._ready(t)
                self.gear2.post(home, ("noop",))
                self.engine.call_at(self.engine.now, lambda ev, h=home: self.machine.raise_irq(SGI_GEAR2_KICK, h))
        if self.supervisor.has(Layer.L2, f"vm{vm}"):
            self.supervisor.kick(Layer.L2, f"vm{vm}")

    # running

    def run(self, duration: Optional[int] = None):
        end = self.scenario.duration if duration is None else duration
        self.engine.run_until(end)
        return self.engine.trace
