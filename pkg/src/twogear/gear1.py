"""Partitioning-mechanism hypervisor.

Gear1 owns everything that must stay fixed after boot: the stage-2 tables
(identity mapped, IPA == PA), page ownership, the world switch, trap entry
and the hypercall ABI.  Policy decisions are delegated to Gear2 by routing an
:class:`ExitReason` to it.

Hypercall ABI (``x0`` = id, results in ``x0``)::

    id          name          args                         result
    0x01        RunVcpu       vm, vcpu                     exit reason tag
    0x02        VirqInject    vm, vcpu, line               0
    0x03        IvcSend       dst_vm, dst_vcpu, word       0 | BUSY
    0xC4000003  PsciCpuOn     pcpu, entry                  0 | ALREADY_ON | INVALID_PARAMS
    0x05        MemShare      target_vm, ipa, pages        0 | DENIED
    0x06        MemReclaim    target_vm, ipa, pages        0 | DENIED
    0x07        WatchdogKick  layer                        0 | INVALID_PARAMS

Result codes: 0 OK, -1 NOT_SUPPORTED, -2 INVALID_PARAMS, -3 DENIED,
-4 BUSY, -5 ALREADY_ON.
"""

from __future__ import annotations

import copy
import functools
import enum
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional, Union

from twogear.errors import (AlreadyOn, InvalidPcpu, ManifestOverlap, ManifestUnaligned,
                            NotLent, NotOwner, RtvmAffinityShared, SimError, UnknownHypercall)
from twogear.machine import (GICC_BASE, GICC_SIZE, GICD_BASE,
                             GICD_ICENABLER, GICD_ISENABLER, GICD_ITARGETSR, GICD_SGIR,
                             GICD_SIZE, PAGE_SIZE, PPI_EL2_PHYS_TIMER, PPI_VIRT_TIMER,
                             GEAR1_WORLD, AccessOp, Power, VirtualCpuInterface, VmWorld)
from twogear.simcore import GEAR1, GEAR2

if TYPE_CHECKING:
    from twogear.system import Simulation

# software-generated interrupt ids reserved by the hypervisor
SGI_GEAR2_KICK = 1
SGI_GEAR1_RELOAD = 2

OK = 0
NOT_SUPPORTED = -1
INVALID_PARAMS = -2
DENIED = -3
BUSY = -4
ALREADY_ON_CODE = -5

IVC_RING_DEPTH = 16


class VmKind(enum.Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"
    DVM = "dvm"
    RTVM = "rtvm"


class RtMode(enum.Enum):
    """How an RTVM reaches its interrupt controller and timer."""

    PASSTHROUGH = "passthrough"
    VGIC_EMUL = "vgic_emul"
    KVM_LIKE = "kvm_like"
    NATIVE = "native"


@dataclass
class VmManifest:
    vm_id: int
    kind: VmKind
    vcpus: int
    affinity: list[int]
    mem_regions: list[tuple[int, int]] = field(default_factory=list)
    mmio_holes: list[tuple[int, int]] = field(default_factory=list)
    passthrough: list[int] = field(default_factory=list)
    virtio: list[int] = field(default_factory=list)
    color_mask: Optional[int] = None
    watchdog_period: int = 0
    rt_mode: RtMode = RtMode.PASSTHROUGH

    def __post_init__(self) -> None:
        if len(self.affinity) != self.vcpus:
            raise SimError(f"vm {self.vm_id}: affinity needs one pcpu per vcpu")

    def pages(self) -> set[int]:
        out: set[int] = set()
        for start, length in self.mem_regions:
            out.update(range(start // PAGE_SIZE, (start + length) // PAGE_SIZE))
        return out


class Ownership(enum.Enum):
    OWNED = "owned"
    LENT = "lent"
    SHARED_FROM = "shared_from"


@dataclass(slots=True)
class Stage2Entry:
    pa_page: int
    writable: bool
    ownership: Ownership
    peer: Optional[int] = None


class FaultKind(enum.Enum):
    MMIO = "mmio"
    PERM = "perm"


class Stage2Fault(SimError):
    def __init__(self, kind: FaultKind, vm: int, ipa: int) -> None:
        super().__init__(f"stage-2 {kind.value} fault: vm {vm} ipa {ipa:#x}")
        self.kind = kind
        self.vm = vm
        self.ipa = ipa


class Stage2Table:
    """IPA page -> entry map for one VM plus its declared MMIO holes."""

    def __init__(self, vm_id: int) -> None:
        self.vm_id = vm_id
        self.entries: dict[int, Stage2Entry] = {}
        self.holes: list[tuple[int, int]] = []

    def map_page(self, page: int, ownership: Ownership = Ownership.OWNED,
                 peer: Optional[int] = None, writable: bool = True) -> None:
        self.entries[page] = Stage2Entry(page, writable, ownership, peer)

    def in_hole(self, ipa: int) -> bool:
        return any(start <= ipa < start + length for start, length in self.holes)

    def lookup(self, ipa: int) -> Optional[Stage2Entry]:
        return self.entries.get(ipa // PAGE_SIZE)


@dataclass
class BootInfo:
    """Boot-time description handed to a guest in place of a device tree."""

    memory: list[tuple[int, int]]
    pcpus: list[int]
    devices: list[int]
    mmio_holes: list[tuple[int, int]]


class Runstate(enum.Enum):
    READY = "ready"
    RUNNING = "running"
    BLOCKED = "blocked"
    OFF = "off"


NUM_GPRS = 31


@dataclass(eq=False)
class VcpuContext:
    vm: int
    vcpu: int
    general_regs: list[int] = field(default_factory=lambda: [0] * NUM_GPRS)
    el1_timer_comparator: int = 0
    el1_timer_enable: bool = False
    irq_mask: bool = False
    program_point: int = 0
    pending_virqs: VirtualCpuInterface = field(default_factory=VirtualCpuInterface)
    runstate: Runstate = Runstate.OFF
    block_reason: Optional[str] = None

    @functools.cached_property
    def world(self) -> VmWorld:
        return VmWorld(self.vm, self.vcpu)

    def save(self) -> tuple:
        """Snapshot of everything the world switch moves."""
        lrs = tuple(None if lr is None else (lr.line, lr.priority, lr.state)
                    for lr in self.pending_virqs.list_registers)
        return (tuple(self.general_regs), self.el1_timer_comparator, self.el1_timer_enable,
                self.irq_mask, self.program_point, lrs,
                tuple((lr.line, lr.priority, lr.state) for lr in self.pending_virqs.overflow),
                self.runstate, self.block_reason)

    def restore(self, snap: tuple) -> None:
        from twogear.machine import ListRegister
        (regs, self.el1_timer_comparator, self.el1_timer_enable, self.irq_mask,
         self.program_point, lrs, overflow, self.runstate, self.block_reason) = snap
        self.general_regs = list(regs)
        self.pending_virqs.list_registers = [None if x is None else ListRegister(*x) for x in lrs]
        self.pending_virqs.overflow = deque(ListRegister(*x) for x in overflow)


# exit reasons

@dataclass(frozen=True)
class Hypercall:
    id: int
    args: tuple = ()
    tag = "hypercall"


@dataclass(frozen=True)
class MmioRead:
    addr: int
    size: int = 8
    tag = "mmio_read"


@dataclass(frozen=True)
class MmioWrite:
    addr: int
    size: int = 8
    value: int = 0
    blocking: bool = True
    tag = "mmio_write"


@dataclass(frozen=True)
class Wfi:
    tag = "wfi"


@dataclass(frozen=True)
class GicdAccess:
    offset: int
    op: AccessOp
    value: int = 0
    tag = "gicd_access"


@dataclass(frozen=True)
class PhysIrq:
    line: int
    tag = "phys_irq"


@dataclass(frozen=True)
class Stage2Perm:
    addr: int
    tag = "stage2_perm"


@dataclass(frozen=True)
class Yield:
    ended: bool = False
    tag = "yield"


ExitReason = Union[Hypercall, MmioRead, MmioWrite, Wfi, GicdAccess, PhysIrq, Stage2Perm, Yield]


class HypercallId(enum.IntEnum):
    RUN_VCPU = 0x01
    VIRQ_INJECT = 0x02
    IVC_SEND = 0x03
    PSCI_CPU_ON = 0xC4000003
    MEM_SHARE = 0x05
    MEM_RECLAIM = 0x06
    WATCHDOG_KICK = 0x07


@dataclass(frozen=True)
class Handled:
    pass


@dataclass(frozen=True)
class RouteToGear2:
    reason: object


@dataclass
class IvcMessage:
    src_vm: int
    src_vcpu: int
    dst_vcpu: int
    word: int


class Gear1:
    """Gear1 state and flows.  Bound to one :class:`Simulation`."""

    def __init__(self, sim: "Simulation") -> None:
        self.sim = sim
        self.manifests: dict[int, VmManifest] = {}
        self.tables: dict[int, Stage2Table] = {}
        self.contexts: dict[tuple[int, int], VcpuContext] = {}
        self.boot_info: dict[int, BootInfo] = {}
        self.private_pages: set[int] = set()
        self.ivc_rings: dict[int, deque[IvcMessage]] = {}
        self.gicd_virtual: dict[int, dict] = {}
        self.sgi_filtered = 0
        self.illegal_gicd = 0
        self.exits: dict[int, int] = {}
        self.gear2_hops: dict[int, int] = {}
        self.primary_id = 0
        self.el2_deadline: dict[int, Optional[int]] = {}
        self._homed: dict[int, list] = {}

    # initialization

    def init(self, manifests: list[VmManifest], reserved: tuple[int, int] = (0, 0)) -> None:
        """Validate manifests, build identity stage-2 tables and boot info."""
        sim = self.sim
        self._homed = {}
        machine = sim.machine
        res_start, res_len = reserved
        self.private_pages = set(range(res_start // PAGE_SIZE, (res_start + res_len) // PAGE_SIZE))
        owner: dict[int, int] = {}
        rt_pcpus: dict[int, int] = {}
        for m in manifests:
            for start, length in list(m.mem_regions) + list(m.mmio_holes):
                if start % PAGE_SIZE or length % PAGE_SIZE:
                    raise ManifestUnaligned(f"vm {m.vm_id}: region {start:#x}+{length:#x}")
            pages = m.pages()
            clash = pages & self.private_pages
            if clash:
                raise ManifestOverlap(f"vm {m.vm_id} overlaps hypervisor-private memory")
            for p in pages:
                if p in owner:
                    raise ManifestOverlap(f"vm {m.vm_id} and vm {owner[p]} share page {p:#x}")
                owner[p] = m.vm_id
            if m.kind is VmKind.RTVM:
                for pc in m.affinity:
                    rt_pcpus[pc] = m.vm_id
            for pc in m.affinity:
                if not 0 <= pc < len(machine.pcpus):
                    raise InvalidPcpu(f"vm {m.vm_id} affinity pcpu {pc}")
        for m in manifests:
            if m.kind is VmKind.RTVM:
                continue
            for pc in m.affinity:
                if pc in rt_pcpus:
                    raise RtvmAffinityShared(f"vm {m.vm_id} uses pcpu {pc} dedicated to rtvm {rt_pcpus[pc]}")
        primaries = [m for m in manifests if m.kind is VmKind.PRIMARY]
        if len(primaries) != 1:
            raise SimError("exactly one primary VM is required")
        self.primary_id = primaries[0].vm_id
        self._primary_by_pcpu: dict[int, VcpuContext] = {}

        colors = machine.llc.geometry
        for m in manifests:
            self.manifests[m.vm_id] = m
            table = Stage2Table(m.vm_id)
            for start, length in m.mem_regions:
                for page in range(start // PAGE_SIZE, (start + length) // PAGE_SIZE):
                    if m.color_mask is not None and not (m.color_mask >> colors.color(page * PAGE_SIZE)) & 1:
                        continue
                    table.map_page(page)
            for dev_id in m.passthrough:
                dev = machine.devices[dev_id]
                for page in range(dev.mmio_base // PAGE_SIZE,
                                  (dev.mmio_base + dev.mmio_len + PAGE_SIZE - 1) // PAGE_SIZE):
                    table.map_page(page)
            holes = list(m.mmio_holes) + [(GICD_BASE, GICD_SIZE)]
            for dev_id in m.virtio:
                dev = machine.devices[dev_id]
                holes.append((dev.mmio_base, dev.mmio_len))
            if m.kind is VmKind.RTVM and m.rt_mode is RtMode.VGIC_EMUL:
                holes.append((GICC_BASE, GICC_SIZE))
            table.holes = holes
            self.tables[m.vm_id] = table
            self.boot_info[m.vm_id] = BootInfo(
                memory=list(m.mem_regions), pcpus=sorted(set(m.affinity)),
                devices=sorted(m.passthrough + m.virtio), mmio_holes=holes)
            for v in range(m.vcpus):
                ctx = VcpuContext(m.vm_id, v, pending_virqs=VirtualCpuInterface(machine.nr_lr))
                self.contexts[(m.vm_id, v)] = ctx
                if m.kind is VmKind.PRIMARY:
                    self._primary_by_pcpu[m.affinity[v]] = ctx
            self.ivc_rings[m.vm_id] = deque()
            self.gicd_virtual[m.vm_id] = {"enabled": set(), "routes": {}}
            self.exits[m.vm_id] = 0
            self.gear2_hops[m.vm_id] = 0
            if m.kind is VmKind.RTVM:
                machine.gicd.sgi_filter[m.vm_id] = frozenset(m.affinity)
        sim.engine.emit(GEAR1, "init", ("vms", len(manifests), "private_pages", len(self.private_pages)))
        self.check_isolation()

    def kind(self, vm: int) -> VmKind:
        return self.manifests[vm].kind

    def primary_ctx(self, pcpu: int) -> VcpuContext:
        return self._primary_by_pcpu[pcpu]

    # translation and ownership

    def translate(self, vm: int, ipa: int) -> int:
        table = self.tables[vm]
        entry = table.entries.get(ipa // PAGE_SIZE)
        if entry is not None:
            return entry.pa_page * PAGE_SIZE + ipa % PAGE_SIZE
        if table.in_hole(ipa):
            raise Stage2Fault(FaultKind.MMIO, vm, ipa)
        raise Stage2Fault(FaultKind.PERM, vm, ipa)

    def _pages(self, ipa: int, pages: int) -> range:
        if ipa % PAGE_SIZE:
            raise ManifestUnaligned(f"share address {ipa:#x} is not page aligned")
        return range(ipa // PAGE_SIZE, ipa // PAGE_SIZE + pages)

    def mem_share(self, owner: int, ipa: int, pages: int, target: int) -> None:
        if target == owner or target not in self.tables:
            raise NotOwner(f"invalid share target {target}")
        src = self.tables[owner]
        span = self._pages(ipa, pages)
        for page in span:
            entry = src.entries.get(page)
            if entry is None or entry.ownership is not Ownership.OWNED:
                raise NotOwner(f"vm {owner} does not own page {page:#x}")
        dst = self.tables[target]
        for page in span:
            src.entries[page].ownership = Ownership.LENT
            src.entries[page].peer = target
            dst.map_page(page, Ownership.SHARED_FROM, owner)
        self.sim.engine.emit(GEAR1, "mem_share", ("owner", owner, "target", target,
                                                  "ipa", ipa, "pages", pages))

    def mem_reclaim(self, owner: int, ipa: int, pages: int) -> None:
        src = self.tables[owner]
        span = self._pages(ipa, pages)
        for page in span:
            entry = src.entries.get(page)
            if entry is None or entry.ownership is not Ownership.LENT:
                raise NotLent(f"page {page:#x} of vm {owner} is not lent")
        for page in span:
            entry = src.entries[page]
            self.tables[entry.peer].entries.pop(page, None)
            entry.ownership = Ownership.OWNED
            entry.peer = None
        self.sim.engine.emit(GEAR1, "mem_reclaim", ("owner", owner, "ipa", ipa, "pages", pages))

    def check_isolation(self, pages: Optional[Iterable[int]] = None) -> None:
        """Assert identity, single ownership and private-page exclusion.

        ``pages`` restricts the check to those page numbers.
        """
        devices = set()
        for dev in self.sim.machine.devices.values():
            devices.update(range(dev.mmio_base // PAGE_SIZE,
                                 (dev.mmio_base + dev.mmio_len + PAGE_SIZE - 1) // PAGE_SIZE))
        holders: dict[int, list[tuple[int, Stage2Entry]]] = {}
        for vm, table in self.tables.items():
            if pages is None:
                items = table.entries.items()
            else:
                items = [(p, table.entries[p]) for p in pages if p in table.entries]
            for page, entry in items:
                if entry.pa_page != page:
                    raise SimError(f"non-identity mapping in vm {vm}")
                if page in self.private_pages:
                    raise SimError(f"private page {page:#x} mapped in vm {vm}")
                holders.setdefault(page, []).append((vm, entry))
        for page, hs in holders.items():
            if page in devices:
                continue
            owners = [(vm, e) for vm, e in hs if e.ownership is not Ownership.SHARED_FROM]
            borrowers = [(vm, e) for vm, e in hs if e.ownership is Ownership.SHARED_FROM]
            if len(owners) != 1 or len(borrowers) > 1:
                raise SimError(f"page {page:#x} has {len(owners)} owners, {len(borrowers)} borrowers")
            if borrowers:
                ovm, oentry = owners[0]
                bvm, bentry = borrowers[0]
                if oentry.ownership is not Ownership.LENT or oentry.peer != bvm or bentry.peer != ovm:
                    raise SimError(f"page {page:#x} borrowed without a matching lend")

    # world switch

    def world_switch(self, pcpu: int, frm: Optional[VcpuContext], to: VcpuContext,
                     cause: str = "sched") -> None:
        """Save ``frm``, restore ``to`` on ``pcpu``; charges one switch."""
        sim = self.sim
        timers = sim.machine.timers
        live = timers.read(pcpu, "cntv")
        if frm is not None:
            frm.el1_timer_comparator = live.value
            frm.el1_timer_enable = live.enabled
            if frm.runstate is Runstate.RUNNING:
                frm.runstate = Runstate.READY
            latched = sim.execs[pcpu].latched
            if frm.vm != self.primary_id and PPI_VIRT_TIMER in latched:
                # the outgoing vcpu's timer fired while a hypervisor path was in flight
                latched.remove(PPI_VIRT_TIMER)
                frm.pending_virqs.inject(PPI_VIRT_TIMER)
                sim.charge(pcpu, GEAR1, "virq_inject", sim.costs_for(frm.vm).virq_inject_ns,
                           ("vm", frm.vm, "vcpu", frm.vcpu, "line", PPI_VIRT_TIMER, "cause", "timer_save",
                            "pcpu", pcpu))
        timers.disarm(pcpu, "cntv")
        p = sim.machine.pcpus[pcpu]
        p.current_world = to.world
        to.runstate = Runstate.RUNNING
        if to.el1_timer_enable:
            timers.program(pcpu, "cntv", to.el1_timer_comparator, True)
        else:
            live.value = to.el1_timer_comparator
        sim.charge(pcpu, GEAR1, "world_switch", sim.costs.world_switch_ns,
                   ("from", str(frm.world) if frm else "gear1", "to", str(to.world), "cause", cause))
        if frm is not None and frm.vm != self.primary_id and to.vm == self.primary_id:
            self.gear2_hops[frm.vm] += 1
        self.el2_timer_multiplex(pcpu)

    # traps

    def trap(self, pcpu: int, ctx: VcpuContext, reason) -> None:
        """Trap entry from a VM world.  Charges vm_trap, then dispatches."""
        sim = self.sim
        self.exits[ctx.vm] = self.exits.get(ctx.vm, 0) + 1
        detail = ("vm", ctx.vm, "vcpu", ctx.vcpu, "reason", reason.tag, "pcpu", pcpu)
        if isinstance(reason, PhysIrq):
            detail += ("line", reason.line)
        sim.charge(pcpu, GEAR1, "vm_trap", self._trap_cost(ctx.vm), detail)
        self.handle_trap(pcpu, ctx, reason)

    def _trap_cost(self, vm: int) -> int:
        return self.sim.costs_for(vm).vm_trap_ns

    def handle_trap(self, pcpu: int, ctx: VcpuContext, reason) -> Handled | RouteToGear2:
        sim = self.sim
        m = self.manifests[ctx.vm]
        if isinstance(reason, GicdAccess):
            self.emulate_gicd(pcpu, ctx, reason.offset, reason.op, reason.value)
            sim.after(pcpu, sim.guest_resume, pcpu)
            return Handled()
        if isinstance(reason, PhysIrq):
            if reason.line == SGI_GEAR1_RELOAD:
                sim.after(pcpu, sim.guest_resume, pcpu)
                return Handled()
            if reason.line == PPI_EL2_PHYS_TIMER:
                if not self.el2_timer_fire(pcpu):
                    sim.after(pcpu, sim.guest_resume, pcpu)
                    return Handled()
                # a blocked vcpu was woken; Gear2 must requeue it
                reason = PhysIrq(SGI_GEAR2_KICK)
            elif m.kind is VmKind.RTVM:
                self._rtvm_irq(pcpu, ctx, reason.line)
                return Handled()
        if m.kind is VmKind.RTVM:
            # RTVM never reaches Gear2: faults and stray exits are absorbed here
            sim.engine.emit(GEAR1, "rtvm_exit_absorbed", ("vm", ctx.vm, "reason", reason.tag))
            if isinstance(reason, (MmioRead, MmioWrite, Stage2Perm)):
                sim.guests[(ctx.vm, ctx.vcpu)].advance()
            sim.after(pcpu, sim.guest_resume, pcpu)
            return Handled()
        cause = "irq" if isinstance(reason, PhysIrq) else reason.tag
        sim.engine.emit(GEAR1, "route_gear2", ("vm", ctx.vm, "vcpu", ctx.vcpu,
                                               "reason", reason.tag, "pcpu", pcpu))
        self.world_switch(pcpu, ctx, self.primary_ctx(pcpu), cause)
        from twogear.gear2 import VmExitMessage
        sim.after(pcpu, sim.gear2.on_vm_exit, pcpu, VmExitMessage((ctx.vm, ctx.vcpu), reason, cause=cause))
        return RouteToGear2(reason)

    def _rtvm_irq(self, pcpu: int, ctx: VcpuContext, line: int) -> None:
        """Emulated interrupt delivery for an RTVM whose GIC is not passed through."""
        sim = self.sim
        costs = sim.costs_for(ctx.vm)
        m = self.manifests[ctx.vm]
        self.inject_virq(pcpu, ctx, line, cause="rt")
        if m.rt_mode is RtMode.KVM_LIKE:
            noise = sim.host_noise(ctx.vm)
            if noise:
                sim.charge(pcpu, GEAR1, "host_sched", noise, ("vm", ctx.vm))
            sim.charge(pcpu, GEAR1, "world_switch", costs.world_switch_ns,
                       ("from", "host", "to", str(ctx.world), "cause", "rt"))
        sim.after(pcpu, sim.guest_resume, pcpu)

    def inject_virq(self, pcpu: int, target: VcpuContext, line: int, cause: str = "irq",
                    actor: str = GEAR1) -> None:
        """Make ``line`` pending on ``target``; charged on ``pcpu``."""
        sim = self.sim
        target.pending_virqs.inject(line)
        sim.charge(pcpu, actor, "virq_inject", sim.costs_for(target.vm).virq_inject_ns,
                   ("vm", target.vm, "vcpu", target.vcpu, "line", line, "cause", cause, "pcpu", pcpu))
        self._notify_target(pcpu, target)

    def _notify_target(self, pcpu: int, target: VcpuContext) -> None:
        sim = self.sim
        home = self.manifests[target.vm].affinity[target.vcpu]
        here = sim.machine.pcpus[home].current_world
        if target.runstate is Runstate.RUNNING and here == target.world:
            if home != pcpu:
                sim.send_sgi(pcpu, home, SGI_GEAR1_RELOAD)
            return
        if target.runstate is Runstate.BLOCKED and target.block_reason == "wfi" \
                and self.kind(target.vm) is not VmKind.RTVM:
            if home == pcpu and sim.machine.pcpus[pcpu].current_world == self.primary_ctx(pcpu).world:
                sim.gear2.wake(pcpu, target)
            else:
                sim.gear2.post(home, ("wake", target.vm, target.vcpu))
                sim.send_sgi(pcpu, home, SGI_GEAR2_KICK)

    # hypercalls

    def hypercall(self, pcpu: int, caller: VcpuContext, hid: int, args: tuple = ()) -> int:
        """Dispatch a guest hypercall.  Raises UnknownHypercall for bad ids."""
        sim = self.sim
        try:
            name = HypercallId(hid)
        except ValueError:
            sim.engine.emit(GEAR1, "hypercall_rejected", ("vm", caller.vm, "id", hid))
            raise UnknownHypercall(f"unknown hypercall id {hid:#x}") from None
        cost = sim.costs_for(caller.vm).hypercall_ns
        if name is HypercallId.VIRQ_INJECT:
            cost = 0  # charged by inject_virq
        if name is not HypercallId.RUN_VCPU:
            sim.charge(pcpu, GEAR1, "hypercall", cost,
                       ("vm", caller.vm, "vcpu", caller.vcpu, "id", name.name, "pcpu", pcpu))
        if name is HypercallId.VIRQ_INJECT:
            vm, vcpu, line = args
            self.inject_virq(pcpu, self.contexts[(vm, vcpu)], line, cause="hypercall")
            return OK
        if name is HypercallId.IVC_SEND:
            return self.ivc_send(pcpu, caller, *args)
        if name is HypercallId.MEM_SHARE:
            target, ipa, pages = args
            try:
                self.mem_share(caller.vm, ipa, pages, target)
            except (NotOwner, ManifestUnaligned):
                return DENIED
            return OK
        if name is HypercallId.MEM_RECLAIM:
            _target, ipa, pages = args
            try:
                self.mem_reclaim(caller.vm, ipa, pages)
            except (NotLent, ManifestUnaligned):
                return DENIED
            return OK
        if name is HypercallId.WATCHDOG_KICK:
            layer = args[0] if args else 2
            return OK if sim.watchdog_kick(caller, layer) else INVALID_PARAMS
        if name is HypercallId.PSCI_CPU_ON:
            if caller.vm != self.primary_id:
                return DENIED
            try:
                self.psci_cpu_on(pcpu, *args)
            except AlreadyOn:
                return ALREADY_ON_CODE
            except InvalidPcpu:
                return INVALID_PARAMS
            return OK
        if name is HypercallId.RUN_VCPU:
            if caller.vm != self.primary_id:
                return DENIED
            vm, vcpu = args
            self.run_vcpu(pcpu, self.contexts[(vm, vcpu)])
            return OK
        return NOT_SUPPORTED

    def run_vcpu(self, pcpu: int, target: VcpuContext, cause: str = "sched") -> None:
        """RunVcpu from Gear2: switch primary -> target; returns on the next exit."""
        sim = self.sim
        if self.manifests[target.vm].affinity[target.vcpu] != pcpu:
            raise SimError(f"affinity violation: vm{target.vm}.{target.vcpu} on pcpu {pcpu}")
        sim.engine.emit(GEAR2, "hypercall", ("id", "RUN_VCPU", "vm", target.vm,
                                             "vcpu", target.vcpu, "pcpu", pcpu))
        self.world_switch(pcpu, self.primary_ctx(pcpu), target, cause)
        sim.after(pcpu, sim.guest_resume, pcpu)

    def ivc_send(self, pcpu: int, caller: VcpuContext, dst_vm: int, dst_vcpu: int, word: int) -> int:
        ring = self.ivc_rings[dst_vm]
        if len(ring) >= IVC_RING_DEPTH:
            return BUSY
        ring.append(IvcMessage(caller.vm, caller.vcpu, dst_vcpu, word))
        sim = self.sim
        sim.engine.emit(GEAR1, "ivc_send", ("src", caller.vm, "dst", dst_vm, "dst_vcpu", dst_vcpu,
                                            "word", word))
        if dst_vm == self.primary_id:
            sim.gear2.post(dst_vcpu, ("ivc",))
            if dst_vcpu == pcpu and sim.machine.pcpus[pcpu].current_world == self.primary_ctx(pcpu).world:
                sim.gear2.drain_mailbox(pcpu)
            else:
                sim.send_sgi(pcpu, dst_vcpu, SGI_GEAR2_KICK)
        else:
            from twogear.devmodel import IVC_NOTIFY_LINE
            self.inject_virq(pcpu, self.contexts[(dst_vm, dst_vcpu)], IVC_NOTIFY_LINE, cause="ivc")
        return OK

    def psci_cpu_on(self, caller_pcpu: int, target: int, entry=None) -> None:
        sim = self.sim
        pcpus = sim.machine.pcpus
        if not 0 <= target < len(pcpus):
            raise InvalidPcpu(target)
        if pcpus[target].power is Power.ON:
            raise AlreadyOn(target)
        sim.charge(caller_pcpu, GEAR1, "el3_hop", sim.costs.el3_hop_ns, ("fn", "CPU_ON", "target", target))
        pcpus[target].power = Power.ON
        pcpus[target].current_world = GEAR1_WORLD
        at = sim.offset(caller_pcpu)
        sim.engine.call_at(at, lambda ev: sim.cpu_entry(target, entry))

    # GIC distributor emulation

    def emulate_gicd(self, pcpu: int, ctx: VcpuContext, offset: int, op: AccessOp, value: int = 0) -> int:
        sim = self.sim
        costs = sim.costs_for(ctx.vm)
        sim.charge(pcpu, GEAR1, "gicd_emul", costs.gicd_emul_ns,
                   ("vm", ctx.vm, "offset", offset, "op", op.value, "pcpu", pcpu))
        vstate = self.gicd_virtual[ctx.vm]
        if offset >= GICD_SIZE:
            # emulated CPU interface (acknowledge / end of interrupt)
            return 0
        if GICD_ISENABLER <= offset < GICD_ISENABLER + 0x80:
            base = (offset - GICD_ISENABLER) * 8
            if op is AccessOp.READ:
                return sum(1 << (l - base) for l in vstate["enabled"] if base <= l < base + 32)
            for bit in range(32):
                if value >> bit & 1:
                    self._set_line(ctx, base + bit, True)
            return 0
        if GICD_ICENABLER <= offset < GICD_ICENABLER + 0x80:
            base = (offset - GICD_ICENABLER) * 8
            if op is AccessOp.WRITE:
                for bit in range(32):
                    if value >> bit & 1:
                        self._set_line(ctx, base + bit, False)
            return 0
        if GICD_ITARGETSR <= offset < GICD_ITARGETSR + 0x400:
            line = offset - GICD_ITARGETSR
            if op is AccessOp.READ:
                return vstate["routes"].get(line, (ctx.vm, 0))[1]
            dst_vm, dst_vcpu = value >> 8, value & 0xFF
            self._route_line(ctx, line, dst_vm, dst_vcpu)
            return 0
        if offset == GICD_SGIR and op is AccessOp.WRITE:
            self._send_sgi(pcpu, ctx, value)
            return 0
        return 0

    def _owns_line(self, vm: int, line: int) -> bool:
        gicd = self.sim.machine.gicd
        if line not in gicd.configured:
            return False
        return gicd.route[line][0] == vm or vm == self.primary_id \
            or self.kind(vm) is VmKind.DVM and self.kind(gicd.route[line][0]) is not VmKind.RTVM

    def _set_line(self, ctx: VcpuContext, line: int, enable: bool) -> None:
        vstate = self.gicd_virtual[ctx.vm]
        if enable:
            vstate["enabled"].add(line)
        else:
            vstate["enabled"].discard(line)
        if self._owns_line(ctx.vm, line):
            self.sim.machine.gicd.set_enable(line, enable)
            if enable:
                self.sim.machine.release_pending(line)
        else:
            self.illegal_gicd += 1

    def _route_line(self, ctx: VcpuContext, line: int, dst_vm: int, dst_vcpu: int) -> None:
        gicd = self.sim.machine.gicd
        ok = (self._owns_line(ctx.vm, line) and (dst_vm, dst_vcpu) in self.contexts
              and (self.kind(dst_vm) is not VmKind.RTVM or ctx.vm == dst_vm))
        if not ok:
            self.illegal_gicd += 1
            self.sim.engine.emit(GEAR1, "gicd_ignored", ("vm", ctx.vm, "line", line))
            return
        self.gicd_virtual[ctx.vm]["routes"][line] = (dst_vm, dst_vcpu)
        pcpu = self.manifests[dst_vm].affinity[dst_vcpu]
        gicd.configure(line, dst_vm, dst_vcpu, pcpu, enabled=line in gicd.enabled)

    def _send_sgi(self, pcpu: int, ctx: VcpuContext, value: int) -> None:
        """SGIR write: bits [3:0] intid, [23:16] target vcpu list, [25:24] filter."""
        sim = self.sim
        intid = value & 0xF
        mode = (value >> 24) & 0x3
        m = self.manifests[ctx.vm]
        if mode == 1:
            requested = {v for v in range(m.vcpus) if v != ctx.vcpu}
            requested_pcpus = set(range(len(sim.machine.pcpus)))
        else:
            requested = {v for v in range(m.vcpus) if (value >> (16 + v)) & 1}
            requested_pcpus = {m.affinity[v] for v in requested}
        allowed = sim.machine.gicd.allowed_sgi_targets(ctx.vm, requested_pcpus)
        if allowed != requested_pcpus and mode == 1:
            self.sgi_filtered += 1
            sim.engine.emit(GEAR1, "sgi_filtered", ("vm", ctx.vm, "blocked", len(requested_pcpus - allowed)))
        for v in sorted(requested):
            if m.affinity[v] in allowed:
                sim.engine.emit(GEAR1, "sgi", ("vm", ctx.vm, "from", ctx.vcpu, "to", v, "intid", intid))
                self.inject_virq(pcpu, self.contexts[(ctx.vm, v)], intid, cause="ipi")

    # EL2 timer multiplexing

    def offline_deadlines(self, pcpu: int) -> list[tuple[int, VcpuContext]]:
        homed = self._homed.get(pcpu)
        if homed is None:
            homed = self._homed[pcpu] = [ctx for (vm, v), ctx in self.contexts.items()
                                         if vm != self.primary_id and self.manifests[vm].affinity[v] == pcpu]
        out = []
        loaded = self.sim.machine.pcpus[pcpu].current_world
        for ctx in homed:
            if ctx.world == loaded:
                continue
            if ctx.el1_timer_enable:
                out.append((ctx.el1_timer_comparator, ctx))
        return out

    def el2_timer_multiplex(self, pcpu: int) -> Optional[int]:
        """Program the EL2 timer to the nearest offline vcpu deadline."""
        timers = self.sim.machine.timers
        deadlines = self.offline_deadlines(pcpu)
        if not deadlines:
            timers.disarm(pcpu, "cnthp")
            self.el2_deadline[pcpu] = None
            return None
        nearest = min(d for d, _ in deadlines)
        if self.el2_deadline.get(pcpu) != nearest or not timers.read(pcpu, "cnthp").enabled:
            timers.program(pcpu, "cnthp", nearest, True)
        self.el2_deadline[pcpu] = nearest
        return nearest

    def el2_timer_trap(self, pcpu: int) -> bool:
        """EL2 timer taken while the primary VM owns ``pcpu``."""
        sim = self.sim
        sim.charge(pcpu, GEAR1, "vm_trap", sim.costs.vm_trap_ns,
                   ("vm", self.primary_id, "vcpu", self.primary_ctx(pcpu).vcpu, "reason", "phys_irq",
                    "pcpu", pcpu, "line", PPI_EL2_PHYS_TIMER))
        return self.el2_timer_fire(pcpu)

    def el2_timer_fire(self, pcpu: int) -> bool:
        """Inject virtual timer interrupts for expired offline deadlines.

        Returns True when a blocked vcpu needs Gear2 to requeue it.
        """
        sim = self.sim
        now = sim.engine.now
        need_gear2 = False
        for deadline, ctx in sorted(self.offline_deadlines(pcpu), key=lambda x: (x[0], x[1].vm, x[1].vcpu)):
            if deadline <= now:
                ctx.el1_timer_enable = False
                ctx.pending_virqs.inject(PPI_VIRT_TIMER)
                sim.charge(pcpu, GEAR1, "virq_inject", sim.costs.virq_inject_ns,
                           ("vm", ctx.vm, "vcpu", ctx.vcpu, "line", PPI_VIRT_TIMER,
                            "cause", "el2_timer", "pcpu", pcpu))
                sim.engine.emit(GEAR1, "el2_timer_fire", ("vm", ctx.vm, "vcpu", ctx.vcpu,
                                                          "deadline", deadline))
                if ctx.runstate is Runstate.BLOCKED and ctx.block_reason == "wfi":
                    sim.gear2.post(pcpu, ("wake", ctx.vm, ctx.vcpu))
                    need_gear2 = True
        self.el2_deadline[pcpu] = None
        self.el2_timer_multiplex(pcpu)
        return need_gear2

    # restart support for supervision

    def restart_vm(self, vm: int) -> None:
        m = self.manifests[vm]
        for v in range(m.vcpus):
            ctx = self.contexts[(vm, v)]
            ctx.general_regs = [0] * NUM_GPRS
            ctx.el1_timer_enable = False
            ctx.el1_timer_comparator = 0
            ctx.program_point = 0
            ctx.pending_virqs.reset()
        self.sim.engine.emit(GEAR1, "restart_vm", ("vm", vm))

    def clone_context(self, ctx: VcpuContext) -> VcpuContext:
        return copy.deepcopy(ctx)
