"""Scenario files: schema, loader and built-in templates.

A scenario is a JSON document.  Top-level sections::

    seed, duration            integers (ns for duration)
    platform                  pcpus, reserved, llc, nr_lr, devices[]
    vms[]                     manifests plus per-vcpu programs and rt settings
    workloads[]               optional program assignment by (vm, vcpu)
    cost_model, kvm_cost_model  overrides of the named nanosecond costs
    scheduler                 policy, quantum
    devmodel                  kernel_module, ring_depth, block_size, image_path, console_path
    supervision               enabled, l1, periods, actions, escalate_after, escalate_window
    faults[]                  {"at", "target": "vm"|"gear2", "vm"}
    bench                     free-form options for the bench commands

If no VM of kind ``primary`` is declared, one is added with id 0 and one vcpu
on every pcpu not dedicated to an RTVM.  See ``SCHEMA`` for the full shape.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import jsonschema

from twogear.costs import DEFAULT_COSTS, KVM_COSTS, CostModel
from twogear.errors import ScenarioError
from twogear.gear1 import RtMode, VmKind, VmManifest
from twogear.guests import NOISE_PROFILES, ProfileKind, RtTaskConfig, WorkloadProgram, make_profile
from twogear.machine import Cluster, DeviceBehavior, DeviceStub, LlcGeometry
from twogear.supervision import Action, Layer, SupervisionConfig, DEFAULT_PERIODS

MIB = 1 << 20
RAM_BASE = 0x4000_0000
RESERVED = (RAM_BASE, 16 * MIB)
DEFAULT_VM_MEM = 16 * MIB

_int = {"type": "integer"}
_nn = {"type": "integer", "minimum": 0}
_region = {"type": "array", "items": _nn, "minItems": 2, "maxItems": 2}
_program = {"type": "array", "items": {"type": "string"}}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": _nn,
        "duration": _nn,
        "platform": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pcpus": {"oneOf": [
                    {"type": "integer", "minimum": 1},
                    {"type": "array", "minItems": 1,
                     "items": {"type": "string", "enum": ["big", "little"]}}]},
                "reserved": _region,
                "nr_lr": {"type": "integer", "minimum": 1},
                "llc": {"type": "object", "additionalProperties": False,
                        "properties": {"sets": _nn, "ways": _nn, "line_bytes": _nn}},
                "devices": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False,
                    "required": ["id", "mmio_base", "mmio_len", "irq_line"],
                    "properties": {"id": _nn, "mmio_base": _nn, "mmio_len": _nn, "irq_line": _nn,
                                   "behavior": {"enum": [b.value for b in DeviceBehavior]},
                                   "service_ns": _nn, "queue_depth": _nn}}},
            },
        },
        "vms": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["id", "kind"],
            "properties": {
                "id": _nn,
                "kind": {"enum": [k.value for k in VmKind]},
                "vcpus": {"type": "integer", "minimum": 1},
                "affinity": {"type": "array", "items": _nn},
                "memory": {"type": "array", "items": _region},
                "mmio_holes": {"type": "array", "items": _region},
                "passthrough": {"type": "array", "items": _nn},
                "virtio": {"type": "array", "items": _nn},
                "color_mask": {"type": ["integer", "null"], "minimum": 0},
                "watchdog_period": _nn,
                "rt_mode": {"enum": [m.value for m in RtMode]},
                "program": _program,
                "programs": {"type": "array", "items": _program},
                "profile": {"type": "object", "additionalProperties": False, "required": ["kind"],
                            "properties": {"kind": {"enum": [k.value for k in ProfileKind]},
                                           "duration": _nn, "doorbell": _nn}},
                "rt": {"type": "object", "additionalProperties": False,
                       "properties": {"profile": {"enum": sorted(NOISE_PROFILES)},
                                      "period": {"type": "integer", "minimum": 1},
                                      "contended": {"type": "boolean"}}},
            },
        }},
        "workloads": {"type": "array", "items": {
            "type": "object", "additionalProperties": False, "required": ["vm", "program"],
            "properties": {"vm": _nn, "vcpu": _nn, "program": _program}}},
        "cost_model": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "kvm_cost_model": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "scheduler": {"type": "object", "additionalProperties": False,
                      "properties": {"policy": {"enum": ["round_robin", "strict_priority"]},
                                     "quantum": {"type": "integer", "minimum": 1}}},
        "devmodel": {"type": "object", "additionalProperties": False,
                     "properties": {"kernel_module": {"type": "boolean"},
                                    "ring_depth": {"type": "integer", "minimum": 1},
                                    "block_size": {"type": "integer", "minimum": 8},
                                    "image_path": {"type": ["string", "null"]},
                                    "console_path": {"type": ["string", "null"]}}},
        "supervision": {"type": "object", "additionalProperties": False,
                        "properties": {
                            "enabled": {"type": "boolean"},
                            "l1": {"type": "boolean"},
                            "periods": {"type": "object", "additionalProperties": False,
                                        "properties": {l.value: {"type": "integer", "minimum": 1}
                                                       for l in Layer}},
                            "actions": {"type": "object", "additionalProperties": False,
                                        "properties": {l.value: {"enum": [a.value for a in Action]}
                                                       for l in Layer}},
                            "escalate_after": {"type": "integer", "minimum": 1},
                            "escalate_window": {"type": "integer", "minimum": 1}}},
        "faults": {"type": "array", "items": {
            "type": "object", "additionalProperties": False, "required": ["at", "target"],
            "properties": {"at": _nn, "target": {"enum": ["vm", "gear2"]}, "vm": _nn}}},
        "bench": {"type": "object"},
    },
}


@dataclass
class VmSpec:
    manifest: VmManifest
    programs: list[WorkloadProgram]
    rt: Optional[RtTaskConfig] = None


@dataclass
class Scenario:
    seed: int = 1
    duration: int = 1_000_000_000
    name: str = "scenario"
    clusters: list[Cluster] = field(default_factory=lambda: [Cluster.BIG] * 4)
    reserved: tuple[int, int] = RESERVED
    nr_lr: int = 4
    llc: LlcGeometry = field(default_factory=LlcGeometry)
    devices: list[DeviceStub] = field(default_factory=list)
    vms: list[VmSpec] = field(default_factory=list)
    costs: CostModel = DEFAULT_COSTS
    kvm_costs: CostModel = KVM_COSTS
    policy: str = "round_robin"
    quantum: int = 1_000_000
    kernel_module: bool = False
    ring_depth: int = 64
    block_size: int = MIB
    image_path: Optional[str] = None
    console_path: Optional[str] = None
    supervision_enabled: bool = False
    l1_watchdogs: bool = False
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    faults: list[dict] = field(default_factory=list)
    bench: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def vm(self, vm_id: int) -> VmSpec:
        for spec in self.vms:
            if spec.manifest.vm_id == vm_id:
                return spec
        raise ScenarioError(f"no vm {vm_id}")


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{where}: {exc.message}") from None


def load(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
    return from_dict(doc)


def from_dict(doc: dict) -> Scenario:
    validate(doc)
    doc = copy.deepcopy(doc)
    plat = doc.get("platform", {})
    pc = plat.get("pcpus", 4)
    clusters = [Cluster.BIG] * pc if isinstance(pc, int) else [Cluster(c) for c in pc]
    npcpus = len(clusters)
    devices = [DeviceStub(d["id"], d["mmio_base"], d["mmio_len"], d["irq_line"],
                          DeviceBehavior(d.get("behavior", "block")),
                          d.get("service_ns", 80998), d.get("queue_depth", 64))
               for d in plat.get("devices", [])]
    dev_ids = {d.id for d in devices}
    llc = LlcGeometry(**plat.get("llc", {}))
    duration = doc.get("duration", 1_000_000_000)

    vm_docs = doc.get("vms", [])
    ids = [v["id"] for v in vm_docs]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate vm id")
    rt_pcpus = {p for v in vm_docs if v["kind"] == "rtvm" for p in v.get("affinity", [])}
    if not any(v["kind"] == "primary" for v in vm_docs):
        if 0 in ids:
            raise ScenarioError("vm id 0 is reserved for the implicit primary VM")
        gear2_pcpus = [p for p in range(npcpus) if p not in rt_pcpus]
        vm_docs.insert(0, {"id": 0, "kind": "primary", "vcpus": len(gear2_pcpus),
                           "affinity": gear2_pcpus})
    workloads = {(w["vm"], w.get("vcpu", 0)): w["program"] for w in doc.get("workloads", [])}

    specs = []
    reserved = tuple(plat.get("reserved", RESERVED))
    # VMs without explicit memory get 16 MiB slots above everything declared
    next_base = max([reserved[0] + reserved[1]]
                    + [s + l for v in vm_docs for s, l in v.get("memory", [])])
    primary_pcpus: set[int] = set()
    for v in vm_docs:
        kind = VmKind(v["kind"])
        vcpus = v.get("vcpus", len(v.get("affinity", [])) or 1)
        affinity = v.get("affinity", list(range(vcpus)))
        for p in affinity:
            if not 0 <= p < npcpus:
                raise ScenarioError(f"vm {v['id']}: affinity pcpu {p} does not exist")
        for d in v.get("passthrough", []) + v.get("virtio", []):
            if d not in dev_ids:
                raise ScenarioError(f"vm {v['id']}: unknown device {d}")
        if "memory" in v:
            memory = [tuple(r) for r in v["memory"]]
        else:
            memory = [(next_base, DEFAULT_VM_MEM)]
            next_base += DEFAULT_VM_MEM
        try:
            manifest = VmManifest(v["id"], kind, vcpus, affinity, memory,
                                  [tuple(r) for r in v.get("mmio_holes", [])],
                                  v.get("passthrough", []), v.get("virtio", []),
                                  v.get("color_mask"), v.get("watchdog_period", 0),
                                  RtMode(v.get("rt_mode", "passthrough")))
        except Exception as exc:
            raise ScenarioError(str(exc)) from None
        if kind is VmKind.PRIMARY:
            primary_pcpus = set(affinity)
        programs = []
        if "programs" in v:
            programs = [WorkloadProgram.parse(p) for p in v["programs"]]
        elif "program" in v:
            programs = [WorkloadProgram.parse(v["program"])]
        elif "profile" in v:
            prof = v["profile"]
            kw = {"doorbell": prof["doorbell"]} if "doorbell" in prof else {}
            programs = [make_profile(prof["kind"], prof.get("duration", duration), **kw)]
        for vc in range(vcpus):
            if (v["id"], vc) in workloads:
                while len(programs) <= vc:
                    programs.append(programs[-1] if programs else WorkloadProgram([]))
                programs[vc] = WorkloadProgram.parse(workloads[(v["id"], vc)])
        if not programs:
            programs = [WorkloadProgram([])]
        rt = None
        if "rt" in v:
            r = v["rt"]
            rt = RtTaskConfig(r.get("period", 1_000_000), NOISE_PROFILES[r.get("profile", "xenomai")],
                              r.get("contended", True))
        specs.append(VmSpec(manifest, programs, rt))
    for spec in specs:
        m = spec.manifest
        if m.kind in (VmKind.SECONDARY, VmKind.DVM):
            stray = set(m.affinity) - primary_pcpus
            if stray:
                raise ScenarioError(f"vm {m.vm_id}: pcpus {sorted(stray)} are not run by Gear2")

    sched = doc.get("scheduler", {})
    dm = doc.get("devmodel", {})
    sup = doc.get("supervision", {})
    periods = dict(DEFAULT_PERIODS)
    for k, val in sup.get("periods", {}).items():
        periods[Layer(k)] = val
    actions = {l: Action.LOG_ONLY for l in Layer}
    for k, val in sup.get("actions", {}).items():
        actions[Layer(k)] = Action(val)
    sup_cfg = SupervisionConfig(periods, actions, sup.get("escalate_after", 3),
                                sup.get("escalate_window", 2_000_000_000))
    try:
        costs = DEFAULT_COSTS.with_overrides(doc.get("cost_model"))
        kvm = KVM_COSTS.with_overrides(doc.get("kvm_cost_model"))
    except KeyError as exc:
        raise ScenarioError(str(exc)) from None
    return Scenario(
        seed=doc.get("seed", 1), duration=duration, name=doc.get("name", "scenario"),
        clusters=clusters, reserved=reserved,
        nr_lr=plat.get("nr_lr", 4), llc=llc, devices=devices, vms=specs, costs=costs, kvm_costs=kvm,
        policy=sched.get("policy", "round_robin"), quantum=sched.get("quantum", 1_000_000),
        kernel_module=dm.get("kernel_module", False), ring_depth=dm.get("ring_depth", 64),
        block_size=dm.get("block_size", MIB), image_path=dm.get("image_path"),
        console_path=dm.get("console_path"), supervision_enabled=sup.get("enabled", False),
        l1_watchdogs=sup.get("l1", False), supervision=sup_cfg, faults=doc.get("faults", []),
        bench=doc.get("bench", {}), raw=doc)


# built-in templates (plain dicts so they round-trip through the schema)

BLOCK_DEV = {"id": 0, "mmio_base": 0x0A00_0000, "mmio_len": 0x1000, "irq_line": 40, "behavior": "block"}
VIRTIO_BLK = {"id": 1, "mmio_base": 0x0A00_1000, "mmio_len": 0x1000, "irq_line": 41, "behavior": "block"}
VIRTIO_CON = {"id": 2, "mmio_base": 0x0A00_2000, "mmio_len": 0x1000, "irq_line": 42, "behavior": "console"}
VIRTIO_NET = {"id": 3, "mmio_base": 0x0A00_3000, "mmio_len": 0x1000, "irq_line": 43, "behavior": "net"}


def overhead_doc(kind: str = "io_bound", duration: int = 10_000_000_000, seed: int = 1) -> dict:
    """Measured VM is vm 1 (the DVM) running a profile on pcpu 1."""
    vm = {"id": 1, "kind": "dvm", "affinity": [1], "profile": {"kind": kind, "duration": duration}}
    if kind == "io_bound":
        vm["passthrough"] = [0]
    return {"name": f"overhead-{kind}", "seed": seed, "duration": duration,
            "platform": {"pcpus": 4, "devices": [dict(BLOCK_DEV)]},
            "vms": [vm], "bench": {"measured_vm": 1}}


def micro_doc(name: str, iterations: int = 200, seed: int = 1) -> dict:
    gap = 100_000
    gicd_sgir = 0x0800_0F00
    devices = [dict(VIRTIO_BLK)]
    vms: list[dict] = [{"id": 3, "kind": "dvm", "affinity": [3], "program": ["Wfi", "LoopTo 0 forever"]}]
    if name == "Hypercall":
        prog = ["Hypercall WATCHDOG_KICK 2", f"Compute {gap}", f"LoopTo 0 {iterations - 1}"]
        vms.append({"id": 1, "kind": "secondary", "affinity": [1], "program": prog})
    elif name in ("VmTrap", "WorldSwitch"):
        prog = [f"Mmio {VIRTIO_BLK['mmio_base']:#x} W nonblocking 1", f"Compute {gap}",
                f"LoopTo 0 {iterations - 1}"]
        vms.append({"id": 1, "kind": "secondary", "affinity": [1], "virtio": [1], "program": prog})
        vms[0]["virtio"] = [1]
    elif name == "Ipi":
        prog = [f"Mmio {gicd_sgir:#x} W blocking {(1 << 17) | 5}", f"Compute {gap}", f"LoopTo 0 {iterations - 1}"]
        vms.append({"id": 1, "kind": "secondary", "vcpus": 2, "affinity": [1, 2],
                    "programs": [prog, ["Wfi", "LoopTo 0 forever"]]})
    elif name == "IoOut":
        prog = [f"Mmio {VIRTIO_BLK['mmio_base']:#x} W blocking 1", f"Compute {gap}", f"LoopTo 0 {iterations - 1}"]
        vms.append({"id": 1, "kind": "secondary", "affinity": [1], "virtio": [1], "program": prog})
        vms[0]["virtio"] = [1]
    else:
        raise ScenarioError(f"unknown micro-benchmark {name!r}")
    return {"name": f"micro-{name}", "seed": seed, "duration": (iterations + 2) * (gap + 50_000),
            "platform": {"pcpus": 4, "devices": devices}, "vms": vms, "bench": {"micro": name}}


JITTER_CONFIGS = ("Native", "GearvRtVmPassthrough", "GearvRtVmVgicEmul", "KvmLikeRtVm", "GearvNonRtVm")
# best-effort vcpus sharing the non-RT VM's pcpu; with the 1 ms quantum the
# worst-case wait is about (hogs + DVM) quanta, roughly 23 ms
CPU_HOGS = 22


def jitter_doc(config: str, profile: str = "xenomai", seed: int = 1,
               duration: int = 1_000_000_000, period: int = 1_000_000) -> dict:
    """Cyclictest analog with a disk-writing background program in the DVM."""
    loops = max(1, duration // period + 2)
    rt_prog = [f"ArmTimer {period} periodic", "Wfi", f"LoopTo 1 {loops}"]
    background = {"id": 2, "kind": "dvm", "affinity": [1], "passthrough": [0],
                  "program": [f"Mmio {BLOCK_DEV['mmio_base']:#x} W nonblocking 1", "Compute 250000",
                              "LoopTo 0 forever"]}
    dev = dict(BLOCK_DEV, service_ns=250_000)
    rt = {"profile": profile, "period": period, "contended": config != "Native"}
    doc: dict[str, Any] = {"name": f"jitter-{config}-{profile}", "seed": seed, "duration": duration,
                           "platform": {"pcpus": 4, "devices": [dev]}, "bench": {"jitter": config}}
    if config == "GearvNonRtVm":
        vms = [{"id": 1, "kind": "secondary", "affinity": [2], "program": rt_prog, "rt": rt},
               dict(background, affinity=[2])]
        for i in range(CPU_HOGS):
            vms.append({"id": 3 + i, "kind": "secondary", "affinity": [2],
                        "program": ["Compute 1000000", "LoopTo 0 forever"]})
        doc["vms"] = vms
        return doc
    mode = {"Native": "native", "GearvRtVmPassthrough": "passthrough",
            "GearvRtVmVgicEmul": "vgic_emul", "KvmLikeRtVm": "kvm_like"}[config]
    rtvm = {"id": 1, "kind": "rtvm", "affinity": [3], "rt_mode": mode, "program": rt_prog, "rt": rt}
    doc["vms"] = [rtvm] if config == "Native" else [rtvm, background]
    return doc


def fairness_doc(threads: int = 3, quanta: int = 300, quantum: int = 1_000_000) -> dict:
    vms = [{"id": 1 + i, "kind": "secondary", "affinity": [1],
            "program": ["Compute 1000000", "LoopTo 0 forever"]} for i in range(threads)]
    return {"name": "fairness", "seed": 1, "duration": quanta * quantum + quantum // 2,
            "platform": {"pcpus": 2}, "vms": vms, "scheduler": {"quantum": quantum}}


def containment_doc(k: int, duration: int = 1_000_000_000, seed: int = 1) -> dict:
    prog = []
    if k:
        prog = [f"Mmio {0x0800_0000 + 0x100:#x} R", "Compute 1000", f"LoopTo 0 {k - 1}"]
    wfi = len(prog) + 1
    prog += ["ArmTimer 1000000 periodic", "Wfi", f"LoopTo {wfi} forever"]
    return {"name": f"containment-{k}", "seed": seed, "duration": duration,
            "platform": {"pcpus": 4},
            "vms": [{"id": 1, "kind": "rtvm", "affinity": [3], "rt_mode": "passthrough", "program": prog},
                    {"id": 2, "kind": "secondary", "affinity": [1],
                     "program": ["Compute 500000", "Wfi", "LoopTo 0 forever"]}]}


def supervision_doc(fault: Optional[str] = None, at: int = 3_000_000_000,
                    duration: int = 10_000_000_000, restart: bool = True) -> dict:
    kick = ["KickWatchdog", "Compute 50000000", "LoopTo 0 forever"]
    doc = {"name": "supervision", "seed": 1, "duration": duration, "platform": {"pcpus": 4},
           "vms": [{"id": 1, "kind": "secondary", "affinity": [1], "watchdog_period": 250_000_000,
                    "program": kick},
                   {"id": 2, "kind": "secondary", "affinity": [2], "watchdog_period": 250_000_000,
                    "program": kick}],
           "supervision": {"enabled": True,
                           "actions": {"L2RS": "RestartVm" if restart else "LogOnly",
                                       "L3RS": "RestartGear2" if restart else "LogOnly"}},
           "faults": []}
    if fault == "vm":
        doc["faults"] = [{"at": at, "target": "vm", "vm": 1}]
    elif fault == "gear2":
        doc["faults"] = [{"at": at, "target": "gear2"}]
    return doc
