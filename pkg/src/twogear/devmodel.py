"""Device-emulation VM side: request rings, backends and API forwarding.

Trapped MMIO accesses reach the DVM as descriptors on one ring per
emulated device.  The device model (GDM) pops them, runs the backend
against a :class:`BackingStore` and acknowledges each to Gear2 through an
IvcSend hypercall carrying the request tag.

Register layout of an emulated device window: the byte offset of an access
addresses the backing medium directly (block image offset, console stream,
net loopback), so a write followed by a read of the same offset round-trips.
"""

from __future__ import annotations

import enum
import hashlib
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from twogear.errors import BadRequest, ChannelClosed, DvmRingFull
from twogear.machine import DeviceBehavior, DeviceStub

if TYPE_CHECKING:
    from twogear.gear2 import IoRequest
    from twogear.system import Simulation

# virtual lines used between the hypervisor and the DVM
GDM_NOTIFY_LINE = 60
IVC_NOTIFY_LINE = 61
DEFAULT_RING_DEPTH = 64
ERROR_VALUE = (1 << 64) - 1


@dataclass
class Descriptor:
    tag: int
    write: bool
    offset: int
    length: int
    value: int
    source: tuple[int, int]
    pcpu: int


class VirtioQueue:
    """Single request/completion ring with monotone indices."""

    def __init__(self, device: int, irq_line: int, depth: int = DEFAULT_RING_DEPTH) -> None:
        self.device = device
        self.irq_line = irq_line
        self.depth = depth
        self.ring: deque[Descriptor] = deque()
        self.avail_idx = 0
        self.used_idx = 0
        self.consumed: set[int] = set()
        self.requests = 0
        self.acks = 0

    def push(self, desc: Descriptor) -> None:
        if len(self.ring) >= self.depth:
            raise DvmRingFull(f"ring of device {self.device} is full")
        self.ring.append(desc)
        self.avail_idx += 1
        self.requests += 1

    def pop(self) -> Optional[Descriptor]:
        if not self.ring:
            return None
        desc = self.ring.popleft()
        if desc.tag in self.consumed:
            raise BadRequest(f"descriptor {desc.tag} consumed twice")
        self.consumed.add(desc.tag)
        return desc

    def complete(self) -> None:
        self.used_idx += 1
        self.acks += 1
        assert self.used_idx <= self.avail_idx


class BackingStore:
    """Block image, console log and network loopback.

    The block image is a bytearray; ``flush`` writes it to ``image_path``
    when one is configured.  The console log is appended to ``console_path``.
    """

    def __init__(self, block_size: int = 1 << 20, image_path: Optional[str] = None,
                 console_path: Optional[str] = None) -> None:
        self.image_path = image_path
        self.console_path = console_path
        if image_path and os.path.exists(image_path):
            with open(image_path, "rb") as fh:
                data = fh.read()
            self.block = bytearray(data.ljust(block_size, b"\0")[:block_size])
        else:
            self.block = bytearray(block_size)
        self.console: list[str] = []
        self.loopback: deque[int] = deque()

    def read_block(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > len(self.block):
            raise BadRequest(f"block read {offset}+{length} out of range")
        return bytes(self.block[offset:offset + length])

    def write_block(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > len(self.block):
            raise BadRequest(f"block write {offset}+{len(data)} out of range")
        self.block[offset:offset + len(data)] = data

    def console_write(self, value: int) -> None:
        self.console.append(chr(value & 0x7F) if 32 <= value & 0x7F < 127 else f"<{value:#x}>")

    def flush(self) -> None:
        if self.image_path:
            with open(self.image_path, "wb") as fh:
                fh.write(self.block)
        if self.console_path:
            with open(self.console_path, "a", encoding="utf-8") as fh:
                fh.write("".join(self.console))
            self.console.clear()


class Gdm:
    """User-space device model living in the DVM.

    ``kernel_module=True`` models moving the backend into the DVM kernel,
    which removes the per-request user/kernel hop.
    """

    def __init__(self, sim: "Simulation", store: BackingStore, kernel_module: bool = False,
                 ring_depth: int = DEFAULT_RING_DEPTH) -> None:
        self.sim = sim
        self.store = store
        self.kernel_module = kernel_module
        self.ring_depth = ring_depth
        self.queues: dict[int, VirtioQueue] = {}
        self.devices: dict[int, DeviceStub] = {}
        self.dvm: Optional[tuple[int, int]] = None

    def add_device(self, dev: DeviceStub) -> None:
        self.devices[dev.id] = dev
        self.queues[dev.id] = VirtioQueue(dev.id, dev.irq_line, self.ring_depth)

    def device_for(self, addr: int) -> Optional[DeviceStub]:
        for dev in self.devices.values():
            if dev.contains(addr):
                return dev
        return None

    def dvm_ctx(self):
        if self.dvm is None:
            raise BadRequest("no device-emulation VM configured")
        return self.sim.gear1.contexts[self.dvm]

    def submit(self, req: "IoRequest") -> None:
        dev = self.devices[req.device]
        desc = Descriptor(req.tag, req.write, req.addr - dev.mmio_base, req.size, req.value,
                          req.source, req.pcpu)
        self.queues[req.device].push(desc)

    def pending(self) -> list[tuple[int, Descriptor]]:
        """Pop every queued descriptor, device order then FIFO."""
        out = []
        for dev_id, q in self.queues.items():
            while True:
                d = q.pop()
                if d is None:
                    break
                out.append((dev_id, d))
        return out

    def handle_io_event(self, dev_id: int, desc: Descriptor) -> int:
        """Run the backend for one descriptor; returns the value to ack with."""
        dev = self.devices[dev_id]
        if desc.length not in (1, 2, 4, 8):
            raise BadRequest(f"bad access size {desc.length}")
        store = self.store
        if dev.behavior is DeviceBehavior.BLOCK:
            span = len(store.block)
            if desc.offset + desc.length > span:
                raise BadRequest(f"offset {desc.offset:#x} beyond image")
            if desc.write:
                store.write_block(desc.offset, (desc.value & ((1 << (8 * desc.length)) - 1))
                                  .to_bytes(desc.length, "little"))
                return 0
            return int.from_bytes(store.read_block(desc.offset, desc.length), "little")
        if dev.behavior is DeviceBehavior.CONSOLE:
            if desc.write:
                store.console_write(desc.value)
            return 0
        if dev.behavior is DeviceBehavior.NET:
            if desc.write:
                store.loopback.append(desc.value)
                return 0
            return store.loopback.popleft() if store.loopback else 0
        return 0

    def ack(self, dev_id: int) -> None:
        self.queues[dev_id].complete()


class IvcMode(enum.Enum):
    COPY = "copy"
    SHARED_MEM = "shared_mem"


@dataclass
class ApiForwardChannel:
    """Forwarding of accelerator API calls to the device model.

    The copy transport moves the payload through the virtio path and pays
    ``per_byte_copy_ns`` per byte; the shared-memory transport only pays
    the fixed per-command cost.
    """

    mode: IvcMode = IvcMode.COPY
    per_cmd_fixed_ns: int = 8774
    per_byte_copy_ns: float = 0.25
    log: list[tuple[int, int, str]] = field(default_factory=list)
    closed: bool = False

    def cost(self, nbytes: int) -> int:
        if self.mode is IvcMode.SHARED_MEM:
            return self.per_cmd_fixed_ns
        # rounded up so any positive per-byte cost stays visible in integer time
        return self.per_cmd_fixed_ns + math.ceil(self.per_byte_copy_ns * nbytes)

    def exact_cost(self, nbytes: int) -> float:
        if self.mode is IvcMode.SHARED_MEM:
            return float(self.per_cmd_fixed_ns)
        return self.per_cmd_fixed_ns + self.per_byte_copy_ns * nbytes

    def throughput(self, nbytes: int) -> float:
        """Payload bytes per second of back-to-back commands."""
        return nbytes / (self.exact_cost(nbytes) * 1e-9)

    def api_forward(self, opcode: int, payload: bytes) -> tuple[bytes, int]:
        """Log and answer a command.  Returns ``(response, cost_ns)``.

        The response is a digest of the payload; device semantics are not
        emulated.
        """
        if self.closed:
            raise ChannelClosed("API forwarding channel is closed")
        digest = hashlib.sha256(bytes([opcode & 0xFF]) + payload).hexdigest()
        self.log.append((opcode, len(payload), digest[:16]))
        return bytes.fromhex(digest), self.cost(len(payload))

    def close(self) -> None:
        self.closed = True


def simulate_stream(channel: ApiForwardChannel, nbytes: int, commands: int, seed: int = 0) -> float:
    """Run ``commands`` back-to-back forwards on an event engine.

    Returns measured throughput in bytes per second of virtual time.
    """
    from twogear.simcore import Engine

    eng = Engine(seed)
    payload = bytes(eng.prng.stream("payload").randrange(256) for _ in range(min(nbytes, 64)))
    payload = (payload * (nbytes // max(1, len(payload)) + 1))[:nbytes]
    state = {"done": 0}

    def issue(ev) -> None:
        _, cost = channel.api_forward(1, payload)
        eng.emit("dvm", "api_forward", ("bytes", nbytes, "mode", channel.mode.value), cost)
        state["done"] += 1
        if state["done"] < commands:
            eng.call_at(eng.now + cost, issue)
        else:
            state["end"] = eng.now + cost

    eng.call_at(0, issue)
    eng.run_until(1 << 62)
    return nbytes * commands / (state["end"] * 1e-9)
