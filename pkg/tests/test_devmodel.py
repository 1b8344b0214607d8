import math

import pytest
from hypothesis import given, strategies as st

from twogear.devmodel import (ApiForwardChannel, BackingStore, Descriptor, IvcMode, VirtioQueue,
                              simulate_stream)
from twogear.errors import BadRequest, ChannelClosed, DvmRingFull
from twogear.scenario import VIRTIO_BLK, VIRTIO_CON

from conftest import build, run

BLK = VIRTIO_BLK["mmio_base"]
CON = VIRTIO_CON["mmio_base"]


def _desc(tag):
    return Descriptor(tag, True, 0, 8, tag, (1, 0), 1)


def test_ring_full_and_double_consumption():
    q = VirtioQueue(1, 41, depth=2)
    q.push(_desc(1))
    q.push(_desc(2))
    with pytest.raises(DvmRingFull):
        q.push(_desc(3))
    assert q.pop().tag == 1
    q.ring.appendleft(_desc(1))
    with pytest.raises(BadRequest):
        q.pop()


def test_backing_store_bounds(tmp_path):
    img = tmp_path / "disk.img"
    s = BackingStore(64, str(img))
    s.write_block(8, b"abc")
    with pytest.raises(BadRequest):
        s.read_block(62, 4)
    s.flush()
    assert BackingStore(64, str(img)).read_block(8, 3) == b"abc"


def _io_doc(programs, ring_depth=64):
    return {"seed": 1, "duration": 5_000_000,
            "platform": {"pcpus": 4, "devices": [dict(VIRTIO_BLK), dict(VIRTIO_CON)]},
            "devmodel": {"ring_depth": ring_depth},
            "vms": [{"id": 3, "kind": "dvm", "affinity": [3], "virtio": [1, 2], "program": ["Wfi", "LoopTo 0 forever"]},
                    {"id": 1, "kind": "secondary", "vcpus": len(programs), "affinity": [1, 2][:len(programs)],
                     "virtio": [1, 2], "programs": programs}]}


def build_io(programs, ring_depth=64):
    return build(_io_doc(programs, ring_depth))


def test_block_write_then_read_roundtrips():
    sim = run(_io_doc([[f"Mmio {BLK + 16:#x} W blocking 43981", f"Mmio {BLK + 16:#x} R", "Wfi"]]))
    assert sim.gear1.contexts[(1, 0)].general_regs[0] == 43981
    assert sim.devmodel.store.read_block(16, 2) == (43981).to_bytes(2, "little")


def test_ring_full_requests_are_retried_not_lost():
    burst = [f"Mmio {BLK + 8 * i:#x} W nonblocking {i + 1}" for i in range(3)]
    sim = run(_io_doc([[f"Mmio {BLK + 64:#x} W blocking 43981", f"Mmio {BLK + 64:#x} R", "Wfi"],
                       burst + [f"Mmio {CON:#x} W blocking 72", "Wfi"]], ring_depth=1))
    io = sim.gear2.io
    assert io.ring_full > 0
    assert io.acks == io.issued_blocking + io.issued_nonblocking == 6
    assert sim.gear1.contexts[(1, 0)].general_regs[0] == 43981
    assert [sim.devmodel.store.block[8 * i] for i in range(3)] == [1, 2, 3]
    assert sim.devmodel.store.console == ["H"]
    for q in sim.devmodel.queues.values():
        assert q.requests == q.acks


def test_out_of_range_request_reports_error():
    doc = _io_doc([[f"Mmio {BLK + 0xFF8:#x} W blocking 1", "Wfi"]])
    doc["devmodel"]["block_size"] = 1024
    sim = run(doc)
    assert sim.gear2.io.errors == 1
    # the request still completes and the guest is not left blocked
    assert sim.gear2.threads[(1, 0)].block_reason == "wfi"


@given(st.floats(min_value=1e-6, max_value=100.0, allow_nan=False), st.integers(1, 1 << 20))
def test_shared_memory_beats_copy_for_any_positive_byte_cost(per_byte, nbytes):
    copy = ApiForwardChannel(IvcMode.COPY, per_byte_copy_ns=per_byte)
    shm = ApiForwardChannel(IvcMode.SHARED_MEM, per_byte_copy_ns=per_byte)
    assert shm.throughput(nbytes) > copy.throughput(nbytes)
    assert copy.cost(nbytes) > shm.cost(nbytes)


def test_closed_form_cost():
    ch = ApiForwardChannel(IvcMode.COPY, per_cmd_fixed_ns=8774, per_byte_copy_ns=0.25)
    assert ch.cost(4096) == 8774 + 1024
    assert math.isclose(ch.throughput(4096), 4096 / (9798e-9))


def test_simulated_stream_matches_direction():
    copy = simulate_stream(ApiForwardChannel(IvcMode.COPY), 4096, 50)
    shm = simulate_stream(ApiForwardChannel(IvcMode.SHARED_MEM), 4096, 50)
    assert shm > copy
    assert math.isclose(copy, 4096 / 9798e-9, rel_tol=1e-9)


def test_forward_and_close():
    ch = ApiForwardChannel()
    resp, cost = ch.api_forward(3, b"xyz")
    assert len(resp) == 32 and cost == 8774 + 1 and ch.log[0][:2] == (3, 3)
    ch.close()
    with pytest.raises(ChannelClosed):
        ch.api_forward(3, b"")


def test_kernel_module_removes_user_hop():
    docs = []
    for km in (False, True):
        d = _io_doc([[f"Mmio {BLK:#x} W blocking 1", "Wfi"]])
        d["devmodel"]["kernel_module"] = km
        docs.append(run(d))
    lat = [next(r.get("latency") for r in s.engine.trace if r.action == "io_ack") for s in docs]
    assert lat[0] - lat[1] == 4190


def test_completion_after_restart_is_dropped():
    sim = build_io([[f"Mmio {BLK + 16:#x} W blocking 7", "Wfi"]])
    t = 0
    while not sim.gear2.pending_io:
        t += 1000
        sim.run(t)
    sim.restart_vm(1)
    sim.run()
    io = sim.gear2.io
    # the old request is acknowledged but resumes nothing; the restarted program issues its own
    assert io.stale == 1 and io.issued_blocking == 2 and io.acks == 2 and io.ip_advances == 1
    assert sim.devmodel.store.read_block(16, 1) == b"\x07"
