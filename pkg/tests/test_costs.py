import dataclasses

import pytest

from twogear.costs import DEFAULT_COSTS, KVM_COSTS, PROVENANCE, CostModel


def test_primitive_defaults():
    c = DEFAULT_COSTS
    assert (c.hypercall_ns, c.vm_trap_ns, c.world_switch_ns) == (441, 732, 1485)


def test_fitted_defaults_compose_to_published_paths():
    c = DEFAULT_COSTS
    assert c.vm_trap_ns + c.gicd_emul_ns + c.virq_inject_ns + c.world_switch_ns == 9928
    assert (c.vm_trap_ns + 2 * c.world_switch_ns + c.virq_inject_ns + c.gdm_user_hop_ns
            + c.hypercall_ns) == 8774


def test_kvm_column():
    assert (KVM_COSTS.hypercall_ns, KVM_COSTS.vm_trap_ns, KVM_COSTS.world_switch_ns) == (3458, 4366, 1729)
    assert KVM_COSTS.world_switch_ns == KVM_COSTS.hypercall_ns // 2


def test_overrides_and_validation():
    c = DEFAULT_COSTS.with_overrides({"gicd_emul_ns": 10})
    assert c.gicd_emul_ns == 10 and DEFAULT_COSTS.gicd_emul_ns == 7270
    with pytest.raises(KeyError):
        DEFAULT_COSTS.with_overrides({"nope": 1})
    with pytest.raises(ValueError):
        CostModel(hypercall_ns=-1)


def test_every_field_has_provenance():
    assert {f.name for f in dataclasses.fields(CostModel)} == set(PROVENANCE)
