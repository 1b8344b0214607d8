import pytest

from twogear.scenario import from_dict
from twogear.system import Simulation


def build(doc: dict) -> Simulation:
    return Simulation(from_dict(doc))


def run(doc: dict, duration=None) -> Simulation:
    sim = build(doc)
    sim.run(duration)
    return sim


def two_secondaries(**extra) -> dict:
    doc = {"seed": 1, "duration": 5_000_000, "platform": {"pcpus": 4},
           "vms": [{"id": 1, "kind": "secondary", "affinity": [1], "program": ["Compute 1000", "Wfi"]},
                   {"id": 2, "kind": "secondary", "affinity": [2], "program": ["Compute 1000", "Wfi"]}]}
    doc.update(extra)
    return doc


@pytest.fixture
def booted():
    """Two secondaries after boot has settled."""
    return run(two_secondaries(), 1_000_000)
