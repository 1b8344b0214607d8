"""Discrete-event model of a two-part embedded hypervisor.

Gear1 is the minimal partitioning layer (stage-2 tables, traps, world
switches); Gear2 runs in the primary VM and owns scheduling and device
emulation dispatch.  Everything runs on integer-nanosecond virtual time.
"""

__version__ = "0.1.0"
