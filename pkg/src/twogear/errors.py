"""Exception hierarchy shared by every simulator layer."""


class SimError(Exception):
    """Base class for all simulator errors."""


class PastTime(SimError):
    pass


class UnknownLine(SimError):
    pass


class ManifestError(SimError):
    pass


class ManifestOverlap(ManifestError):
    pass


class ManifestUnaligned(ManifestError):
    pass


class RtvmAffinityShared(ManifestError):
    pass


class UnknownHypercall(SimError):
    pass


class AlreadyOn(SimError):
    pass


class InvalidPcpu(SimError):
    pass


class NotOwner(SimError):
    pass


class NotLent(SimError):
    pass


class DvmRingFull(SimError):
    pass


class BadRequest(SimError):
    pass


class ChannelClosed(SimError):
    pass


class UnknownWatchdog(SimError):
    pass


class ProgramEnd(SimError):
    pass


class ScenarioError(SimError):
    """Scenario file failed schema validation or references unknown ids."""
