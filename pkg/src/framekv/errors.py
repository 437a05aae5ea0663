"""Exception hierarchy shared by every module.

Exit codes mirror the CLI contract: config errors map to 2, invariant
violations to 3, I/O failures to 4.
"""


class FrameKVError(Exception):
    exit_code = 1


class StructuralError(FrameKVError, ValueError):
    """Shape, ordering or identity mismatch between inputs."""

    exit_code = 3


class ConfigError(FrameKVError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class BudgetViolation(FrameKVError, RuntimeError):
    """A bounded policy exceeded its token budget."""

    exit_code = 3


class ContainerError(FrameKVError, IOError):
    """Unreadable, corrupt, or version-incompatible binary container."""

    exit_code = 4
