"""Exception types shared across the package."""


class TreeError(ValueError):
    """A paragraph tree is structurally invalid or a slice is out of range."""


class ProtocolError(RuntimeError):
    """An operation was invoked in a state its contract forbids."""


class CapacityError(RuntimeError):
    """The block pool cannot satisfy an allocation."""


class ScriptMismatch(RuntimeError):
    """A decode context diverged from the script that should have produced it."""


class SimulationError(RuntimeError):
    """A simulation config admits no valid schedule."""
