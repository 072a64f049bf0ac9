"""Exception types shared across the package."""


class S2Error(Exception):
    """Base class for all package-specific errors."""


class CapacityError(S2Error, ValueError):
    """Requested mesh level exceeds the supported cap."""


class ShapeError(S2Error, ValueError):
    """Array shapes or mesh levels are inconsistent."""


class AssemblyError(S2Error, RuntimeError):
    """Sparse operator assembly failed (degenerate or non-manifold input)."""


class InputError(S2Error, ValueError):
    """Invalid user-supplied data (empty image, bad labels, ...)."""


class ConfigError(S2Error, ValueError):
    """Inconsistent model or training configuration."""


class TapeError(S2Error, RuntimeError):
    """backward() called without a matching forward() pass."""


class DivergenceError(S2Error, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
