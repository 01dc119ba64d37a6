"""Exception types raised across the package."""


class CLNVCError(Exception):
    """Base class for all package errors."""


class InputError(CLNVCError, ValueError):
    """Invalid data handed to an operation (empty, too short, wrong shape)."""


class ConfigError(CLNVCError, ValueError):
    """Inconsistent configuration or mismatched dimensions."""


class NumericError(CLNVCError, FloatingPointError):
    """Non-finite values appeared in a computation."""


class CheckpointError(CLNVCError):
    """Checkpoint missing, corrupt, or incompatible with the requested config."""
