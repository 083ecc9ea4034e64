"""Exception types shared across the package."""


class GrainsegError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(GrainsegError):
    """An argument violated a documented precondition (shape, bounds, ...)."""


class EmptyMaskError(GrainsegError):
    """An operation required a nonempty mask but got an empty one."""


class NoErrorRegion(GrainsegError):
    """Prediction and ground truth agree; no corrective click can be derived."""


class EmptyStoreError(GrainsegError):
    """The proposal store has no records to sample or train from."""


class CheckpointError(GrainsegError):
    """A checkpoint file is missing, unreadable, or incompatible."""
