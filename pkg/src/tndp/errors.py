"""Exception types raised across the package."""


class DisconnectedGraphError(ValueError):
    """The street graph has at least one unreachable node pair."""


class BenchmarkFormatError(ValueError):
    """A benchmark or city file could not be parsed or failed validation."""


class InvalidNetworkError(ValueError):
    """A route is not a simple path over street edges."""


class DegenerateNetworkError(ValueError):
    """No demand is served by the network, so passenger cost is undefined."""


class IllegalActionError(ValueError):
    """An action outside the legal action set was applied to an MDP state."""


class CheckpointError(ValueError):
    """A policy checkpoint is corrupt or has an unsupported layout version."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss or activation appeared during training."""
