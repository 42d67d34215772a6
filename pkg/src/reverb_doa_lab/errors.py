"""Exception types raised across the toolkit."""


class DoaLabError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DoaLabError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(DoaLabError, ValueError):
    """An argument lies outside the domain of a density or transform."""


class ContractError(DoaLabError, ValueError):
    """A caller violated an operation's precondition."""


class NumericalError(DoaLabError, FloatingPointError):
    """Non-finite values appeared where finite values are required."""


class ConfigError(DoaLabError, ValueError):
    """Invalid configuration (preset, training or CLI options)."""


class GeometryError(DoaLabError, ValueError):
    """Positions outside the room, or coincident source and microphone."""


class InfeasibleRoomError(DoaLabError, ValueError):
    """Requested reverberation time cannot be realized by the room geometry."""


class DegenerateInputError(DoaLabError, ValueError):
    """Input carries no usable information (e.g. a silent source)."""


class InsufficientLengthError(DoaLabError, ValueError):
    """Signal or impulse response too short for the requested analysis."""


class ArtifactError(DoaLabError, OSError):
    """A stored dataset, feature set or checkpoint is missing or malformed."""
