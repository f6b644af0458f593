"""Exception taxonomy shared across the package."""


class DissipnetError(Exception):
    """Base class for all package-specific errors."""


class NotSymmetric(DissipnetError):
    """Matrix expected to be symmetric is not, beyond round-off tolerance."""


class NotPSD(DissipnetError):
    """Matrix has an eigenvalue below the negative tolerance."""


class RankDeficient(DissipnetError):
    """X^T X is numerically singular where a full-rank matrix is required."""


class DimensionMismatch(DissipnetError):
    """Operand shapes are inconsistent with the declared system dimensions."""


class TapeMismatch(DissipnetError):
    """A gradient was requested from a tape that did not record the output."""


class NonFiniteState(DissipnetError):
    """Simulation produced NaN/Inf or an entry beyond the divergence bound."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class MissingStates(DissipnetError):
    """Trajectory-level check needs internal states that were not stored."""


class MissingEta(DissipnetError):
    """Reconstruction loss requested but the model has no eta network."""


class InvalidPreset(DissipnetError):
    """Supply-rate preset arguments violate the preset's constraints."""


class ConfigError(DissipnetError):
    """Experiment configuration is malformed or internally inconsistent."""


class FormatError(DissipnetError):
    """On-disk trajectory/dataset file violates the expected format."""
