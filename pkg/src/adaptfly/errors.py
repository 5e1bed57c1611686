"""Exception hierarchy shared by all adaptfly modules."""


class AdaptflyError(Exception):
    """Base class for all library errors."""


class ConfigError(AdaptflyError):
    """Invalid configuration value or precondition violation."""


class CompositionError(AdaptflyError):
    """Prompt/input shapes are incompatible for composition."""


class OracleError(AdaptflyError):
    """Oracle received inputs it cannot evaluate."""


class FitnessError(AdaptflyError):
    """A fitness evaluation produced a non-finite value."""


class StatsError(AdaptflyError):
    """Activation statistics are malformed or incompatible."""


class CalibrationError(AdaptflyError):
    """Not enough data to calibrate a detection threshold."""


class DegenerateKeyError(AdaptflyError):
    """A key or query vector has zero norm and cannot be normalized."""


class EmptyPoolError(AdaptflyError):
    """Query issued against a pool with no entries."""


class DeferredNotResolvedError(AdaptflyError):
    """A deferred pool entry was used where a concrete prompt is required."""


class ResolutionError(AdaptflyError):
    """Deferred-entry resolution failed (missing or expired provenance)."""


class DistillError(AdaptflyError):
    """Distillation objective became non-finite."""


class ProtocolError(AdaptflyError):
    """Malformed wire frame. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
