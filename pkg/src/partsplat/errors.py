"""Exception hierarchy. The CLI maps the three bases to exit codes 1/2/3."""


class PartSplatError(Exception):
    """Base class for all package errors."""


class ValidationError(PartSplatError):
    """Bad inputs or violated preconditions (exit code 1)."""


class FileFormatError(PartSplatError):
    """Missing or malformed files (exit code 2)."""


class NumericalError(PartSplatError):
    """Numerically degenerate or unobservable configurations (exit code 3)."""


class InvalidCamera(ValidationError):
    pass


class NonPositiveDepth(NumericalError):
    """Point is behind or on the camera plane (camera-frame z <= 1e-9)."""


class DegenerateConfiguration(NumericalError):
    """Cross-covariance rank < 2: rotation is not identifiable."""


class InvalidSpec(ValidationError):
    pass


class UnknownPart(ValidationError):
    pass


class MissingMotion(ValidationError):
    pass


class InconsistentInput(ValidationError):
    pass


class Unobservable(NumericalError):
    """Part has an empty mask in every view."""


class MissingHistory(ValidationError):
    """Center history for t-1/t-2 not available (t <= 1)."""


class DimensionMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class MissingGroundTruth(FileFormatError):
    pass
