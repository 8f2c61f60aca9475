"""Exception hierarchy shared by every stage of the calibration pipeline.

Each class carries the CLI exit code it maps to, so the command-line layer
can translate failures without a lookup table of its own.
"""


class CalibrationError(Exception):
    exit_code = 1

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class InvalidInputError(CalibrationError, ValueError):
    exit_code = 2


class ParseError(InvalidInputError):
    exit_code = 2


class OutOfFovError(InvalidInputError):
    """A 3D point lies further from the optical axis than the lens can image."""


class OutOfRangeError(InvalidInputError):
    """A pixel radius is outside the invertible range of the radial polynomial."""


class InsufficientDataError(CalibrationError):
    exit_code = 3


class DegenerateConfigurationError(InsufficientDataError):
    """Correspondences do not constrain the model (e.g. all from one frame)."""


class EstimationFailedError(InsufficientDataError):
    pass


class CalibrationFailedError(InsufficientDataError):
    pass


class InfeasibleScenarioError(InsufficientDataError):
    pass


class NumericFailureError(CalibrationError):
    exit_code = 4

    def __init__(self, message: str, last_x=None, stage: str | None = None):
        super().__init__(message, stage)
        self.last_x = last_x


class RankDeficiencyError(NumericFailureError):
    def __init__(self, message: str, block: str | None = None, last_x=None, stage=None):
        super().__init__(message, last_x=last_x, stage=stage)
        self.block = block


class AmbiguousDecompositionError(NumericFailureError):
    pass


class AtInfinityError(NumericFailureError):
    pass


class UnreachableCameraError(CalibrationError):
    exit_code = 5

    def __init__(self, message: str, cameras=(), stage: str | None = None):
        super().__init__(message, stage)
        self.cameras = tuple(cameras)


class IllConditionedWarning(UserWarning):
    pass
