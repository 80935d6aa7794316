"""Exception hierarchy. Each category maps to a CLI exit code."""


class FlexArmError(Exception):
    exit_code = 1


class ValidationError(FlexArmError, ValueError):
    exit_code = 2


class SingularConfigurationError(FlexArmError):
    exit_code = 3


class SolverError(FlexArmError):
    exit_code = 3


class NumericalIntegrationError(FlexArmError):
    """Raised when a quadrature or time integration produces unusable values."""

    exit_code = 4

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class CertificationError(FlexArmError):
    exit_code = 5


class TrainingError(FlexArmError):
    exit_code = 6
