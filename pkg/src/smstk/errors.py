"""Exception hierarchy for the toolkit."""


class SmsError(Exception):
    """Base class for all toolkit errors."""


class InvalidStateError(SmsError):
    """State violates a structural invariant (e.g. non-unit quaternion)."""


class ValidationError(SmsError):
    """A user-supplied value is outside its documented domain."""


class UnsupportedDimensionError(SmsError):
    """Operation undefined for this arm dimension (e.g. entropy with n=1)."""


class SingularConfigurationError(SmsError):
    """Configuration-dependent matrix is singular or too ill-conditioned."""


class NumericalConditioningError(SmsError):
    """A matrix that should be well conditioned is not."""


class ControllerDivergenceError(SmsError):
    """Closed-loop tracking error exceeded the divergence guard."""


class InfeasibleStepError(SmsError):
    """No candidate joint velocity satisfied the step constraints.

    Carries the best-violation constraint report for diagnostics.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InfeasiblePlanError(SmsError):
    """An emitted plan failed constraint or terminal-window requirements."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class ConfigError(SmsError):
    """Scenario configuration failed to parse or validate."""
