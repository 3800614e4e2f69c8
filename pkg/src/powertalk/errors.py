"""Exception and warning types shared across the package."""


class PowerTalkError(Exception):
    """Base class for all errors raised by powertalk."""

    kind = "powertalk-error"


class InvalidParameterError(PowerTalkError, ValueError):
    kind = "invalid-parameter"


class InvalidSwingError(InvalidParameterError):
    kind = "invalid-swing"


class InvalidArgumentError(PowerTalkError, ValueError):
    kind = "invalid-argument"


class InvalidModeError(PowerTalkError, ValueError):
    kind = "invalid-mode"


class ConstraintError(PowerTalkError, ValueError):
    kind = "constraint"


class NoSolutionError(PowerTalkError, ArithmeticError):
    kind = "no-solution"


class VoltageCollapseError(NoSolutionError):
    kind = "voltage-collapse"


class SizeLimitError(PowerTalkError, ValueError):
    kind = "size-limit"


class ScenarioError(PowerTalkError, ValueError):
    kind = "scenario"


class PowerTalkWarning(UserWarning):
    """Soft validation problems (parameters outside their typical range)."""
