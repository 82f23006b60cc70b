"""Exception hierarchy shared by all modules."""


class MspfError(Exception):
    """Base class for package errors."""


class InvalidParameterError(MspfError, ValueError):
    """A numeric parameter is outside its admissible range."""


class ContractViolationError(MspfError, ValueError):
    """Arguments are inconsistent with an operation's preconditions."""


class ConfigError(MspfError, ValueError):
    """Experiment configuration could not be parsed or validated."""


class NumericError(MspfError, ArithmeticError):
    """An integrator or quadrature produced unusable numbers."""


class FilterCollapseError(MspfError, ArithmeticError):
    """Every particle weight vanished at some assimilation step."""

    def __init__(self, step, message="all particle weights are zero"):
        self.step = step
        super().__init__(f"filter collapse at step {step}: {message}")
