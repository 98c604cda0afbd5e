"""Exception taxonomy shared by all modules.

Config problems exit the CLI with code 1, everything else with code 2.
"""


class GrounderError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GrounderError):
    """Operand shapes violate an operation's contract."""


class MaskError(GrounderError):
    """A mask leaves no valid entry where at least one is required."""


class ContractError(GrounderError):
    """A precondition other than shape/mask compatibility was violated."""


class ConfigError(GrounderError):
    """Bad configuration key, value, or inconsistent hyperparameters."""


class FormatError(GrounderError):
    """Malformed checkpoint or dataset file."""


class GenerationError(GrounderError):
    """Scene or expression synthesis failed after exhausting retries."""
