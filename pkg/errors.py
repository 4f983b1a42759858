"""Exception types shared by every bimot module.

Two families: contract errors (a caller broke a precondition, exit code 1) and
configuration errors (the run cannot start as configured, exit code 2).
"""


class BimotError(Exception):
    """Base class for all errors raised by bimot"""
    exit_code = 1


# Contract errors

class ContractError(BimotError):
    """A precondition of an operation was violated"""


class DimensionError(ContractError):
    """Operand shapes are incompatible"""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        named = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {named}")


class TokenIndexError(ContractError, IndexError):
    """An id or index lies outside the table it addresses"""


class EmptyLossError(ContractError):
    """A masked loss was requested with no position masked in"""


class ContextLengthError(ContractError):
    """A sequence is longer than the model context"""


class LengthError(ContractError):
    """A clip length lies outside the configured bounds"""


class TemplateError(ContractError):
    """An instruction template is missing a required slot"""


class OracleInvalidError(ContractError):
    """A gradient oracle was given a nondeterministic function"""


class NaNGradientError(ContractError):
    """A non-finite gradient reached the optimizer"""

    def __init__(self, param_name):
        self.param_name = param_name
        super().__init__(f"non-finite gradient in parameter '{param_name}'")


class EvaluationError(ContractError):
    """A metric cannot be computed on the given inputs"""


class DataError(ContractError):
    """Input data is malformed or non-finite"""


# Configuration errors

class ConfigError(BimotError):
    """Configuration values are invalid"""
    exit_code = 2


class UnknownClassError(ConfigError):
    """A motion class name is not part of the primitive set"""


class PrerequisiteError(ConfigError):
    """A checkpoint or artifact needed by this step does not exist"""


class EvaluatorUnfitError(ConfigError):
    """The contrastive evaluator is missing or did not reach its separation margin"""
