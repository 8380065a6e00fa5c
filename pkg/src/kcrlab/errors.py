"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KcrError(Exception):
    exit_code = 1


class ConfigError(KcrError, ValueError):
    pass


class DimensionError(KcrError, ValueError):
    pass


class ArgumentError(KcrError, ValueError):
    pass


class SchemaError(KcrError, ValueError):
    pass


class ParseError(KcrError, ValueError):
    pass


class StalenessError(KcrError, RuntimeError):
    pass


class NumericError(KcrError, ArithmeticError):
    exit_code = 2


class StepSizeError(NumericError):
    pass


class DegenerateKernelError(NumericError):
    pass


class PipelineError(KcrError):
    """Wraps a failure with the phase and epoch where it happened."""

    def __init__(self, phase, epoch, cause):
        super().__init__(f"{phase} epoch {epoch}: {cause}")
        self.phase = phase
        self.epoch = epoch
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
