"""
Exception and warning types shared by the lab modules.
"""


class CrlabError(Exception):
    pass


class ValidationError(CrlabError, ValueError):
    """
    Invalid parameters or arguments. The message names the violated constraint.
    """


class DatasetFormatError(ValidationError):
    """
    Malformed dataset or model file. `line` is 1-based.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionError(ValidationError):
    pass


class EmptyGroupError(ValidationError):
    def __init__(self, group):
        self.group = group
        super().__init__(f"context group {group} has no examples")


class MissingMaskError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class UnsupportedModeError(CrlabError):
    pass


class DivergenceError(CrlabError, ArithmeticError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"objective became non-finite ({value}) at step {step}")


class TheoryRangeWarning(UserWarning):
    """
    Parameters outside the range the closed-form results assume.
    """
