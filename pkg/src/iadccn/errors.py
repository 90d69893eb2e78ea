"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so new errors should subclass one of
the three roots below rather than ``Exception`` directly.
"""


class IADCCNError(Exception):
    pass


class ConfigurationError(IADCCNError, ValueError):
    """Invalid configuration or argument combination (exit code 2)."""


class DimensionError(IADCCNError, ValueError):
    """Tensor shapes that do not line up."""


class DataError(IADCCNError, ValueError):
    """Bad input data: annotations, images, binary files (exit code 3)."""


class ParseError(DataError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class InventoryError(DataError):
    """Weight file does not match the parameter inventory of a config."""


class GraphError(IADCCNError, RuntimeError):
    """Misuse of the differentiation graph (double backward, detached loss)."""


class NumericError(IADCCNError, ArithmeticError):
    """Non-finite values or a failed numeric check (exit code 4)."""
