"""
Exception types raised by microbench
"""


class MicrobenchError(Exception):
    """Base class for every error raised by this package"""


class ConfigError(MicrobenchError, ValueError):
    """A configuration object failed validation"""


class PgmFormatError(MicrobenchError):
    """Malformed or unsupported PGM file"""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DomainError(MicrobenchError, ValueError):
    """Argument outside the domain an operation is defined on"""


class DegenerateInputError(MicrobenchError, ValueError):
    """Input that has no meaningful result, e.g. normalizing a zero vector"""


class InsufficientDataError(MicrobenchError, ValueError):
    """Not enough samples for an estimator"""


class KittiParseError(MicrobenchError):
    """Malformed line in a KITTI poses or calibration file"""

    def __init__(self, message, path, line):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ValidationError(MicrobenchError):
    """Loaded data violates an invariant (e.g. non-orthonormal rotation)"""


class StructuralError(MicrobenchError):
    """Shapes or tensors that do not match a network description"""

    def __init__(self, message, name=None):
        super().__init__(f"{name}: {message}" if name else message)
        self.name = name


class TrainingDivergedError(MicrobenchError):
    """Loss became non-finite during optimization"""

    def __init__(self, message, step):
        super().__init__(f"{message} at step {step}")
        self.step = step


class SchemaError(MicrobenchError, ValueError):
    """Results do not match the schema of the requested output"""
