"""Exception types raised across the package."""


class EquitabError(Exception):
    pass


class ShapeError(EquitabError, ValueError):
    """Operand extents are incompatible."""


class RankError(EquitabError, ValueError):
    """A scalar was required."""


class DegenerateMaskError(EquitabError, ValueError):
    """A softmax row has every position masked out."""


class EncodingError(EquitabError, ValueError):
    """Targets are not valid one-hot rows."""


class ConfigurationError(EquitabError, ValueError):
    pass


class PermutationError(EquitabError, ValueError):
    pass


class IngestionError(EquitabError, ValueError):
    """A CSV file could not be turned into an episode."""


class CapacityError(EquitabError, ValueError):
    """An episode exceeds a fixed model width (p_max or q_max)."""


class EmptyContextError(EquitabError, ValueError):
    """Datapoint attention needs at least one training row."""


class CodebookError(EquitabError, ValueError):
    pass


class CostGuardError(EquitabError, ValueError):
    """Exhaustive permutation enumeration refused for large q."""


class TrainingDivergenceError(EquitabError, FloatingPointError):
    def __init__(self, step, name=None):
        where = f" in {name!r}" if name else ""
        super().__init__(f"non-finite gradient{where} at step {step}")
        self.step = step
        self.name = name


class CheckpointError(EquitabError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointTensorCountError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ConfigParseError(EquitabError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno
