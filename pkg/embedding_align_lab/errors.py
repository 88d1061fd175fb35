"""Exception hierarchy shared by every lab tool."""


class AlignLabError(Exception):
    """Base class for all handled lab errors."""


class DimensionError(AlignLabError):
    """Operand shapes do not agree."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ContractError(AlignLabError):
    """A precondition of an operation was violated."""


class ConfigurationError(AlignLabError):
    """Invalid model, corpus or run configuration."""


class VocabularyError(AlignLabError):
    """Token id outside the vocabulary."""


class DegenerateEmbeddingError(AlignLabError):
    """Zero vector cannot be normalized."""


class TrainingDivergedError(AlignLabError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class NumericError(AlignLabError):
    def __init__(self, step, message="non-finite gradient"):
        self.step = step
        super().__init__(f"{message} at step {step}")


class ArtifactFormatError(AlignLabError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (byte offset {offset})")
