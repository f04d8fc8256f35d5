"""Exception types shared across the package."""


class XlingcapError(Exception):
    """Base class for all package errors."""


class ShapeError(XlingcapError):
    """Operand shapes do not conform to the requested operation."""


class NumericError(XlingcapError):
    """Domain violation or non-finite value in a numeric operation."""


class ContractError(XlingcapError):
    """A documented precondition of an operation was violated."""


class ParseError(XlingcapError):
    """Sentence does not conform to the toy grammar."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at token {position})"
        super().__init__(message)


class FormatError(XlingcapError):
    """Malformed on-disk document (embedding file, graph JSON, checkpoint)."""


class VocabularyError(XlingcapError):
    """A token is missing from the vocabulary or embedding table."""


class TrainingDiverged(XlingcapError):
    """Loss became non-finite during training."""
