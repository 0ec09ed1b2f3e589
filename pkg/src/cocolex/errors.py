"""Exception types raised across the package."""


class CocolexError(Exception):
    """Base class for all package errors."""


class InvalidLogits(CocolexError, ValueError):
    pass


class VocabMismatch(CocolexError, ValueError):
    pass


class InvalidPenalty(CocolexError, ValueError):
    pass


class ShapeError(CocolexError, ValueError):
    pass


class EmptyIndex(CocolexError, ValueError):
    pass


class EmptyNeighbors(CocolexError, ValueError):
    pass


class DegenerateVocabulary(CocolexError, ValueError):
    pass


class InvalidConfidence(CocolexError, ValueError):
    pass


class EmptyPrompt(CocolexError, ValueError):
    pass


class InvalidToken(CocolexError, ValueError):
    pass


class InvalidChunking(CocolexError, ValueError):
    pass


class EmptyQuery(CocolexError, ValueError):
    pass


class EmptyCorpus(CocolexError, ValueError):
    pass


class InsufficientData(CocolexError, ValueError):
    pass


class MissingBaseline(CocolexError, KeyError):
    pass


class PromptTooLong(CocolexError, ValueError):
    pass


class ConfigError(CocolexError, ValueError):
    pass


class SnapshotError(CocolexError, ValueError):
    pass


class DatasetError(CocolexError, ValueError):
    """Malformed dataset content; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
