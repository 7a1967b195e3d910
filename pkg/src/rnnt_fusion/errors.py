"""Shared exception types. Each maps to a distinct CLI exit code."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class VocabularyError(KeyError):
    """Token id or word outside the vocabulary."""


class FingerprintMismatchError(ValueError):
    """Vocabulary fingerprints of two components disagree."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is corrupt, truncated, or has the wrong magic/version."""


class CheckpointKindError(TypeError):
    """Checkpoint holds a different model kind than the caller expects."""


class SessionError(RuntimeError):
    """Streaming decode session used out of protocol (e.g. chunk after flush)."""


class OracleSizeError(ValueError):
    """Brute-force oracle asked to enumerate an instance that is too large."""


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the offending line number."""


class CorpusSpecError(ValueError):
    """Corpus spec constraints cannot be satisfied (e.g. rare-word caps)."""
