"""Exception hierarchy.

Every error carries a short machine-readable ``code``; the CLI maps the
three families below onto its exit codes.
"""

from __future__ import annotations


class BLoraError(Exception):
    code = "error"

    def __init__(self, message: str, *, code: str | None = None) -> None:
        super().__init__(message)
        if code is not None:
            self.code = code


class UsageError(BLoraError):
    """Bad flags or arguments (CLI exit 1)."""

    code = "usage"


class FormatError(BLoraError):
    """Malformed or unreadable input (CLI exit 2)."""

    code = "format"


class InvariantError(BLoraError):
    """A well-formed input that violates a structural contract (CLI exit 3)."""

    code = "invariant"


class ShapeError(InvariantError, ValueError):
    code = "shape-mismatch"


class DTypeError(InvariantError, ValueError):
    code = "dtype"


class ZeroNormError(InvariantError, ValueError):
    code = "zero-norm"


class TruncatedFileError(FormatError):
    code = "truncated"


class UnrecognizedKeyError(FormatError, KeyError):
    code = "unrecognized-key"

    def __init__(self, key: str) -> None:
        super().__init__(f"unrecognized adapter key: {key!r}")
        self.key = key

    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0]


class EmptyBlockError(InvariantError):
    code = "empty-block"


class OverlapError(InvariantError):
    code = "overlap"


class OrphanFactorError(FormatError):
    code = "orphan-factor"


class RankMismatchError(FormatError):
    code = "rank-mismatch"


class MissingLabelError(FormatError, KeyError):
    code = "missing-label"

    def __str__(self) -> str:
        return self.args[0]


class NonFiniteLossError(BLoraError, FloatingPointError):
    code = "non-finite-loss"
