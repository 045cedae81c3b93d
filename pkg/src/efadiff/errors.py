"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: validation problems (bad shapes, bad
config, unknown words) exit 2, numerical failures exit 3, threshold gates
exit 4.
"""


class EfaError(Exception):
    """Base class for all package errors."""


class ShapeError(EfaError, ValueError):
    """Tensor dimensions do not line up for the requested operation."""


class ValidationError(EfaError, ValueError):
    """Input violates a declared precondition (non-binary mask, bad config...)."""


class DomainError(EfaError, ValueError):
    """Value outside the operation's domain (unknown attribute, t out of range)."""


class VocabularyError(EfaError, KeyError):
    """A prompt word is not present in the vocabulary."""

    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"word not in vocabulary: {self.word!r}"


class EvaluationError(EfaError, RuntimeError):
    """A metric or gradient check could not be evaluated (non-finite loss, all abstained)."""


class TrainingError(EfaError, RuntimeError):
    """Training diverged or produced non-finite values."""


class CompatibilityError(EfaError, RuntimeError):
    """Checkpoint/adapter architecture hashes do not match."""
