"""Exception taxonomy for the toolkit.

Two broad families matter to callers: configuration problems (bad flag
values, malformed spec files) and data problems (corpora, checkpoints,
or inputs that violate a contract).  The CLI maps ConfigError to exit
code 1, DataError to exit code 2, and anything else to 3.
"""


class TextPoisonError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TextPoisonError):
    """Invalid configuration: bad flag value, malformed spec file."""


class DataError(TextPoisonError):
    """Input data violates a contract."""


class ParseError(DataError):
    """Malformed record in a corpus file or checkpoint."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionMismatch(DataError):
    """Feature vector length disagrees with the expected dimension."""


class DuplicateId(DataError):
    """Two records share an id."""


class InsufficientVocab(DataError):
    """Vocabulary too small for the requested synthesis."""


class EmptyText(DataError):
    """Text is empty after tokenization."""


class TextTooShort(DataError):
    """Caption has too few tokens to split."""


class EmptyInput(DataError):
    """An operation received no usable inputs."""


class RemoteUnavailable(DataError):
    """Remote embedding service unreachable or returned an error."""


class ZeroVector(DataError):
    """A stored feature vector has zero norm."""


class UntrainedModel(DataError):
    """Operation requires a trained model."""


class EmptyCorpus(DataError):
    """Corpus contains no pairs."""


class CorpusTooSmall(DataError):
    """Corpus smaller than one training batch."""


class DegenerateBatch(DataError):
    """Contrastive batch with fewer than two pairs."""


class UnknownClass(DataError):
    """Class label absent from the corpus."""


class UnknownImage(DataError):
    """Image id absent from the corpus."""


class EmptyRankable(DataError):
    """No caption in the pool survived the ranking preconditions."""


class NoDonorTexts(DataError):
    """No non-target-class captions available for backdoor construction."""


class EmptyTargets(DataError):
    """Attack success evaluation received no targets."""


class EmptyGallery(DataError):
    """Retrieval over an empty image gallery."""


class NoValidNgrams(DataError):
    """Every evaluated text is shorter than the n-gram order."""
