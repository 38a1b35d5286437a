"""Exception types shared across the package."""


class GenretagError(Exception):
    """Base class for all package errors."""


# --- audio / features ---------------------------------------------------


class UnreadableFile(GenretagError):
    """The file is missing, empty, truncated, or fails to decode."""


class UnsupportedFormat(GenretagError):
    """The file is not a container the decoder understands."""


class ClipTooShort(GenretagError):
    """The clip is shorter than the requested analysis window or crop."""


class ShapeMismatch(GenretagError):
    """Array arguments have incompatible shapes."""


# --- dataset -------------------------------------------------------------


class MissingFile(GenretagError):
    """A manifest or fold file references a track that does not exist."""


class UnknownGenre(GenretagError):
    """A genre label outside the 10-class taxonomy."""


class EmptyManifest(GenretagError):
    """No records to split, or an invalid validation fraction."""


class MissingClassInPool(GenretagError):
    """The real pool lacks a genre required for pair sampling."""


# --- model ---------------------------------------------------------------


class InvalidConfig(GenretagError):
    """Model configuration violates an architectural constraint."""


class CorruptCheckpoint(GenretagError):
    """Checkpoint archive is damaged or incomplete."""


class ConfigMismatch(GenretagError):
    """Checkpoint architecture differs from the requested configuration."""


# --- losses --------------------------------------------------------------


class InvalidLabel(GenretagError):
    """A class index outside the valid range."""


class InvalidGamma(GenretagError):
    """Loss balance factor outside [0, 1]."""


# --- trainer -------------------------------------------------------------


class RegimeConfigError(GenretagError):
    """Regime and supplied data or checkpoint do not match."""


# --- evaluation ----------------------------------------------------------


class EmptySplit(GenretagError):
    """Evaluation requested on an empty record list."""


class TooFewFolds(GenretagError):
    """Aggregation needs at least two fold results."""


class TooFewPoints(GenretagError):
    """Projection needs at least five points."""


# --- prompt pipeline -----------------------------------------------------


class EmptyDescription(GenretagError):
    """A track description must be non-empty."""


class ClientError(GenretagError):
    """Chat-completion request failed after exhausting retries."""


class QuotaExceeded(GenretagError):
    """The chat-completion service reported an exhausted quota."""


class AdapterUnavailable(GenretagError):
    """The audio generation adapter cannot be reached or launched."""


class GenerationFailed(GenretagError):
    """The audio generation adapter failed for a prompt."""

    def __init__(self, message: str, prompt: str | None = None):
        super().__init__(message)
        self.prompt = prompt
