"""Exception types shared across the toolkit."""


class NewsfuseError(Exception):
    """Base class for all toolkit errors."""


class ConfigInvalid(NewsfuseError):
    """A configuration object violates one of its invariants."""


class MalformedRow(NewsfuseError):
    """A data file row could not be parsed.

    Carries the 1-based line number of the offending row.
    """

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DuplicateArticleId(NewsfuseError):
    """Two catalog rows share the same article id."""


class UnresolvableArticle(NewsfuseError):
    """An interaction references an article id missing from the catalog."""


class InsufficientSessions(NewsfuseError):
    """Too few sessions to produce a chronological split."""


class EmptyTrainingSet(NewsfuseError):
    """A model was asked to fit on zero sessions."""


class NoTrainableEvents(NewsfuseError):
    """Training data contains no usable prediction events."""


class EmptyPrefixAfterFiltering(NewsfuseError):
    """A scoring prefix has no items left after vocabulary filtering."""


class CatalogTooSmall(NewsfuseError):
    """Not enough eligible items to sample the requested negatives."""


class UnparseableResponse(NewsfuseError):
    """The labeling endpoint returned something other than the two accepted words."""


class TransportError(NewsfuseError):
    """The labeling endpoint could not be reached or timed out."""


class MismatchedEventSets(NewsfuseError):
    """Reports being compared were not computed over the same prediction events."""


class RegistryMismatch(NewsfuseError):
    """A fusion checkpoint does not belong to the registry it is loaded against."""


class CheckpointError(NewsfuseError):
    """A checkpoint file is missing, truncated, or of the wrong format."""
