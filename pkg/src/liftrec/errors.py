"""Exception hierarchy shared across the package."""


class LiftError(Exception):
    """Base class for every error raised by liftrec."""


# domain model
class EmptyDataset(LiftError):
    pass


class BadFractions(LiftError):
    pass


class BadAnchor(LiftError):
    pass


# ingest
class SchemaError(LiftError):
    pass


class ParseError(LiftError):
    pass


# ndcore
class ShapeError(LiftError):
    pass


class NotScalarError(LiftError):
    pass


class MissingGradError(LiftError):
    pass


class CorruptCheckpointError(LiftError):
    pass


# encoder
class VocabError(LiftError):
    pass


class TooShortError(LiftError):
    pass


class EmptyCorpusError(LiftError):
    pass


# retriever
class IndexEmptyError(LiftError):
    pass


class CorruptDatastoreError(LiftError):
    pass


# eval
class UndefinedMetricError(LiftError):
    pass


class TooFewQueriesError(LiftError):
    pass


# cli
class ConfigError(LiftError):
    pass


class StageOrderError(LiftError):
    pass


class AuditFailure(LiftError):
    pass
