"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs or configuration (CLI exit 1);
everything else deriving from ``PathforgeError`` is a runtime failure (exit 2).
"""


class PathforgeError(Exception):
    pass


class ValidationError(PathforgeError):
    pass


# slide_io
class MissingFileError(ValidationError, FileNotFoundError):
    pass


class BadMagicError(ValidationError):
    pass


class CorruptIndexError(PathforgeError):
    pass


class InconsistentPyramidError(PathforgeError):
    pass


class BadLevelError(ValidationError, IndexError):
    pass


class ZeroAreaError(ValidationError):
    pass


class UnknownMagnificationError(PathforgeError):
    pass


class IoFailure(PathforgeError, OSError):
    pass


# tissue_seg
class DegenerateHistogramError(PathforgeError):
    pass


class EmptyTissueError(PathforgeError):
    pass


class EmptyMaskError(ValidationError):
    pass


class MalformedGeoJsonError(ValidationError):
    pass


class UnsupportedGeometryError(ValidationError):
    pass


# patch_grid
class MagnificationUnavailableError(ValidationError):
    pass


class NoPatchesError(PathforgeError):
    pass


class BadIndexError(ValidationError, IndexError):
    pass


class VersionMismatchError(ValidationError):
    pass


class TruncatedFileError(PathforgeError):
    pass


# feature_engine
class UnknownEncoderError(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SizeMismatchError(ValidationError):
    pass


class ExternalEncoderFailure(PathforgeError):
    pass


class EmptyStoreError(ValidationError):
    pass


class DimMismatchError(ValidationError):
    pass


# task_splits
class SchemaError(ValidationError):
    pass


class LeakageError(ValidationError):
    pass


class LabelConflictError(ValidationError):
    pass


class RatioWarning(UserWarning):
    pass


class TooFewSamplesError(ValidationError):
    pass


class ClassStarvationError(ValidationError):
    pass


# eval_suite
class SingleClassError(ValidationError):
    pass


class NonFiniteError(PathforgeError, FloatingPointError):
    pass


class NoEventsError(ValidationError):
    pass


class DivergenceError(PathforgeError):
    pass


class EmptyBagError(ValidationError):
    pass


class KTooLargeError(ValidationError):
    pass


class EmptyClassError(ValidationError):
    pass


class DegenerateMarginalsError(PathforgeError):
    pass


class NoComparablePairsError(PathforgeError):
    pass


class MissingFeaturesError(ValidationError):
    pass


class IncompatibleFrameworkError(ValidationError):
    pass


# sweep_orchestrator
class EmptyMatrixError(ValidationError):
    pass


class TaskParseFailure(ValidationError):
    pass


class NoResultsError(PathforgeError):
    pass


class MissingLedgerError(ValidationError, FileNotFoundError):
    pass


# cli
class UsageError(ValidationError):
    pass
