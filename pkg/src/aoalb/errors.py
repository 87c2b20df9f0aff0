"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`AoalbError`.  The three
intermediate classes carry the process exit code used by the CLI.
"""


class AoalbError(Exception):
    exit_code = 1


class ValidationError(AoalbError, ValueError):
    """Bad arguments, configuration or preconditions."""

    exit_code = 2


class DataError(AoalbError):
    """Unreadable, corrupt or insufficient data."""

    exit_code = 3


class NumericalError(AoalbError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy answer."""

    exit_code = 4


# linalg
class NonSquare(ValidationError):
    pass


class NotHermitian(ValidationError):
    pass


class EmptySnapshotBlock(ValidationError):
    pass


class NoConvergence(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


# neural
class DimensionMismatch(ValidationError):
    pass


class StaleCache(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class NonFiniteInput(NumericalError):
    pass


# channel simulation
class InvalidSpec(ValidationError):
    pass


class AzimuthOutOfRange(ValidationError):
    pass


# feature extraction
class TooManySources(ValidationError):
    pass


class DegenerateCovariance(NumericalError):
    pass


class TooShort(DataError):
    pass


# offline and shared learner errors
class DegenerateDataset(DataError):
    pass


class MissingRegion(DataError):
    pass


class FoldTooSmall(DataError):
    pass


class TooFewSamples(DataError):
    pass


class IndexMismatch(DataError):
    pass


class UnknownClass(DataError):
    pass


class ClassSpaceMismatch(DataError):
    pass


# streaming
class InvalidDelta(ValidationError):
    pass


class EmptyStream(DataError):
    pass


# few-shot
class InsufficientSamples(DataError):
    pass


# augmentation
class TooManyClasses(ValidationError):
    pass


class UncoveredClass(DataError):
    pass


# storage and cli
class IoError(DataError):
    pass


class CorruptInput(DataError):
    pass


class MissingArtifacts(DataError):
    pass


class ArtifactKindMismatch(ValidationError):
    pass
