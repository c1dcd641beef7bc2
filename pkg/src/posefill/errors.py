"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
everything else -> 4.
"""


class PosefillError(Exception):
    """Base class for all package errors."""


class ConfigError(PosefillError):
    """Invalid or unknown configuration; message carries the key path."""


class DataError(PosefillError):
    """Problems with on-disk datasets."""


class ShapeMismatch(PosefillError):
    pass


class InvalidTarget(PosefillError):
    pass


class NoVisibleGroundTruth(PosefillError):
    pass


class DimensionMismatch(PosefillError):
    pass


class ResolutionMismatch(PosefillError):
    pass


class AlreadyAtMaxResolution(PosefillError):
    pass


class ChannelMismatch(PosefillError):
    pass


class LevelCountMismatch(PosefillError):
    pass


class EmptyLevelList(PosefillError):
    pass


class AllPatchesKnown(PosefillError):
    pass


class StageMismatch(PosefillError):
    pass


class FinalStage(PosefillError):
    pass


class NonPSD(PosefillError):
    pass


class TooFewSamples(PosefillError):
    pass


class EmptyDataset(PosefillError):
    pass


class UnknownMetric(ConfigError):
    pass


class MissingAnnotation(DataError):
    pass


class CorruptImage(DataError):
    pass


class SchemaVersionMismatch(DataError):
    pass
