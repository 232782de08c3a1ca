"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 for user/config errors, 2 for data/format errors, 3 for internal
invariant violations.
"""


class VoxelSegError(Exception):
    exit_code = 3


class ConfigError(VoxelSegError):
    exit_code = 1


class DataError(VoxelSegError):
    exit_code = 2


class InvariantError(VoxelSegError):
    exit_code = 3


# NIfTI container
class NiftiError(DataError):
    pass


class BadMagic(NiftiError):
    pass


class BadHeaderSize(NiftiError):
    pass


class HeaderPairUnsupported(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedPayload(NiftiError):
    pass


# preprocessing and archives
class UnexpectedLabel(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class NonFiniteInput(DataError):
    pass


class WindowOutOfBounds(ConfigError):
    pass


class EmptyDataset(DataError):
    pass


class CorruptArchive(DataError):
    pass


class VersionMismatch(DataError):
    pass


class MalformedCsv(DataError):
    pass


class MalformedManifest(DataError):
    pass


# numerics
class ShapeMismatch(InvariantError):
    pass


class OddSpatialDim(InvariantError):
    pass


class BadRate(ConfigError):
    pass


class BadConfig(ConfigError):
    pass


class StaleCache(InvariantError):
    pass


class NonFiniteLoss(InvariantError):
    pass
