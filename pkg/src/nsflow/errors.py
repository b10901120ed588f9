"""Exception families. The CLI maps each family to one exit code."""


class NsflowError(Exception):
    """Base class for all package errors."""


class ConfigError(NsflowError):
    """Bad configuration file or invalid config value. Exit code 2."""


class DataError(NsflowError):
    """Dataset loading, schema, or generation failure. Exit code 3."""


class TrainingError(NsflowError):
    """Failure inside the training loop. Exit code 4."""


class CheckpointError(NsflowError):
    """Unreadable or incompatible checkpoint. Exit code 5."""


# -- data family -------------------------------------------------------------

class MissingColumn(DataError):
    pass


class UnparseableValue(DataError):
    pass


class UnknownLabel(DataError):
    pass


class InvalidConfig(ConfigError):
    pass


class TooFewSamples(DataError):
    pass


class EmptyDataset(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DegenerateGroups(DataError):
    pass


class DegenerateVariance(DataError):
    pass


class InconsistentFeatureSets(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class InsufficientSamples(DataError):
    pass


# -- numeric / training family -----------------------------------------------

class ShapeMismatch(NsflowError):
    pass


class NonFiniteValue(NsflowError):
    pass


class NonFiniteInput(NonFiniteValue):
    pass


class NonFiniteGradient(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


# -- checkpoint / report family ----------------------------------------------

class VersionMismatch(CheckpointError):
    pass


class IoFailure(NsflowError):
    pass


class UnknownFormat(NsflowError):
    pass
