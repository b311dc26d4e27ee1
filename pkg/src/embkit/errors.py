"""Exception hierarchy shared by all embkit modules."""


class EmbkitError(Exception):
    """Base class for every error raised by embkit."""


# core model
class EmptyInput(EmbkitError):
    pass


class DegenerateNorm(EmbkitError):
    pass


class ShapeMismatch(EmbkitError):
    pass


class BadMagic(EmbkitError):
    pass


class VersionMismatch(EmbkitError):
    pass


class TruncatedFile(EmbkitError):
    pass


# loss
class TemperatureNonPositive(EmbkitError):
    pass


class NotSquare(ShapeMismatch):
    pass


# miner
class DuplicateId(EmbkitError):
    pass


class PositiveMissingFromIndex(EmbkitError):
    pass


class PoolTooSmall(EmbkitError):
    pass


# datagen
class InsufficientDocuments(EmbkitError):
    pass


class TransportError(EmbkitError):
    pass


class EmptyResponse(EmbkitError):
    pass


# eval
class MissingFile(EmbkitError):
    pass


class DanglingReference(EmbkitError):
    def __init__(self, message: str, ref_id: str):
        super().__init__(message)
        self.ref_id = ref_id


class NonPositiveGrade(EmbkitError):
    pass


class DuplicateInRanking(EmbkitError):
    pass


class EmptyGroup(EmbkitError):
    pass


# trainer
class StepOutOfRange(EmbkitError):
    pass


class NonFiniteGradient(EmbkitError):
    def __init__(self, message: str, tensor: str):
        super().__init__(message)
        self.tensor = tensor


class InsufficientData(EmbkitError):
    pass


class EmptySource(EmbkitError):
    pass


# cli
class NoRunsFound(EmbkitError):
    pass


class ManifestMismatch(EmbkitError):
    pass
