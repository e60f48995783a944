"""Exception hierarchy. Every error class carries a distinct CLI exit code."""


class VoxtransError(Exception):
    exit_code = 1


class InvalidConfig(VoxtransError):
    exit_code = 2


class UnsupportedFormat(VoxtransError):
    exit_code = 3


class CorruptHeader(VoxtransError):
    exit_code = 4


class ManifestError(VoxtransError):
    exit_code = 5


class EmptyManifest(ManifestError):
    exit_code = 6


class DegenerateRange(VoxtransError):
    exit_code = 7


class TooManyLevels(VoxtransError):
    exit_code = 8


class PatchTooLarge(VoxtransError):
    exit_code = 9


class ModelOutputShapeMismatch(VoxtransError):
    exit_code = 10


class ShapeMismatch(VoxtransError):
    exit_code = 11


class IndivisiblePatch(VoxtransError):
    exit_code = 12


class NaNLoss(VoxtransError):
    exit_code = 13

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class SliceTooSmall(VoxtransError):
    exit_code = 14


class ZeroReference(VoxtransError):
    exit_code = 15


class MissingLabels(VoxtransError):
    exit_code = 16


class AdapterUnavailable(VoxtransError):
    exit_code = 17


class MissingCheckpoint(VoxtransError):
    exit_code = 18


class IOFailure(VoxtransError):
    exit_code = 19


class AlreadyNormalized(VoxtransError):
    exit_code = 20
