"""Exception hierarchy shared by every stage of the pipeline."""


class CpcAsrError(Exception):
    """Base class for all package errors."""


class IoError(CpcAsrError, OSError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"I/O error at {self.path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


# audio / corpus


class WavError(CpcAsrError):
    pass


class NotWav(WavError):
    pass


class UnsupportedFormat(WavError):
    pass


class Truncated(WavError):
    pass


class ParseError(CpcAsrError):
    def __init__(self, line, message=""):
        self.line = line
        super().__init__(f"line {line}: {message}" if message else f"line {line}")


class DuplicateId(CpcAsrError):
    pass


class EmptyTranscript(CpcAsrError):
    pass


class EmptySplit(CpcAsrError):
    pass


class SampleRateMismatch(CpcAsrError):
    pass


# features / models


class TooShort(CpcAsrError):
    pass


class SequenceTooShort(TooShort):
    pass


class ShapeMismatch(CpcAsrError):
    pass


class NonScalarLoss(CpcAsrError):
    pass


# CTC / probe


class InfeasibleLength(CpcAsrError):
    pass


class BlankInTargets(CpcAsrError):
    pass


class TooLarge(CpcAsrError):
    pass


class AllUtterancesInfeasible(CpcAsrError):
    pass


# evaluation


class LengthMismatch(CpcAsrError):
    pass


class EmptyReference(CpcAsrError):
    pass


# cli


class ConfigError(CpcAsrError):
    """Carries every violation found in one validation pass."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class CheckpointError(CpcAsrError):
    pass
