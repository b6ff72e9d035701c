"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class OODSError(Exception):
    exit_code = 1


class ConfigError(OODSError, ValueError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class DataError(OODSError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MixedLabeling(DataError):
    pass


class EmptyVocab(DataError):
    pass


class TooFewSamples(DataError):
    pass


class OODInTraining(DataError):
    pass


class UnlabeledData(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class OneClassOnly(DataError):
    pass


class MixedDetectors(DataError):
    pass


class MissingStats(DataError):
    pass


class TokenOutOfRange(DataError):
    pass


class CorruptFile(DataError):
    pass


class VersionMismatch(DataError):
    pass


class NumericError(OODSError, ArithmeticError):
    exit_code = 4


class DimensionMismatch(NumericError, ValueError):
    pass


class NotSPD(NumericError):
    pass


class FitFailed(NumericError):
    pass


class DegenerateData(NumericError):
    pass


class Diverged(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass
