"""Exception hierarchy shared by every stage of the workflow.

Each class maps to one CLI exit-code family (see ``EXIT_CODES``).
"""


class BraggReiError(Exception):
    exit_code = 1


class ConfigError(BraggReiError):
    exit_code = 3


class ConfigInvalid(ConfigError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"invalid config field {field!r}" + (f": {message}" if message else ""))


class BadManifestField(ConfigError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"bad manifest field {field!r}" + (f": {message}" if message else ""))


class BadRange(ConfigError):
    pass


class UnknownScenario(ConfigError):
    pass


class IOFailure(BraggReiError):
    exit_code = 4


class MissingFile(IOFailure):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing file: {self.path}")


class SizeMismatch(IOFailure):
    def __init__(self, path, expected, actual):
        self.path = str(path)
        self.expected = expected
        self.actual = actual
        super().__init__(f"size mismatch in {self.path}: expected {expected} bytes, found {actual}")


class BadFormat(IOFailure):
    pass


class ModelMismatch(BraggReiError):
    exit_code = 5


class NumericError(BraggReiError):
    exit_code = 6


class DivergedLoss(NumericError):
    pass


class ZeroVector(NumericError):
    pass


class DataError(BraggReiError):
    exit_code = 7


class EmptyDataset(DataError):
    pass


class EmptyWindow(DataError):
    pass


class EmptyGroup(DataError):
    pass


class PlasticSpreadZero(DataError):
    pass


class ShortLog(DataError):
    pass


class TooFewVectors(DataError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


EXIT_CODES = {
    "ok": 0,
    "error": BraggReiError.exit_code,
    "config": ConfigError.exit_code,
    "io": IOFailure.exit_code,
    "model_mismatch": ModelMismatch.exit_code,
    "numeric": NumericError.exit_code,
    "data": DataError.exit_code,
}
