"""Exception hierarchy shared by every module of the package."""


class HandIdError(Exception):
    """Base class; the CLI maps these to a module-attributed exit status."""

    module = "handid"


class DimensionError(HandIdError, ValueError):
    module = "diffcore"


class ConfigError(HandIdError, ValueError):
    module = "config"

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class BatchSizeError(HandIdError, ValueError):
    module = "diffcore"


class NumericalError(HandIdError, FloatingPointError):
    module = "diffcore"


class StateError(HandIdError, RuntimeError):
    module = "diffcore"


class FormatError(HandIdError, ValueError):
    module = "io"


class GeometryError(HandIdError, ValueError):
    module = "tps"

    def __init__(self, message, region=None):
        if region is not None and region not in message:
            message = f"{region}: {message}"
        super().__init__(message)
        self.region = region


class PreprocessingError(HandIdError, ValueError):
    module = "dataset"


class ManifestError(HandIdError, ValueError):
    module = "dataset"


class LoadError(HandIdError, ValueError):
    module = "dataset"


class TrainingError(HandIdError, RuntimeError):
    module = "trainer"


class CheckpointError(HandIdError, ValueError):
    module = "trainer"


class EvaluationError(HandIdError, ValueError):
    module = "matcher_eval"
