"""Exception hierarchy shared by every AudioFuse module.

Each class carries the category printed on the ``ERROR <category>:`` line and the
process exit code the CLI returns for it.
"""

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class AudioFuseError(Exception):
    category = "internal"
    exit_code = EXIT_USAGE

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(str(self.message).split())
        return f"ERROR {self.category}: {text}"


# Data errors


class FormatError(AudioFuseError):
    category = "format"
    exit_code = EXIT_DATA


class UnsupportedEncodingError(AudioFuseError):
    category = "unsupported-encoding"
    exit_code = EXIT_DATA


class EmptySignalError(AudioFuseError):
    category = "empty-signal"
    exit_code = EXIT_DATA


class ManifestParseError(AudioFuseError):
    category = "manifest"
    exit_code = EXIT_DATA


class LeakageError(AudioFuseError):
    category = "leakage"
    exit_code = EXIT_DATA

    def __init__(self, patient_id: str, splits: list):
        super().__init__(
            f"patient {patient_id!r} appears in more than one split: {sorted(splits)}"
        )
        self.patient_id = patient_id


class InsufficientDataError(AudioFuseError):
    category = "insufficient-data"
    exit_code = EXIT_DATA


class EmptySplitError(AudioFuseError):
    category = "empty-split"
    exit_code = EXIT_DATA


class DataNotFoundError(AudioFuseError):
    category = "not-found"
    exit_code = EXIT_DATA


# Usage / configuration errors


class UsageError(AudioFuseError):
    category = "usage"


class ConfigError(AudioFuseError):
    category = "config"


class ParameterError(AudioFuseError):
    category = "parameter"


class ShapeError(AudioFuseError, ValueError):
    category = "shape"


class SizeError(AudioFuseError, ValueError):
    category = "size"


class RankError(AudioFuseError, ValueError):
    category = "rank"


class CheckpointError(AudioFuseError):
    category = "checkpoint"


class RefusalError(AudioFuseError):
    category = "refused"


# Numeric failures


class NumericError(AudioFuseError):
    category = "numeric"
    exit_code = EXIT_NUMERIC
