"""Exception types. Each carries a short machine-readable ``code``."""


class MECDError(Exception):
    code = "E_MECD"

    def __str__(self):
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class SchemaError(MECDError, ValueError):
    code = "E_SCHEMA"


class LengthMismatchError(MECDError, ValueError):
    code = "E_LENGTH"


class TimestampRangeError(MECDError, ValueError):
    code = "E_RANGE"


class BadMagicError(MECDError, ValueError):
    code = "E_MAGIC"


class TruncatedFeatureError(MECDError, ValueError):
    code = "E_TRUNCATED"


class EventIndexError(MECDError, IndexError):
    code = "E_INDEX"


class DimensionError(MECDError, ValueError):
    code = "E_DIM"


class ShapeError(MECDError, ValueError):
    code = "E_SHAPE"


class SizeMismatchError(MECDError, ValueError):
    code = "E_SIZE"


class ConfigError(MECDError, ValueError):
    code = "E_CONFIG"


class EmptyDatasetError(MECDError, ValueError):
    code = "E_EMPTY"


class ParamError(MECDError, ValueError):
    code = "E_PARAM"


class ParamWarning(UserWarning):
    """A parameter was clamped into its valid range."""
