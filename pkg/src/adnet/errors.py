"""Exception hierarchy.

Every error raised on purpose by this package derives from ``AdnetError`` and
carries a short ``kind`` tag that the CLI prints as a stable prefix.
"""


class AdnetError(Exception):
    kind = "error"


class ShapeError(AdnetError, ValueError):
    kind = "shape"


class ConstructionError(AdnetError, ValueError):
    kind = "construction"


class ParameterError(AdnetError, ValueError):
    kind = "parameter"


class ConfigError(AdnetError, ValueError):
    kind = "config"


class DataError(AdnetError, ValueError):
    kind = "data"


class IngestionError(AdnetError, OSError):
    kind = "ingestion"


class DimensionError(IngestionError):
    kind = "dimension"


class StateError(AdnetError, RuntimeError):
    kind = "state"


class FormatError(AdnetError, ValueError):
    kind = "format"


class CompatibilityError(AdnetError, ValueError):
    kind = "compatibility"


class NumericError(AdnetError, FloatingPointError):
    kind = "numeric"


class StorageError(AdnetError, OSError):
    kind = "io"
