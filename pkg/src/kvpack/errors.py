"""Exception hierarchy shared by all kvpack modules."""


class KVPackError(Exception):
    """Base class for every error raised by kvpack."""


class ParameterError(KVPackError, ValueError):
    """An argument is outside its permitted range."""


class ShapeError(KVPackError, ValueError):
    """Array shapes disagree with each other or with the head geometry."""


class DataError(KVPackError, ValueError):
    """Input data is unusable, e.g. contains NaN or infinity."""


class ConfigError(KVPackError):
    """A configuration file or mapping is malformed."""


class SnapshotError(KVPackError):
    """A snapshot file is truncated, corrupt or of an unknown version."""
