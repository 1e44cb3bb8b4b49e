"""Exception hierarchy shared across the package."""


class CollabDMError(Exception):
    """Base class for every error raised by collabdm."""


class DimensionError(CollabDMError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigError(CollabDMError, ValueError):
    """A configuration or specification object is invalid."""


class InputError(CollabDMError, ValueError):
    """An argument value is out of its admissible range."""


class FormatError(CollabDMError, ValueError):
    """A file or byte stream does not follow the expected layout."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LabelRangeError(FormatError):
    pass


class EmptyDatasetError(FormatError):
    pass


class DecodeError(FormatError):
    """A wire message could not be decoded."""


class DuplicateEntryError(DecodeError):
    pass


class PresenceMismatchError(DecodeError):
    pass


class ProtocolError(CollabDMError):
    """Client payloads do not agree with the server's seed schedule."""


class ClientError(CollabDMError):
    pass
