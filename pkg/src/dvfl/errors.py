"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
ProtocolError -> 3, DataError -> 4.  Everything else is a plain bug.
"""


class DvflError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(DvflError):
    """Bad or inconsistent run configuration (including failed negotiation)."""


class ProtocolError(DvflError):
    """Peer/parameter-server protocol violation: desync, duplicate push,
    stale round, unexpected message type, closed channel mid-protocol."""


class DataError(DvflError):
    """Malformed input data (parse errors carry the offending line number)."""


class ChannelClosedError(ProtocolError):
    """The peer closed the channel while a message was still expected."""


class ShutdownError(ProtocolError):
    """A blocking operation was interrupted by an orderly shutdown."""


class KeyMismatchError(DvflError):
    """Ciphertexts from different keypairs were mixed in one operation."""


class EncodingRangeError(DvflError):
    """A value does not fit the fixed-point representable range."""


class ScaleMismatchError(DvflError):
    """Encrypted operands carry different fixed-point scale exponents."""


class FilterBuildError(DvflError):
    """Garbled filter construction failed after the allowed retries."""
