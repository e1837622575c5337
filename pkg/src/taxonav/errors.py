"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new failure kinds should
subclass one of the existing branches rather than raising bare exceptions.
"""


class DiscoveryError(Exception):
    """Base class for every error this package raises deliberately."""


class DataError(DiscoveryError):
    """Bad input data: unreadable files, malformed records, dangling ids."""


class SchemaError(DataError):
    """A persisted artifact does not match its expected schema."""


class ConfigError(DiscoveryError):
    """Invalid or contradictory configuration."""


class GatewayError(DiscoveryError):
    """Base class for chat/embedding gateway failures."""


class TransportError(GatewayError):
    """The backend could not be reached or returned a server-side failure."""


class MalformedReplyError(GatewayError):
    """The backend answered, but the reply is structurally unusable."""


class IndexParseError(GatewayError):
    """A reply that should contain list indices contains no digits at all."""


class DesignError(DiscoveryError):
    """Category design failed even after the retry budget was spent."""
