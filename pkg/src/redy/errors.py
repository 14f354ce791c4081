"""Exception hierarchy shared by every component."""


class RedyError(Exception):
    """Base class for all cache errors."""


class AddressOutOfBounds(RedyError):
    pass


class InvalidEntry(RedyError):
    pass


class ConnectionFailed(RedyError):
    pass


class ConnectionLost(RedyError):
    pass


class AllocationFailed(RedyError):
    """A server could not allocate the requested regions."""


class AccessDenied(RedyError):
    pass


class MigrationAborted(RedyError):
    pass


class SloUnsatisfiable(RedyError):
    pass


class CapacityUnavailable(RedyError):
    pass


class StaleCache(RedyError):
    """Access to a cache that has been deleted."""


class InvalidCache(RedyError):
    pass


class InvalidOperation(RedyError):
    pass


class ConfigError(RedyError):
    pass


class RegionUnavailable(RedyError):
    """The region's VM failed or was reclaimed before its data could move."""
