"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, anything else -> 3.
"""


class ConfigError(Exception):
    """Invalid, inconsistent, or unknown configuration."""


class DataError(Exception):
    """Malformed, unreadable, or mutually inconsistent data files."""
