"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes (see cli.main): config errors
exit 2, data errors 3, numeric failures 4.
"""


class IncidentKitError(Exception):
    exit_code = 1


class ConfigError(IncidentKitError):
    """Invalid configuration, flags, or config file."""

    exit_code = 2


class DataError(IncidentKitError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericError(IncidentKitError):
    """Non-finite values or numeric invariant violations during computation."""

    exit_code = 4
