"""Common exception base so the CLI can map any failure to one exit line."""


class WorkbenchError(Exception):
    """Base class for all errors raised by this package."""

    def format_cli(self) -> str:
        """Single-line machine-parsable rendering: ``error: <Type>: <message>``."""
        return f"error: {type(self).__name__}: {self}"
