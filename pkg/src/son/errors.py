"""Base exception for all platform errors."""


class PlatformError(Exception):
    """Root of the error hierarchy raised by this package."""
