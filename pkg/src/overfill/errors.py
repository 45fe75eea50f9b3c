"""Shared exception types."""


class ConfigError(ValueError):
    """A model or run configuration field is invalid."""


class DataError(ValueError):
    """A file, schema, or serialized artifact is malformed."""
