class ConfigError(ValueError):
    """Invalid configuration or input contract; maps to CLI exit code 1."""


class DataError(ValueError):
    """Bad data content (NaN, missing climatology entry, inconsistent payloads)."""
