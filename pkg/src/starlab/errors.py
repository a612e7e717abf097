class ConfigError(ValueError):
    """Invalid or unsatisfiable configuration (maps to CLI exit code 2)."""
