class TooShortError(ValueError):
    """Input has fewer samples or frames than the operation needs."""


class ConfigError(ValueError):
    pass


class IntegrityError(RuntimeError):
    """Checkpoint hash or architecture does not match what was expected."""


class FrozenModelError(RuntimeError):
    pass
