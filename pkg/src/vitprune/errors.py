"""Exception types; each maps to one CLI exit status."""


class VitpruneError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(VitpruneError, ValueError):
    exit_code = 2
    kind = "config"


class ValidationError(VitpruneError, ValueError):
    exit_code = 3
    kind = "validation"

    def __init__(self, message: str, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class StaleArtifactError(ValidationError):
    """A table or recipe was computed for a different model."""

    kind = "stale"


class NumericError(VitpruneError, ArithmeticError):
    exit_code = 4
    kind = "numeric"
