"""Exception types shared across the pipeline."""


class ConfigError(ValueError):
    """Invalid configuration value or precondition on sizes/shapes of inputs."""


class TrainingFailure(RuntimeError):
    """Raised when a training loop diverges."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MissingArtifact(FileNotFoundError):
    """An upstream checkpoint or corpus that a stage depends on is absent."""


class MissingInput(FileNotFoundError):
    """A dataset or run directory the command reads from does not exist."""


class OutputExists(RuntimeError):
    """Refusal to overwrite existing outputs without an explicit force flag."""
