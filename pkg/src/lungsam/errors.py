"""Exception types shared across the package."""


class LungSamError(Exception):
    """Base class for all package-specific errors."""


class DatasetError(LungSamError):
    """Raised when a dataset directory or one of its samples is unusable."""


class FoldError(LungSamError):
    """Raised when a split or fold plan cannot be built as requested."""


class PromptError(LungSamError):
    """Raised when prompt construction preconditions fail."""


class ModelError(LungSamError):
    """Raised for checkpoint/model-adapter problems."""


class TrainingDiverged(LungSamError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class ConfigError(LungSamError):
    """Raised with the full list of invalid config keys at once."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))
