"""Exception hierarchy. Each class carries the CLI exit code for its failure class."""


class ShopAlignError(Exception):
    exit_code = 1


class ValidationError(ShopAlignError, ValueError):
    """Input violates a documented precondition."""

    exit_code = 3


class EmptyIntentError(ValidationError):
    """A session has no in-vocabulary event to build an intent vector from."""


class TrainingDivergedError(ShopAlignError, FloatingPointError):
    """Loss became non-finite during optimisation."""

    exit_code = 5


class StageError(ShopAlignError):
    """A pipeline stage failed; wraps the original error with stage context."""

    exit_code = 6

    def __init__(self, stage, config, cause):
        self.stage = stage
        self.config = config
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause!r} (config: {config})")
