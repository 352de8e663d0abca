class LabError(Exception):
    def __init__(self, message, exit_code=1):
        self.message = message
        self.exit_code = exit_code
        super().__init__(self.message)


class ValidationError(LabError):
    """Configuration or argument problem. `problems` lists field-path messages."""

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = f"{message}: " + "; ".join(self.problems)
        super().__init__(message, 2)


class ShapeError(ValidationError):
    def __init__(self, message):
        super().__init__(message)


class NumericError(LabError):
    def __init__(self, message, layer_index=None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"{message} (layer {layer_index})"
        super().__init__(message, 3)


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)


class UndefinedMetricError(LabError):
    def __init__(self, message):
        super().__init__(message, 3)


class IntegrityError(LabError):
    def __init__(self, message):
        super().__init__(message, 4)


class NotFoundError(LabError):
    def __init__(self, message):
        super().__init__(message, 4)
