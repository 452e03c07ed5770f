"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree with the model or with each other."""


class NumericError(ArithmeticError):
    """A loss, feature, or gradient came out non-finite."""


class DegenerateInputError(ValueError):
    """A distance is undefined for the given vectors (zero norm or zero variance)."""


class DivergenceError(NumericError):
    """Training produced non-finite values; carries round/client/step context."""

    def __init__(self, message, *, round=None, client=None, step=None):
        where = ", ".join(
            f"{k}={v}" for k, v in (("round", round), ("client", client), ("step", step)) if v is not None
        )
        super().__init__(f"{message} ({where})" if where else message)
        self.round = round
        self.client = client
        self.step = step


class ConfigError(ValueError):
    """Experiment file could not be parsed or failed validation."""
