"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor or layer does not have the shape its context requires."""


class ManifestError(ValueError):
    """A model directory could not be parsed."""


class NumericError(ArithmeticError):
    """Input contains NaN or infinite values."""


class InfeasibleBudgetError(ValueError):
    """No rank assignment fits under the requested flash budget."""

    def __init__(self, flash_max: int, min_size: int):
        self.flash_max = flash_max
        self.min_size = min_size
        super().__init__(
            f"budget {flash_max} is infeasible: minimum achievable size is {min_size}"
        )
