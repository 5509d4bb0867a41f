"""Exception hierarchy. ``exit_code`` is the CLI category code for each family."""


class HFNError(Exception):
    exit_code = 4


class MissingInputError(HFNError):
    """A required file or artifact does not exist."""

    exit_code = 2


class ValidationError(HFNError, ValueError):
    """Input data or configuration violates a documented invariant."""

    exit_code = 3


class ShapeError(ValidationError):
    pass


class AlignmentError(ValidationError):
    pass


class MissingMediaError(ValidationError):
    pass


class ContractError(HFNError):
    """A component was called outside its contract (e.g. every key padded)."""


class NumericError(HFNError, ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
