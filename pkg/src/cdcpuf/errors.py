class PufError(Exception):
    """Base class for errors raised by cdcpuf."""


class InvalidInputError(PufError, ValueError):
    pass


class FormatError(PufError):
    """A serialized file is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergedTrainingError(PufError):
    """Training produced a non-finite loss.

    ``model`` holds the last parameters for which the loss was finite.
    """

    def __init__(self, message, model=None, epoch=None):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


class BudgetError(PufError):
    pass
