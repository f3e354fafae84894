"""Exception types shared across the package."""


class BsmmError(Exception):
    pass


class ParameterError(BsmmError, ValueError):
    """Invalid argument value (negative threshold, mismatched layouts, ...)."""


class ConstructionError(ParameterError):
    """A block entry does not fit the layout it is being placed into."""

    def __init__(self, message, coords=None):
        super().__init__(message)
        self.coords = coords


class FormatError(BsmmError):
    """Malformed BSM1 stream. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IntegrityError(BsmmError):
    pass


class UsageError(BsmmError):
    """API misuse, e.g. waiting twice on the same transfer handles."""


class FunneledViolation(UsageError):
    pass
