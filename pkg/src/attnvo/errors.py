"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateRotationError(ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class ShapeError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class InsufficientDataError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite values appeared somewhere they must not."""
