"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateTopologyError(ValueError):
    """The mesh connectivity cannot support the requested operation."""


class DegenerateGeometryError(ValueError):
    """The mesh geometry (e.g. zero total area) cannot support the operation."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where a finite number is required."""


class ParseError(ValueError):
    """A file on disk is malformed."""
