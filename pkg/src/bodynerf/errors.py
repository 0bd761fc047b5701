"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are not conformable for the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain (e.g. division by zero)."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class NumericError(ArithmeticError):
    """A NaN or Inf crossed a graph boundary (loss or gradient)."""
