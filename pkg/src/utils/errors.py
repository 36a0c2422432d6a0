"""
Error Types

Exceptions raised by the simulation services. The CLI maps them to exit codes.
"""


class GoldilocksError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(GoldilocksError, ValueError):
    """An argument is outside the domain of the operation."""


class SchemaError(GoldilocksError, ValueError):
    """A network or configuration file does not match its schema."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class NumericalFailure(GoldilocksError, ArithmeticError):
    """Integration produced an unphysical or non-finite state."""

    def __init__(self, message, time=None):
        self.time = time
        if time is not None:
            message = f"{message} at t={time:.6g} ps"
        super().__init__(message)


class BudgetExceededError(GoldilocksError):
    """A sweep would run more propagations than the configured budget."""

    def __init__(self, requested, budget):
        self.requested = requested
        self.budget = budget
        super().__init__(
            f"Sweep needs {requested} propagations, budget is {budget}"
        )
