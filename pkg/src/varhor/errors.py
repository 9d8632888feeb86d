"""Exception hierarchy.

Every error carries a short machine-readable ``code`` (the class name) and an
``exit_status`` used by the command-line front end: 2 for invalid input,
3 for numerical failures.
"""

from __future__ import annotations


class VarhorError(Exception):
    exit_status = 3

    @property
    def code(self) -> str:
        return type(self).__name__


class ValidationError(VarhorError):
    exit_status = 2


class NumericalError(VarhorError):
    exit_status = 3


# -- expressions -----------------------------------------------------------

class ExprSyntaxError(ValidationError):
    def __init__(self, offset: int, expected: str, text: str = ""):
        self.offset = offset
        self.expected = expected
        self.text = text
        super().__init__(f"syntax error at byte {offset}: expected {expected}")


class UnknownVariable(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown variable {name!r}")


class MissingBinding(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no binding for variable {name!r}")


class DomainError(NumericalError):
    def __init__(self, op: str, argument, context: str = ""):
        self.op = op
        self.argument = argument
        self.context = context
        msg = f"domain error in {op}: argument {argument!r}"
        super().__init__(f"{msg} ({context})" if context else msg)


# -- model -----------------------------------------------------------------

class SchemaError(ValidationError):
    def __init__(self, path: str, message: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if message else path)


class DimensionMismatch(ValidationError):
    pass


class UnknownProblem(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown problem {name!r}")


class DerivativeCheckFailed(ValidationError):
    def __init__(self, function: str, point, gap: float):
        self.function = function
        self.point = point
        self.gap = gap
        super().__init__(f"derivative check failed for {function}: gap {gap:.3g} at {point}")


class MissingDerivative(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing derivative {name}")


class DirectionLeavesBox(ValidationError):
    pass


class ControlOutsideBox(ValidationError):
    pass


# -- numerics --------------------------------------------------------------

class NonFiniteState(NumericalError):
    def __init__(self, path: int, step: int, what: str = "state"):
        self.path = path
        self.step = step
        super().__init__(f"non-finite {what} on path {path} at step {step}")


class NonFiniteBackward(NumericalError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite backward value at step {step}")


class NonFiniteAdjoint(NumericalError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite adjoint value at step {step}")


class SingularRegression(NumericalError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"singular regression at step {step}")


class DegenerateH(NumericalError):
    def __init__(self, value: float):
        self.value = value
        super().__init__(f"|h(tau)| = {abs(value):.3g} is below the 1e-8 guard")


class LineSearchStalled(NumericalError):
    pass
