"""Controlled forward-backward systems whose horizon ends when a mean state
constraint is first met: simulation, costs, adjoints, first-order conditions
and projected-gradient optimization."""

__version__ = "0.1.0"

from .errors import NumericalError, ValidationError, VarhorError
from .model import ControlPath, ProblemSpec, TimeGrid, builtin, load_problem
from .pipeline import Pipeline, Settings

__all__ = [
    "ControlPath",
    "NumericalError",
    "Pipeline",
    "ProblemSpec",
    "Settings",
    "TimeGrid",
    "ValidationError",
    "VarhorError",
    "builtin",
    "load_problem",
]
