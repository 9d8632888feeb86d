"""One forward/stopping/backward/adjoint evaluation at a fixed control."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .adjoint import AdjointSolution, solve_adjoint
from .bsde import BackwardSolution, cost, solve_backward
from .model import ControlPath, ProblemSpec
from .sim import PathEnsemble, simulate_forward
from .stopping import StoppingResult, stopping_time


@dataclass(frozen=True)
class Settings:
    M: int = 1
    seed: int = 0
    mode: str = "auto"
    basis_degree: int = 2
    band_cells: int = 2
    workers: int | None = None


class Pipeline:
    """Lazily evaluated state of the controlled system at one control.

    Perturbed evaluations reuse the Brownian increments of this run, so
    finite differences across controls share their random numbers.
    """

    def __init__(self, spec: ProblemSpec, control: ControlPath, settings: Settings = Settings(),
                 dW: np.ndarray | None = None):
        self.spec = spec
        self.control = control
        self.settings = settings
        self._dW = dW

    @cached_property
    def ensemble(self) -> PathEnsemble:
        s = self.settings
        return simulate_forward(self.spec, self.control, M=s.M, seed=s.seed,
                                workers=s.workers, dW=self._dW)

    @cached_property
    def stop(self) -> StoppingResult:
        return stopping_time(self.spec, self.ensemble, self.settings.band_cells)

    @cached_property
    def back(self) -> BackwardSolution:
        s = self.settings
        return solve_backward(self.spec, self.ensemble, self.stop, s.mode, s.basis_degree)

    @cached_property
    def J(self) -> float:
        return cost(self.spec, self.back)

    @cached_property
    def adjoint(self) -> AdjointSolution:
        return solve_adjoint(self.spec, self.back)

    @property
    def tau_hat(self) -> float:
        return self.stop.tau_hat

    def at(self, control: ControlPath) -> "Pipeline":
        """Same settings and random numbers at another control."""
        dW = None if self.spec.deterministic else self.ensemble.dW
        return Pipeline(self.spec, control, self.settings, dW)

    def shifted(self, direction: np.ndarray, rho: float) -> "Pipeline":
        return self.at(ControlPath(self.control.grid, self.control.values + rho * direction))
