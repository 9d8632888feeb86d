"""Projected gradient descent over piecewise-constant controls.

The gradient is the density of the cost derivative with respect to the
``dt``-weighted inner product on control paths::

    dJ(v) = sum_i g_i . v_i dt

Inside the horizon ``g = E[H_u] + (L / h(tau)) E[f_u^T lam + sigma_u^T mu]``
where ``(lam, mu)`` is the adjoint of ``E[Phi(X(tau))]``; cells beyond the
terminal time do not influence the cost and get zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adjoint as adj
from .errors import DegenerateH, DirectionLeavesBox, LineSearchStalled
from .model import ControlPath, ProblemSpec, check_admissible
from .pipeline import Pipeline, Settings
from .stopping import H_GUARD, Case


@dataclass(frozen=True)
class OptimizerOptions:
    step0: float = 1.0e5
    max_iters: int = 200
    armijo_c: float = 1.0e-4
    shrink: float = 0.5
    grad_tol: float = 1.0e-6
    max_shrinks: int = 40

    def __post_init__(self):
        if not (self.step0 > 0 and self.max_iters > 0 and self.grad_tol > 0):
            raise ValueError("optimizer options must be positive")
        if not (0 < self.armijo_c < 1 and 0 < self.shrink < 1):
            raise ValueError("armijo_c and shrink must lie in (0, 1)")


def _cell_weights(state: Pipeline) -> np.ndarray:
    """Fraction of every grid cell that lies inside ``[0, tau]``."""
    h = state.back.horizon
    N = state.control.grid.N
    w = np.zeros(N)
    w[: h.K] = 1.0
    if h.K > 0:
        w[h.K - 1] = h.steps[-1] / state.control.grid.dt
    return w


def gradient(spec: ProblemSpec, state: Pipeline) -> np.ndarray:
    """Gradient density, shape ``(N, k)``."""
    back = state.back
    h = back.horizon
    N, K = state.control.grid.N, h.K
    out = np.zeros((N, spec.k))
    if K == 0:
        return out
    ad = state.adjoint
    Hu = 0.5 * (adj.hamiltonian_u_cells(spec, back, ad, "left")
                + adj.hamiltonian_u_cells(spec, back, ad, "right")).mean(axis=0)
    dens = Hu
    stop = state.stop
    if stop.case_tag is not Case.NEVER:
        if abs(stop.h_tau) <= H_GUARD:
            raise DegenerateH(stop.h_tau)
        L = adj.script_L(spec, back, ad.q)
        lam, mu = adj.solve_lambda(spec, back)
        ends = []
        for w, sl in (("left", slice(0, K)), ("right", slice(1, K + 1))):
            fu = adj.cell_grad(spec.f, "u", h, w)                      # (M,K,n,k)
            ends.append(np.einsum("bkr,bkra->bka", lam[:, sl], fu))
        pair = 0.5 * (ends[0] + ends[1])
        if not h.deterministic:
            su = adj.cell_grad(spec.sigma, "u", h, "left")             # (M,K,n,d,k)
            pair = pair + np.einsum("bkrj,bkrja->bka", mu, su)
        dens = dens + (L / stop.h_tau) * pair.mean(axis=0)
    out[:K] = dens * _cell_weights(state)[:K, None]
    return out


def extend_tail(values: np.ndarray, K: int) -> np.ndarray:
    """Copy the last control inside the horizon onto the cells after it.

    Those cells do not enter the cost, so this leaves ``J`` unchanged, but
    the horizon sees a consistent control when a later step moves it.
    """
    out = values.copy()
    if 0 < K < len(out):
        out[K:] = out[K - 1]
    return out


def inner(a: np.ndarray, b: np.ndarray, dt: float) -> float:
    return float(np.sum(a * b) * dt)


def feasible_direction(spec: ProblemSpec, control: ControlPath, rng: np.random.Generator) -> np.ndarray:
    """Random direction with unit sup norm that keeps small steps inside the box."""
    u = control.values
    v = rng.standard_normal(u.shape)
    v = np.where(u <= spec.lo, np.abs(v), v)
    v = np.where(u >= spec.hi, -np.abs(v), v)
    return v / np.max(np.abs(v))


def finite_difference(state: Pipeline, direction: np.ndarray, rho: float = 1.0e-3) -> float:
    """Derivative of ``J`` along ``direction`` by re-simulation with shared noise.

    Central differences when both sides stay admissible, otherwise a
    one-sided difference with one Richardson step.
    """
    spec = state.spec
    u = state.control.values
    v = np.asarray(direction, dtype=float).reshape(u.shape)

    def inside(w):
        return bool(np.all(w >= spec.lo) and np.all(w <= spec.hi))

    if inside(u + rho * v) and inside(u - rho * v):
        return (state.shifted(v, rho).J - state.shifted(v, -rho).J) / (2.0 * rho)
    if not inside(u + rho * v):
        raise DirectionLeavesBox(f"u + {rho} v leaves the box")
    d1 = (state.shifted(v, rho).J - state.J) / rho
    d2 = (state.shifted(v, rho / 2).J - state.J) / (rho / 2)
    return 2.0 * d2 - d1


@dataclass(frozen=True)
class TraceRow:
    iter: int
    J: float
    tau_hat: float
    step: float
    grad_norm: float


@dataclass
class OptimizeResult:
    control: ControlPath
    trace: list[TraceRow] = field(default_factory=list)
    converged: bool = False
    state: Pipeline | None = None


def projected_gradient_norm(spec: ProblemSpec, u: np.ndarray, g: np.ndarray) -> float:
    return float(np.max(np.abs(u - spec.project(u - g)))) if u.size else 0.0


def optimize(spec: ProblemSpec, init: ControlPath, opts: OptimizerOptions = OptimizerOptions(),
             settings: Settings = Settings()) -> OptimizeResult:
    """Projected gradient with Armijo backtracking; random numbers fixed across iterations."""
    check_admissible(spec, init, tol=0.0)
    grid = init.grid
    state = Pipeline(spec, init, settings)
    result = OptimizeResult(init, state=state)
    J = state.J
    step = opts.step0
    for it in range(opts.max_iters):
        u = state.control.values
        g = gradient(spec, state)
        pg = projected_gradient_norm(spec, u, g)
        if pg <= opts.grad_tol:
            result.trace.append(TraceRow(it, J, state.tau_hat, 0.0, pg))
            result.converged = True
            break
        shrinks = 0
        s = step
        while True:
            cand = spec.project(u - s * g)
            trial = state.at(ControlPath(grid, cand))
            decrease = inner(g, u - cand, grid.dt)
            if trial.J <= J - opts.armijo_c * decrease and decrease > 0:
                break
            shrinks += 1
            if shrinks >= opts.max_shrinks:
                raise LineSearchStalled(f"Armijo condition failed {shrinks} times at iteration {it}")
            s *= opts.shrink
        result.trace.append(TraceRow(it, J, state.tau_hat, s, pg))
        filled = extend_tail(cand, trial.back.horizon.K)
        if not np.array_equal(filled, cand):
            trial = state.at(ControlPath(grid, filled))
        state, J = trial, trial.J
        step = min(opts.step0, s / opts.shrink)
    else:
        g = gradient(spec, state)
        result.trace.append(TraceRow(opts.max_iters, J, state.tau_hat, 0.0,
                                     projected_gradient_norm(spec, state.control.values, g)))
    result.control = state.control
    result.state = state
    return result
