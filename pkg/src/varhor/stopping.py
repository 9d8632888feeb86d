"""Terminal time of the mean constraint and its sensitivity to the control.

The terminal time is the first instant the mean curve ``m(t) = E[Phi(X(t))]``
reaches the threshold ``alpha``, capped at ``T``. The drift ``h(t)`` of ``m``
scales how fast that instant moves when the control is perturbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateH, DirectionLeavesBox, MissingDerivative
from .model import ControlPath, ProblemSpec
from .sim import Curve, PathEnsemble, mean_functional, simulate_forward

H_GUARD = 1e-8
DEFAULT_RHOS = (1e-2, 5e-3, 2.5e-3)


class Case(str, Enum):
    BEFORE_T = "BeforeT"
    AT_T = "AtT"
    NEVER = "Never"

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class StoppingResult:
    tau_hat: float
    cross_index: int | None
    case_tag: Case
    m_curve: Curve
    h_curve: Curve
    h_tau: float
    left: int     # tau_hat = t_left + frac * dt
    frac: float

    @property
    def dt(self) -> float:
        return self.m_curve.grid.dt


def h_integrand(spec: ProblemSpec, t: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-path drift of ``Phi(X)``: ``Phi_x . f + 1/2 tr(sigma^T Phi_xx sigma)``."""
    phi_x = spec.Phi.grad("x", x=x)
    out = np.einsum("bi,bi->b", phi_x, spec.f.value(t=t, x=x, u=u))
    if not spec.deterministic:
        try:
            phi_xx = spec.Phi.hess(x=x)
        except NotImplementedError:
            raise MissingDerivative("Phi_xx") from None
        s = spec.sigma.value(t=t, x=x, u=u)
        out = out + 0.5 * np.einsum("bij,bik,bkj->b", s, phi_xx, s)
    return out


def _node_controls(control: ControlPath) -> np.ndarray:
    """Control used at each node: cell ``i`` at node ``i``, last cell at ``T``."""
    return np.vstack([control.values, control.values[-1:]])


def h_samples(spec: ProblemSpec, ensemble: PathEnsemble, control: ControlPath | None = None) -> np.ndarray:
    """Per-path values of the drift at every node, shape ``(M, N+1)``."""
    control = control or ensemble.control
    M, N1, n = ensemble.X.shape
    t = np.tile(ensemble.grid.nodes, M)
    u = np.tile(_node_controls(control), (M, 1))
    return h_integrand(spec, t, ensemble.X.reshape(M * N1, n), u).reshape(M, N1)


def _curve(ensemble: PathEnsemble, samples: np.ndarray) -> Curve:
    M = samples.shape[0]
    se = samples.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros(samples.shape[1])
    return Curve(ensemble.grid, samples.mean(axis=0), se)


def h_process(spec: ProblemSpec, ensemble: PathEnsemble, control: ControlPath | None = None) -> Curve:
    return _curve(ensemble, h_samples(spec, ensemble, control))


def state_at(ensemble: PathEnsemble, left: int, frac: float) -> np.ndarray:
    X = ensemble.X
    if frac == 0.0:
        return X[:, left]
    return X[:, left] + frac * (X[:, left + 1] - X[:, left])


def locate(m: np.ndarray, alpha: float, grid) -> tuple[float, int | None, int, float]:
    """First crossing of ``alpha`` by ``m``: ``(tau, cross_index, left, frac)``."""
    N, dt = grid.N, grid.dt
    if math.isinf(alpha) and alpha > 0:
        return grid.T, None, N - 1, 1.0
    hit = np.nonzero(m >= alpha)[0]
    if hit.size == 0:
        return grid.T, None, N - 1, 1.0
    i = int(hit[0])
    if i == 0:
        return 0.0, 0, 0, 0.0
    lo, hi = m[i - 1], m[i]
    frac = float(min(max((alpha - lo) / (hi - lo), 0.0), 1.0))
    return grid.nodes[i - 1] + frac * dt, i, i - 1, frac


def stopping_time(spec: ProblemSpec, ensemble: PathEnsemble, band_cells: int = 2) -> StoppingResult:
    grid = ensemble.grid
    m = mean_functional(ensemble, spec.Phi)
    hs = h_samples(spec, ensemble)
    tau, idx, left, frac = locate(m.values, spec.alpha, grid)
    if idx is None:
        case = Case.NEVER
    elif tau < grid.T - band_cells * grid.dt:
        case = Case.BEFORE_T
    else:
        case = Case.AT_T
    x_tau = state_at(ensemble, left, frac)
    u_tau = np.broadcast_to(ensemble.control.values[left], (ensemble.M, spec.k))
    h_tau = float(np.mean(h_integrand(spec, np.full(ensemble.M, tau), x_tau, u_tau)))
    return StoppingResult(tau, idx, case, m, _curve(ensemble, hs), h_tau, left, frac)


# ---------------------------------------------------------------------------
# directional derivative of h and of the terminal time
# ---------------------------------------------------------------------------

def as_direction(control: ControlPath, direction) -> np.ndarray:
    v = np.asarray(direction, dtype=float)
    if v.ndim == 0 or v.size == control.k:
        return np.tile(v.reshape(1, -1), (control.grid.N, 1))
    return v.reshape(control.values.shape)


def extrapolation_weights(rhos) -> np.ndarray:
    """Weights ``w`` with ``sum w_i D(rho_i)`` the polynomial extrapolation of ``D`` to 0."""
    r = np.asarray(rhos, dtype=float)
    w = np.ones(len(r))
    for i in range(len(r)):
        for j in range(len(r)):
            if i != j:
                w[i] *= r[j] / (r[j] - r[i])
    return w


def admissible_rhos(spec: ProblemSpec, control: ControlPath, v: np.ndarray, rhos) -> list[float]:
    ok = []
    for rho in rhos:
        trial = control.values + rho * v
        if np.all(trial >= spec.lo - 1e-12) and np.all(trial <= spec.hi + 1e-12):
            ok.append(rho)
    if not ok:
        raise DirectionLeavesBox("u + rho*v leaves U for every tested rho")
    return ok


def perturbed_ensemble(spec: ProblemSpec, ensemble: PathEnsemble, control: ControlPath) -> PathEnsemble:
    """Re-simulate with the same Brownian increments (common random numbers)."""
    if ensemble.deterministic:
        return simulate_forward(spec, control)
    return simulate_forward(spec, control, M=ensemble.M, seed=ensemble.seed, dW=ensemble.dW)


def h_bar(spec: ProblemSpec, ensemble: PathEnsemble, direction, rhos=DEFAULT_RHOS) -> Curve:
    """Derivative of ``h`` along ``direction`` by extrapolated finite differences in rho."""
    control = ensemble.control
    v = as_direction(control, direction)
    if not np.any(v):
        z = np.zeros(ensemble.grid.N + 1)
        return Curve(ensemble.grid, z, z.copy())
    used = admissible_rhos(spec, control, v, rhos)
    base = h_samples(spec, ensemble, control)
    w = extrapolation_weights(used)
    acc = np.zeros_like(base)
    for wi, rho in zip(w, used):
        shifted = ControlPath(control.grid, np.clip(control.values + rho * v, spec.lo, spec.hi))
        ens = perturbed_ensemble(spec, ensemble, shifted)
        acc += wi * (h_samples(spec, ens, shifted) - base) / rho
    return _curve(ensemble, acc)


def integrate_to_tau(curve_values: np.ndarray, grid, left: int, frac: float) -> float:
    """Trapezoid integral of node values over ``[0, t_left + frac*dt]``."""
    dt = grid.dt
    v = curve_values
    full = dt * (0.5 * v[0] + v[1:left].sum() + 0.5 * v[left]) if left > 0 else 0.0
    if frac > 0.0:
        end = v[left] + frac * (v[left + 1] - v[left])
        full += 0.5 * frac * dt * (v[left] + end)
    return float(full)


@dataclass(frozen=True)
class TauDerivative:
    value: float
    case_tag: Case
    candidates: tuple[float, ...]  # both limits in the AtT case


def tau_derivative(spec: ProblemSpec, ensemble: PathEnsemble, stop: StoppingResult,
                   direction, rhos=DEFAULT_RHOS, hbar: Curve | None = None,
                   m_rate: float | None = None) -> TauDerivative:
    """Limit of ``(tau(u) - tau(u + rho v)) / rho`` per terminal-time case.

    ``m_rate`` is the derivative of ``E[Phi(X(tau))]`` along the direction
    with ``tau`` held fixed; it replaces the integral of ``h-bar`` when the
    state variation is at hand.
    """
    if stop.case_tag is Case.NEVER:
        return TauDerivative(0.0, Case.NEVER, (0.0,))
    if abs(stop.h_tau) <= H_GUARD:
        raise DegenerateH(stop.h_tau)
    if m_rate is None:
        if hbar is None:
            hbar = h_bar(spec, ensemble, direction, rhos)
        m_rate = integrate_to_tau(hbar.values, ensemble.grid, stop.left, stop.frac)
    val = m_rate / stop.h_tau
    if stop.case_tag is Case.AT_T:
        return TauDerivative(val, Case.AT_T, (val, 0.0))
    return TauDerivative(val, Case.BEFORE_T, (val,))
