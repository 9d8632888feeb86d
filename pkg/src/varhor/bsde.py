"""Backward component on ``[0, tau]`` and the cost functional."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NonFiniteBackward, SchemaError
from .linear import Horizon, Regressor, basis
from .model import ProblemSpec
from .sim import PathEnsemble
from .stopping import StoppingResult


@dataclass(frozen=True, eq=False)
class BackwardSolution:
    Y: np.ndarray   # (M, K+1, m)
    Z: np.ndarray   # (M, K, m, d)
    mode: str       # "deterministic" or "regression"
    basis_degree: int
    horizon: Horizon

    @property
    def times(self) -> np.ndarray:
        return self.horizon.times

    @property
    def y0(self) -> np.ndarray:
        """Ensemble mean of ``Y(0)``."""
        return self.Y[:, 0].mean(axis=0)


def resolve_mode(spec: ProblemSpec, mode: str) -> str:
    if mode == "auto":
        return "deterministic" if spec.deterministic else "regression"
    if mode == "deterministic" and not spec.deterministic:
        raise SchemaError("bsde.mode", "deterministic mode needs a zero diffusion")
    if mode not in ("deterministic", "regression"):
        raise SchemaError("bsde.mode", f"unknown mode {mode!r}")
    return mode


def horizon_for(ensemble: PathEnsemble, stop: StoppingResult, mode: str) -> Horizon:
    h = Horizon.build(ensemble, stop.left, stop.frac)
    if mode == "regression" and h.deterministic:
        h = replace(h, deterministic=False)
    return h


def _g(spec, t, x, y, z, u):
    return spec.g.value(t=np.full(x.shape[0], t), x=x, y=y, z=z, u=u)


def solve_backward(spec: ProblemSpec, ensemble: PathEnsemble, stop: StoppingResult,
                   mode: str = "auto", basis_degree: int = 2) -> BackwardSolution:
    """Solve ``dY = g dt + Z dW`` backward from ``Y(tau) = Psi(X(tau))``."""
    mode = resolve_mode(spec, mode)
    h = horizon_for(ensemble, stop, mode)
    M, K = h.M, h.K
    m, d = spec.m, spec.d
    Y = np.empty((M, K + 1, m))
    Z = np.zeros((M, K, m, d))
    Y[:, K] = spec.Psi.value(x=h.X[:, K])
    zero_z = np.zeros((M, m, d))
    steps = h.steps
    for i in range(K - 1, -1, -1):
        dt = steps[i]
        u = np.broadcast_to(h.u[i], (M, spec.k))
        y1 = Y[:, i + 1]
        if mode == "deterministic":
            t0, t1 = h.times[i], h.times[i + 1]
            x0, x1 = h.X[:, i], h.X[:, i + 1]
            xm, tm = 0.5 * (x0 + x1), 0.5 * (t0 + t1)
            k1 = _g(spec, t1, x1, y1, zero_z, u)
            k2 = _g(spec, tm, xm, y1 - 0.5 * dt * k1, zero_z, u)
            k3 = _g(spec, tm, xm, y1 - 0.5 * dt * k2, zero_z, u)
            k4 = _g(spec, t0, x0, y1 - dt * k3, zero_z, u)
            y = y1 - dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        else:
            reg = Regressor(basis(h.X[:, i], basis_degree), i)
            e = reg.fit(y1)
            z = reg.fit((y1 - e)[:, :, None] * h.dW[:, i, None, :] / h.var[i])
            ti, xi = h.times[i], h.X[:, i]
            guess = e - _g(spec, ti, xi, e, z, u) * dt
            y = e - _g(spec, ti, xi, guess, z, u) * dt
            Z[:, i] = z
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Z[:, i]))):
            raise NonFiniteBackward(i)
        Y[:, i] = y
    return BackwardSolution(Y, Z, mode, basis_degree if mode == "regression" else 0, h)


def running_cost(spec: ProblemSpec, back: BackwardSolution) -> np.ndarray:
    """Per-path trapezoid integral of ``l`` over the horizon, shape ``(M,)``."""
    h = back.horizon
    M, K = h.M, h.K
    if K == 0:
        return np.zeros(M)
    left = spec.l.value(**h.args("left", back.Y, back.Z)).reshape(M, K)
    right = spec.l.value(**h.args("right", back.Y, back.Z)).reshape(M, K)
    return 0.5 * ((left + right) * h.steps).sum(axis=1)


def cost(spec: ProblemSpec, back: BackwardSolution) -> float:
    """``E[int_0^tau l dt + beta(X(tau))] + gamma(mean Y(0))``."""
    h = back.horizon
    run = running_cost(spec, back).mean()
    term = spec.beta.value(x=h.X[:, -1]).mean()
    init = spec.gamma.value(y=back.y0[None, :])[0]
    return float(run + term + init)
