"""Euler-Maruyama simulation of the controlled forward state.

Brownian increments are drawn in blocks of ``BLOCK`` paths. Block ``b`` uses
its own counter-based Philox stream keyed by ``(seed, b)``, so the ensemble
does not depend on how blocks are spread over worker threads, and the first
``M`` paths of a larger ensemble equal an ensemble of size ``M``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NonFiniteState
from .model import Coefficient, ControlPath, ProblemSpec, TimeGrid, check_admissible

BLOCK = 1024


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("VARHOR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _blocks(M: int) -> list[tuple[int, int]]:
    return [(s, min(s + BLOCK, M)) for s in range(0, M, BLOCK)]


def _run_blocks(M: int, fn: Callable[[int, int, int], None], workers: int | None) -> None:
    blocks = _blocks(M)
    w = min(worker_count(workers), len(blocks))
    if w <= 1:
        for b, (s, e) in enumerate(blocks):
            fn(b, s, e)
        return
    with ThreadPoolExecutor(max_workers=w) as pool:
        list(pool.map(lambda item: fn(item[0], *item[1]), enumerate(blocks)))


def brownian_increments(seed: int, M: int, N: int, d: int, dt: float,
                        workers: int | None = None) -> np.ndarray:
    """Increments ``dW`` of shape ``(M, N, d)``, each Normal(0, dt)."""
    out = np.empty((M, N, d))
    scale = math.sqrt(dt)

    def fill(b, s, e):
        ss = np.random.SeedSequence(seed, spawn_key=(b,))
        rng = np.random.Generator(np.random.Philox(ss))
        out[s:e] = rng.standard_normal((e - s, N, d)) * scale

    _run_blocks(M, fill, workers)
    return out


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    M: int
    X: np.ndarray   # (M, N+1, n)
    dW: np.ndarray  # (M, N, d)
    seed: int
    control: ControlPath
    deterministic: bool


@dataclass(frozen=True, eq=False)
class Curve:
    grid: TimeGrid
    values: np.ndarray
    stderr: np.ndarray


def euler_step(spec: ProblemSpec, t: float, x: np.ndarray, u: np.ndarray,
               dt: float, dw: np.ndarray | None) -> np.ndarray:
    B = x.shape[0]
    tt = np.full(B, t)
    uu = np.broadcast_to(u, (B, spec.k))
    nxt = x + spec.f.value(t=tt, x=x, u=uu) * dt
    if dw is not None:
        s = spec.sigma.value(t=tt, x=x, u=uu)
        nxt = nxt + np.einsum("bij,bj->bi", s, dw)
    return nxt


def simulate_forward(spec: ProblemSpec, control: ControlPath, M: int = 1, seed: int = 0,
                     grid: TimeGrid | None = None, workers: int | None = None,
                     dW: np.ndarray | None = None) -> PathEnsemble:
    """Simulate ``M`` forward paths (one path when the diffusion is zero)."""
    grid = grid or control.grid
    if control.grid != grid:
        raise ValueError("control grid differs from simulation grid")
    if M < 1:
        raise ValueError("need at least one path")
    check_admissible(spec, control, tol=1e-12)
    N, dt = grid.N, grid.dt
    det = spec.deterministic
    if det:
        M = 1
        dW = np.zeros((1, N, spec.d))
    elif dW is None:
        dW = brownian_increments(seed, M, N, spec.d, dt, workers)
    elif dW.shape != (M, N, spec.d):
        raise ValueError(f"dW has shape {dW.shape}, expected {(M, N, spec.d)}")
    X = np.empty((M, N + 1, spec.n))
    X[:, 0] = np.asarray(spec.x0)
    nodes = grid.nodes
    u = control.values

    def integrate(b, s, e):
        x = X[s:e, 0]
        for i in range(N):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    x = euler_step(spec, nodes[i], x, u[i], dt, None if det else dW[s:e, i])
            except DomainError as exc:
                raise DomainError(exc.op, exc.argument, f"step {i}") from None
            if not np.all(np.isfinite(x)):
                bad = int(np.nonzero(~np.all(np.isfinite(x), axis=1))[0][0])
                raise NonFiniteState(s + bad, i + 1)
            X[s:e, i + 1] = x

    _run_blocks(M, integrate, workers)
    X.setflags(write=False)
    dW.setflags(write=False)
    return PathEnsemble(grid, M, X, dW, seed, control, det)


def _evaluate(phi, x: np.ndarray) -> np.ndarray:
    if isinstance(phi, Coefficient):
        return phi.value(x=x)
    return np.asarray(phi(x), dtype=float)


def mean_functional(ensemble: PathEnsemble, phi) -> Curve:
    """Node-wise Monte Carlo mean of ``phi(X(t_i))`` with its standard error.

    ``phi`` is a scalar Coefficient of ``x`` or a callable mapping ``(B, n)``
    states to ``(B,)`` values.
    """
    M, N1, n = ensemble.X.shape
    flat = ensemble.X.reshape(M * N1, n)
    try:
        vals = np.broadcast_to(_evaluate(phi, flat), (M * N1,)).reshape(M, N1)
    except DomainError as exc:
        for i in range(N1):
            try:
                _evaluate(phi, ensemble.X[:, i])
            except DomainError:
                raise DomainError(exc.op, exc.argument, f"step {i}") from None
        raise
    mean = vals.mean(axis=0)
    if M > 1:
        se = vals.std(axis=0, ddof=1) / math.sqrt(M)
    else:
        se = np.zeros(N1)
    return Curve(ensemble.grid, mean, se)
