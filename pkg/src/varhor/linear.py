"""Shared machinery for equations solved on the random horizon ``[0, tau]``.

``Horizon`` restricts an ensemble to the grid nodes below ``tau`` plus one
partial step ending exactly at ``tau``. The state at ``tau`` is the linear
interpolation of the bracketing nodes, which is what one Euler step of
length ``frac*dt`` driven by ``frac*dW`` produces.

Linear forward and backward equations are solved by classical RK4 when the
problem is deterministic and by Euler steps with least-squares Monte Carlo
regression for conditional expectations otherwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteAdjoint, NonFiniteBackward, SingularRegression
from .sim import PathEnsemble

RIDGE = 1e-10


@dataclass(frozen=True, eq=False)
class Horizon:
    times: np.ndarray   # (K+1,)
    X: np.ndarray       # (M, K+1, n)
    dW: np.ndarray      # (M, K, d)
    u: np.ndarray       # (K, k) control on each cell
    var: np.ndarray     # (K,) variance of each increment
    deterministic: bool
    u_tau: np.ndarray   # (k,) control active at tau

    @property
    def K(self) -> int:
        return len(self.times) - 1

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @classmethod
    def build(cls, ensemble: PathEnsemble, left: int, frac: float) -> "Horizon":
        grid = ensemble.grid
        nodes = grid.nodes
        X = ensemble.X
        u = ensemble.control.values
        if frac > 0.0:
            K = left + 1
            times = np.append(nodes[: left + 1], nodes[left] + frac * grid.dt)
            if frac == 1.0:
                times[-1] = nodes[left + 1]
            Xh = np.concatenate([X[:, : left + 1], (X[:, left] + frac * (X[:, left + 1] - X[:, left]))[:, None]], axis=1)
            dW = ensemble.dW[:, :K].copy()
            dW[:, -1] *= frac
            var = np.full(K, grid.dt)
            var[-1] = frac * frac * grid.dt
        else:
            K = left
            times = nodes[: left + 1].copy()
            Xh = X[:, : left + 1]
            dW = ensemble.dW[:, :K]
            var = np.full(K, grid.dt)
        return cls(times, np.ascontiguousarray(Xh), dW, u[:K], var, ensemble.deterministic, u[left])

    @classmethod
    def full(cls, ensemble: PathEnsemble) -> "Horizon":
        return cls.build(ensemble, ensemble.grid.N - 1, 1.0)

    def args(self, which: str, Y=None, Z=None) -> dict:
        """Flattened coefficient arguments at the left or right end of every cell.

        ``Y`` has shape ``(M, K+1, m)`` and ``Z`` shape ``(M, K, m, d)``; the
        control and ``Z`` of cell ``i`` are used at both of its ends.
        """
        M, K = self.M, self.K
        sl = slice(0, K) if which == "left" else slice(1, K + 1)
        out = {
            "t": np.tile(self.times[sl], M),
            "x": self.X[:, sl].reshape(M * K, -1),
            "u": np.tile(self.u, (M, 1)),
        }
        if Y is not None:
            out["y"] = Y[:, sl].reshape(M * K, -1)
        if Z is not None:
            out["z"] = Z.reshape((M * K,) + Z.shape[2:])
        return out


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------

def basis(x: np.ndarray, degree: int) -> np.ndarray:
    """Polynomial basis of total degree ``degree`` in standardized coordinates."""
    M, n = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    s = (x - mu) / sd
    cols = [np.ones(M)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), deg):
            c = np.ones(M)
            for j in combo:
                c = c * s[:, j]
            cols.append(c)
    return np.stack(cols, axis=1)


class Regressor:
    """Ridge least squares on a fixed design matrix, factored once."""

    def __init__(self, A: np.ndarray, step: int):
        self.A = A
        M = A.shape[0]
        G = A.T @ A / M + RIDGE * np.eye(A.shape[1])
        if not np.all(np.isfinite(G)):
            raise SingularRegression(step)
        try:
            self.chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise SingularRegression(step) from None
        self.M = M

    def fit(self, b: np.ndarray) -> np.ndarray:
        """Fitted values of ``b`` (shape ``(M, ...)``) projected on the basis."""
        flat = b.reshape(self.M, -1)
        rhs = self.A.T @ flat / self.M
        c = np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, rhs))
        return (self.A @ c).reshape(b.shape)


# ---------------------------------------------------------------------------
# linear equations
# ---------------------------------------------------------------------------

def _mv(A, v):
    return np.einsum("...ij,...j->...i", A, v)


def solve_linear_forward(h: Horizon, Q0: np.ndarray, A_l, A_r, F_l, F_r,
                         B=None, G=None, error=NonFiniteAdjoint, euler: bool = False) -> np.ndarray:
    """Solve ``dQ = (A Q + F) dt + sum_j (B_j Q + G_j) dW^j`` forward on the horizon.

    ``A_*`` have shape ``(M, K, r, r)``, ``F_*`` shape ``(M, K, r)``, values at
    the left and right end of each cell. ``B`` is ``(M, K, d, r, r)`` and ``G``
    is ``(M, K, d, r)``, used only in the stochastic case (left ends).
    Deterministic problems use RK4 with the midpoint coefficient averaged
    unless ``euler`` asks for the scheme the state itself is simulated with.
    """
    M, K = h.M, h.K
    r = Q0.shape[-1]
    Q = np.empty((M, K + 1, r))
    Q[:, 0] = Q0
    steps = h.steps
    for i in range(K):
        q = Q[:, i]
        dt = steps[i]
        if h.deterministic and not euler:
            Am, Fm = 0.5 * (A_l[:, i] + A_r[:, i]), 0.5 * (F_l[:, i] + F_r[:, i])
            k1 = _mv(A_l[:, i], q) + F_l[:, i]
            k2 = _mv(Am, q + 0.5 * dt * k1) + Fm
            k3 = _mv(Am, q + 0.5 * dt * k2) + Fm
            k4 = _mv(A_r[:, i], q + dt * k3) + F_r[:, i]
            nxt = q + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        else:
            nxt = q + (_mv(A_l[:, i], q) + F_l[:, i]) * dt
            if B is not None:
                diff = np.einsum("bjrs,bs->bjr", B[:, i], q)
                if G is not None:
                    diff = diff + G[:, i]
                nxt = nxt + np.einsum("bjr,bj->br", diff, h.dW[:, i])
        if not np.all(np.isfinite(nxt)):
            raise error(i + 1)
        Q[:, i + 1] = nxt
    return Q


def solve_linear_backward(h: Horizon, terminal: np.ndarray, A_l, A_r, F_l, F_r,
                          C=None, degree: int = 2, error=NonFiniteAdjoint,
                          regressors: list | None = None):
    """Solve ``dP = -(A P + sum_j C_j K^j + F) dt + K dW`` backward from ``P(tau)``.

    Returns ``(P, K)`` with shapes ``(M, K+1, r)`` and ``(M, K, r, d)``.
    ``C`` has shape ``(M, K, d, r, r)`` (left ends). Deterministic problems use
    RK4 and return a zero ``K``.
    """
    M, Kc = h.M, h.K
    r = terminal.shape[-1]
    d = h.dW.shape[-1]
    P = np.empty((M, Kc + 1, r))
    Kout = np.zeros((M, Kc, r, d))
    P[:, Kc] = terminal
    steps = h.steps
    for i in range(Kc - 1, -1, -1):
        p = P[:, i + 1]
        dt = steps[i]
        if h.deterministic:
            # integrate P' = -(A P + F) from the right end to the left end
            Am, Fm = 0.5 * (A_l[:, i] + A_r[:, i]), 0.5 * (F_l[:, i] + F_r[:, i])
            k1 = -(_mv(A_r[:, i], p) + F_r[:, i])
            k2 = -(_mv(Am, p - 0.5 * dt * k1) + Fm)
            k3 = -(_mv(Am, p - 0.5 * dt * k2) + Fm)
            k4 = -(_mv(A_l[:, i], p - dt * k3) + F_l[:, i])
            nxt = p - dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        else:
            reg = regressors[i] if regressors is not None else Regressor(basis(h.X[:, i], degree), i)
            e = reg.fit(p)
            kk = reg.fit((p - e)[:, :, None] * h.dW[:, i, None, :] / h.var[i])
            drift = _mv(A_l[:, i], e) + F_l[:, i]
            if C is not None:
                drift = drift + np.einsum("bjrs,bsj->br", C[:, i], kk)
            nxt = e + drift * dt
            Kout[:, i] = kk
        if not np.all(np.isfinite(nxt)):
            raise error(i)
        P[:, i] = nxt
    return P, Kout


def regressors_for(h: Horizon, degree: int) -> list[Regressor] | None:
    """One factored regressor per horizon cell (None in deterministic mode)."""
    if h.deterministic:
        return None
    return [Regressor(basis(h.X[:, i], degree), i) for i in range(h.K)]
