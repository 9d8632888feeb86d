"""Adjoint processes, the Hamiltonian and the terminal-time constant.

With ``H = p.f + k:sigma + q.g + l`` the adjoints solve

    dq = -(g_y^T q + l_y) dt - (g_z^T q + l_z) dW,     q(0)   = -gamma_y(Y(0))
    dp = -H_x dt + k dW,                              p(tau) = beta_x - Psi_x^T q

``q`` runs forward from time zero and ``(p, k)`` backward from ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BackwardSolution
from .errors import MissingDerivative, NonFiniteAdjoint
from .linear import Horizon, solve_linear_backward, solve_linear_forward
from .model import Coefficient, ProblemSpec


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    p: np.ndarray  # (M, K+1, n)
    k: np.ndarray  # (M, K, n, d)
    q: np.ndarray  # (M, K+1, m)
    horizon: Horizon


def cell_grad(c: Coefficient, wrt: str, h: Horizon, which: str, Y=None, Z=None) -> np.ndarray:
    """Derivative of ``c`` at one end of every horizon cell, shape ``(M, K, *out, size)``."""
    args = {g: v for g, v in h.args(which, Y, Z).items() if g in c.groups}
    if not args:
        args = {"x": h.args(which)["x"]}
    out = c.grad(wrt, **args)
    return out.reshape((h.M, h.K) + out.shape[1:])


def cell_value(c: Coefficient, h: Horizon, which: str, Y=None, Z=None) -> np.ndarray:
    args = {g: v for g, v in h.args(which, Y, Z).items() if g in c.groups}
    out = c.value(**args)
    return out.reshape((h.M, h.K) + out.shape[1:])


def _z_split(a: np.ndarray, m: int, d: int) -> np.ndarray:
    """Reshape a trailing flattened ``z`` axis of size ``m*d`` into ``(m, d)``."""
    return a.reshape(a.shape[:-1] + (m, d))


def solve_q(spec: ProblemSpec, back: BackwardSolution) -> np.ndarray:
    """Forward adjoint ``q`` on the horizon, shape ``(M, K+1, m)``."""
    h = back.horizon
    m, d = spec.m, spec.d
    q0 = -spec.gamma.grad("y", y=back.y0[None, :])[0]
    Q0 = np.broadcast_to(q0, (h.M, m))
    if h.K == 0:
        return Q0[:, None, :].copy()
    Y, Z = back.Y, back.Z
    ends = {}
    for which in ("left", "right"):
        gy = cell_grad(spec.g, "y", h, which, Y, Z)             # (M,K,m,m)
        ly = cell_grad(spec.l, "y", h, which, Y, Z)             # (M,K,m)
        ends[which] = (-np.swapaxes(gy, -1, -2), -ly)
    B = G = None
    if not h.deterministic:
        gz = _z_split(cell_grad(spec.g, "z", h, "left", Y, Z), m, d)   # (M,K,i,r,j)
        lz = _z_split(cell_grad(spec.l, "z", h, "left", Y, Z), m, d)   # (M,K,r,j)
        B = -np.transpose(gz, (0, 1, 4, 3, 2))
        G = -np.transpose(lz, (0, 1, 3, 2))
    return solve_linear_forward(h, Q0, ends["left"][0], ends["right"][0],
                                ends["left"][1], ends["right"][1], B, G, NonFiniteAdjoint)


def _backward_state_coefficients(spec: ProblemSpec, h: Horizon):
    """Pieces shared by every equation of the form ``-dP = (f_x^T P + sigma_x^T K + F)dt - K dW``."""
    A = {w: np.swapaxes(cell_grad(spec.f, "x", h, w), -1, -2) for w in ("left", "right")}
    C = None
    if not h.deterministic:
        sx = cell_grad(spec.sigma, "x", h, "left")              # (M,K,s,j,r)
        C = np.transpose(sx, (0, 1, 3, 4, 2))                   # (M,K,j,r,s)
    return A, C


def solve_p(spec: ProblemSpec, back: BackwardSolution, q: np.ndarray):
    """Backward adjoint ``(p, k)`` on the horizon."""
    h = back.horizon
    Y, Z = back.Y, back.Z
    xT = h.X[:, -1]
    psi_x = spec.Psi.grad("x", x=xT)                            # (M,m,n)
    terminal = spec.beta.grad("x", x=xT) - np.einsum("bi,bir->br", q[:, -1], psi_x)
    if h.K == 0:
        return terminal[:, None, :], np.zeros((h.M, 0, spec.n, spec.d))
    A, C = _backward_state_coefficients(spec, h)
    F = {}
    for w, sl in (("left", slice(0, h.K)), ("right", slice(1, h.K + 1))):
        gx = cell_grad(spec.g, "x", h, w, Y, Z)                 # (M,K,m,n)
        lx = cell_grad(spec.l, "x", h, w, Y, Z)                 # (M,K,n)
        F[w] = np.einsum("bkir,bki->bkr", gx, q[:, sl]) + lx
    return solve_linear_backward(h, terminal, A["left"], A["right"], F["left"], F["right"],
                                 C, back.basis_degree, NonFiniteAdjoint)


def solve_adjoint(spec: ProblemSpec, back: BackwardSolution) -> AdjointSolution:
    q = solve_q(spec, back)
    p, k = solve_p(spec, back, q)
    return AdjointSolution(p, k, q, back.horizon)


def solve_lambda(spec: ProblemSpec, back: BackwardSolution):
    """Adjoint of the state for ``E[Phi(X(tau))]``: terminal value ``Phi_x(X(tau))``.

    Pairing it with the control derivatives gives the derivative of the mean
    constraint at ``tau`` in any direction, which equals the integral of the
    directional derivative of ``h`` up to ``tau``.
    """
    h = back.horizon
    terminal = spec.Phi.grad("x", x=h.X[:, -1])
    if h.K == 0:
        return terminal[:, None, :], np.zeros((h.M, 0, spec.n, spec.d))
    A, C = _backward_state_coefficients(spec, h)
    zero = np.zeros((h.M, h.K, spec.n))
    return solve_linear_backward(h, terminal, A["left"], A["right"], zero, zero,
                                 C, back.basis_degree, NonFiniteAdjoint)


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def hamiltonian(spec: ProblemSpec, t, x, y, z, u, p, k, q):
    """``(H, H_u)`` on a batch; ``k`` has shape ``(B, n, d)``, ``z`` shape ``(B, m, d)``."""
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    fu = dict(t=t, x=x, u=u)
    full = dict(t=t, x=x, y=y, z=z, u=u)
    f, s, g = spec.f.value(**fu), spec.sigma.value(**fu), spec.g.value(**full)
    H = (np.einsum("bi,bi->b", p, f) + np.einsum("bij,bij->b", k, s)
         + np.einsum("bi,bi->b", q, g) + spec.l.value(**full))
    Hu = (np.einsum("bi,bia->ba", p, spec.f.grad("u", **fu))
          + np.einsum("bij,bija->ba", k, spec.sigma.grad("u", **fu))
          + np.einsum("bi,bia->ba", q, spec.g.grad("u", **full))
          + spec.l.grad("u", **full))
    return H, Hu


def hamiltonian_u_cells(spec: ProblemSpec, back: BackwardSolution, adj: AdjointSolution,
                        which: str = "left") -> np.ndarray:
    """Per-path ``H_u`` at one end of every horizon cell, shape ``(M, K, k)``."""
    h = back.horizon
    M, K = h.M, h.K
    if K == 0:
        return np.zeros((M, 0, spec.k))
    sl = slice(0, K) if which == "left" else slice(1, K + 1)
    a = h.args(which, back.Y, back.Z)
    _, Hu = hamiltonian(spec, a["t"], a["x"], a["y"], a["z"], a["u"],
                        adj.p[:, sl].reshape(M * K, -1),
                        adj.k.reshape((M * K,) + adj.k.shape[2:]),
                        adj.q[:, sl].reshape(M * K, -1))
    return Hu.reshape(M, K, spec.k)


# ---------------------------------------------------------------------------
# terminal-time quantities
# ---------------------------------------------------------------------------

def _ito_drift(c: Coefficient, spec: ProblemSpec, t, x, u, label: str) -> np.ndarray:
    """``c_x f + 1/2 sum_j sigma_j^T c_xx sigma_j`` per path; trailing shape of ``c``."""
    tt = np.full(x.shape[0], t)
    f = spec.f.value(t=tt, x=x, u=u)
    out = np.einsum("b...r,br->b...", c.grad("x", x=x), f)
    if not spec.deterministic:
        try:
            cxx = c.hess(x=x)
        except NotImplementedError:
            raise MissingDerivative(label) from None
        s = spec.sigma.value(t=tt, x=x, u=u)
        out = out + 0.5 * np.einsum("brj,b...rs,bsj->b...", s, cxx, s)
    return out


@dataclass(frozen=True)
class TerminalTerms:
    q_psi_tilde: float   # E[q . Psi~]
    q_g: float           # E[q . g]
    beta_tilde: float    # E[beta~]
    l_tau: float         # E[l]

    @property
    def script_L(self) -> float:
        return self.q_psi_tilde - self.q_g - self.beta_tilde - self.l_tau


def terminal_state(spec: ProblemSpec, back: BackwardSolution):
    """``(t, x, y, z, u)`` at ``tau`` per path; ``z`` and ``u`` from the last cell."""
    h = back.horizon
    M = h.M
    x = h.X[:, -1]
    y = back.Y[:, -1]
    z = back.Z[:, -1] if h.K > 0 else np.zeros((M, spec.m, spec.d))
    u = np.broadcast_to(h.u_tau, (M, spec.k))
    return h.times[-1], x, y, z, u


def psi_tilde(spec: ProblemSpec, back: BackwardSolution, u_tau=None) -> np.ndarray:
    t, x, _, _, u = terminal_state(spec, back)
    if u_tau is not None:
        u = np.broadcast_to(u_tau, u.shape)
    return _ito_drift(spec.Psi, spec, t, x, u, "Psi_xx")


def terminal_terms(spec: ProblemSpec, back: BackwardSolution, q: np.ndarray,
                   u_tau=None) -> TerminalTerms:
    t, x, y, z, u = terminal_state(spec, back)
    if u_tau is not None:
        u = np.broadcast_to(u_tau, u.shape)
    M = x.shape[0]
    tt = np.full(M, t)
    qT = q[:, -1]
    full = dict(t=tt, x=x, y=y, z=z, u=u)
    ps = _ito_drift(spec.Psi, spec, t, x, u, "Psi_xx")
    bt = _ito_drift(spec.beta, spec, t, x, u, "beta_xx")
    g = spec.g.value(**full)
    return TerminalTerms(
        float(np.mean(np.einsum("bi,bi->b", qT, ps))),
        float(np.mean(np.einsum("bi,bi->b", qT, g))),
        float(np.mean(bt)),
        float(np.mean(spec.l.value(**full))),
    )


def script_L(spec: ProblemSpec, back: BackwardSolution, q: np.ndarray, u_tau=None) -> float:
    return terminal_terms(spec, back, q, u_tau).script_L
