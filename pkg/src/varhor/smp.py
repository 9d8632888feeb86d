"""Variational equations, the directional derivative of the cost and the
first-order necessary condition on the moving horizon.

For a direction ``v`` the state variation ``xi`` solves

    dxi = (f_x xi + f_u v) dt + (sigma_x xi + sigma_u v) dW,   xi(0) = 0

and the backward variation ``(eta, zeta)`` solves

    deta = (g_x xi + g_y eta + g_z zeta + g_u v) dt + zeta dW

with terminal value ``kappa = Psi_x xi + (g - Psi~) I`` at ``tau``, where
``I`` is the rate at which the terminal time moves back along ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adjoint as adj
from .errors import DegenerateH, DirectionLeavesBox, NonFiniteState
from .linear import Horizon, solve_linear_backward, solve_linear_forward
from .model import ControlPath, ProblemSpec
from .pipeline import Pipeline
from .sim import Curve, PathEnsemble
from .stopping import (DEFAULT_RHOS, H_GUARD, Case, StoppingResult, TauDerivative, as_direction,
                       h_bar, h_integrand, tau_derivative, _node_controls)


# ---------------------------------------------------------------------------
# forward variation
# ---------------------------------------------------------------------------

def variational_forward(spec: ProblemSpec, ensemble: PathEnsemble, direction) -> np.ndarray:
    """State variation ``xi`` on the full grid, shape ``(M, N+1, n)``.

    Stepped with Euler like the state, so it is the exact derivative of the
    simulated paths.
    """
    v = as_direction(ensemble.control, direction)
    h = Horizon.full(ensemble)
    M, K, n = h.M, h.K, spec.n
    A, F = {}, {}
    for w in ("left", "right"):
        A[w] = adj.cell_grad(spec.f, "x", h, w)
        F[w] = np.einsum("bkia,ka->bki", adj.cell_grad(spec.f, "u", h, w), v)
    B = G = None
    if not h.deterministic:
        B = np.transpose(adj.cell_grad(spec.sigma, "x", h, "left"), (0, 1, 3, 2, 4))
        G = np.transpose(np.einsum("bkija,ka->bkij", adj.cell_grad(spec.sigma, "u", h, "left"), v),
                         (0, 1, 3, 2))
    return solve_linear_forward(h, np.zeros((M, n)), A["left"], A["right"], F["left"], F["right"],
                                B, G, error=lambda step: NonFiniteState(0, step, "variation"),
                                euler=True)


def h_bar_analytic(spec: ProblemSpec, ensemble: PathEnsemble, direction, xi=None) -> Curve:
    """Directional derivative of ``h`` through ``xi`` (zero-diffusion problems only)."""
    if not spec.deterministic:
        raise ValueError("the analytic route is only available without diffusion")
    v = as_direction(ensemble.control, direction)
    if xi is None:
        xi = variational_forward(spec, ensemble, v)
    x = ensemble.X[0]
    t = ensemble.grid.nodes
    u = _node_controls(ensemble.control)
    vn = np.vstack([v, v[-1:]])
    f = spec.f.value(t=t, x=x, u=u)
    fx = spec.f.grad("x", t=t, x=x, u=u)
    fu = spec.f.grad("u", t=t, x=x, u=u)
    phx = spec.Phi.grad("x", x=x)
    phxx = spec.Phi.hess(x=x)
    dx = xi[0]
    val = (np.einsum("br,brs,bs->b", f, phxx, dx)
           + np.einsum("br,brs,bs->b", phx, fx, dx)
           + np.einsum("br,bra,ba->b", phx, fu, vn))
    return Curve(ensemble.grid, val, np.zeros_like(val))


# ---------------------------------------------------------------------------
# backward variation
# ---------------------------------------------------------------------------

def on_horizon(values: np.ndarray, h_left: int, frac: float) -> np.ndarray:
    """Restrict full-grid node values ``(M, N+1, r)`` to a horizon ending at ``t_left + frac*dt``."""
    if frac > 0.0:
        end = values[:, h_left] + frac * (values[:, h_left + 1] - values[:, h_left])
        return np.concatenate([values[:, : h_left + 1], end[:, None]], axis=1)
    return values[:, : h_left + 1]


@dataclass(frozen=True, eq=False)
class VariationalSolution:
    xi: np.ndarray            # (M, N+1, n) on the full grid
    eta: np.ndarray           # (M, K+1, m) on the horizon
    zeta: np.ndarray          # (M, K, m, d)
    kappa_terminal: np.ndarray  # (M, m)
    tau_rate: float           # I, the value used in kappa
    branch: str


def kappa(spec: ProblemSpec, back, xi_tau: np.ndarray, rate: float) -> np.ndarray:
    """Terminal value of ``eta``: ``Psi_x xi + (g - Psi~) * rate`` per path."""
    t, x, y, z, u = adj.terminal_state(spec, back)
    out = np.einsum("bir,br->bi", spec.Psi.grad("x", x=x), xi_tau)
    if rate != 0.0:
        M = x.shape[0]
        g = spec.g.value(t=np.full(M, t), x=x, y=y, z=z, u=u)
        out = out + (g - adj.psi_tilde(spec, back)) * rate
    return out


def solve_eta(spec: ProblemSpec, h: Horizon, Y, Z, xi_h: np.ndarray, v: np.ndarray,
              terminal: np.ndarray, degree: int):
    """Linear backward solve for ``(eta, zeta)`` on horizon ``h``."""
    m, d = spec.m, spec.d
    K = h.K
    if K == 0:
        return terminal[:, None, :].copy(), np.zeros((h.M, 0, m, d))
    A, F = {}, {}
    for w, sl in (("left", slice(0, K)), ("right", slice(1, K + 1))):
        A[w] = -adj.cell_grad(spec.g, "y", h, w, Y, Z)
        gx = adj.cell_grad(spec.g, "x", h, w, Y, Z)
        gu = adj.cell_grad(spec.g, "u", h, w, Y, Z)
        F[w] = -(np.einsum("bkir,bkr->bki", gx, xi_h[:, sl]) + np.einsum("bkia,ka->bki", gu, v[:K]))
    C = None
    if not h.deterministic:
        gz = adj.cell_grad(spec.g, "z", h, "left", Y, Z).reshape(h.M, K, m, m, d)
        C = -np.transpose(gz, (0, 1, 4, 2, 3))
    return solve_linear_backward(h, terminal, A["left"], A["right"], F["left"], F["right"],
                                 C, degree)


def mean_constraint_rate(spec: ProblemSpec, state: Pipeline, xi: np.ndarray) -> float:
    """``E[Phi_x(X(tau)) xi(tau)]``, the fixed-time derivative of the constraint."""
    stop = state.stop
    xi_tau = on_horizon(xi, stop.left, stop.frac)[:, -1]
    x_tau = state.back.horizon.X[:, -1]
    return float(np.mean(np.einsum("br,br->b", spec.Phi.grad("x", x=x_tau), xi_tau)))


def tau_rates(spec: ProblemSpec, state: Pipeline, direction, rhos=DEFAULT_RHOS,
              xi: np.ndarray | None = None) -> TauDerivative:
    """Terminal-time rates; with ``xi`` the numerator comes from the state
    variation, which matches the interpolated crossing of the discrete mean."""
    if xi is None or state.stop.case_tag is Case.NEVER:
        return tau_derivative(spec, state.ensemble, state.stop, direction, rhos)
    return tau_derivative(spec, state.ensemble, state.stop, direction, rhos,
                          m_rate=mean_constraint_rate(spec, state, xi))


def variational_backward(spec: ProblemSpec, state: Pipeline, direction, xi=None,
                         rates: TauDerivative | None = None,
                         rhos=DEFAULT_RHOS) -> list[VariationalSolution]:
    """One solution per terminal-time candidate (two in the AtT case)."""
    v = as_direction(state.control, direction)
    if xi is None:
        xi = variational_forward(spec, state.ensemble, v)
    if rates is None:
        rates = tau_rates(spec, state, v, rhos, xi)
    back = state.back
    stop = state.stop
    h = back.horizon
    xi_h = on_horizon(xi, stop.left, stop.frac)
    labels = ["i", "ii"] if stop.case_tag is Case.AT_T else [str(stop.case_tag)]
    out = []
    for label, rate in zip(labels, rates.candidates):
        term = kappa(spec, back, xi_h[:, -1], rate)
        eta, zeta = solve_eta(spec, h, back.Y, back.Z, xi_h, v, term, back.basis_degree)
        out.append(VariationalSolution(xi, eta, zeta, term, rate, label))
    return out


# ---------------------------------------------------------------------------
# directional derivative of the cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateauxResult:
    value: float
    candidates: tuple[float, ...]
    tau_rate: TauDerivative


def _running_variation(spec: ProblemSpec, back, xi_h, sol: VariationalSolution, v) -> float:
    h = back.horizon
    M, K = h.M, h.K
    if K == 0:
        return 0.0
    m, d = spec.m, spec.d
    ends = []
    for w, sl in (("left", slice(0, K)), ("right", slice(1, K + 1))):
        lx = adj.cell_grad(spec.l, "x", h, w, back.Y, back.Z)
        ly = adj.cell_grad(spec.l, "y", h, w, back.Y, back.Z)
        lz = adj.cell_grad(spec.l, "z", h, w, back.Y, back.Z).reshape(M, K, m, d)
        lu = adj.cell_grad(spec.l, "u", h, w, back.Y, back.Z)
        ends.append(np.einsum("bkr,bkr->bk", lx, xi_h[:, sl])
                    + np.einsum("bkr,bkr->bk", ly, sol.eta[:, sl])
                    + np.einsum("bkrj,bkrj->bk", lz, sol.zeta)
                    + np.einsum("bka,ka->bk", lu, v[:K]))
    return float((0.5 * (ends[0] + ends[1]) * h.steps).sum(axis=1).mean())


def gateaux_cost(spec: ProblemSpec, state: Pipeline, direction, rhos=DEFAULT_RHOS,
                 solutions: list[VariationalSolution] | None = None) -> GateauxResult:
    """Derivative of the cost along ``direction``, one value per terminal-time candidate."""
    v = as_direction(state.control, direction)
    back = state.back
    stop = state.stop
    if solutions is None:
        xi = variational_forward(spec, state.ensemble, v)
        rates = tau_rates(spec, state, v, rhos, xi)
        solutions = variational_backward(spec, state, v, xi=xi, rates=rates)
    else:
        rates = tau_rates(spec, state, v, rhos, solutions[0].xi)
    terms = adj.terminal_terms(spec, back, state.adjoint.q)
    _, x_tau, _, _, _ = adj.terminal_state(spec, back)
    vals = []
    for sol in solutions:
        xi_h = on_horizon(sol.xi, stop.left, stop.frac)
        run = _running_variation(spec, back, xi_h, sol, v)
        shift = -(terms.beta_tilde + terms.l_tau) * sol.tau_rate
        term = float(np.mean(np.einsum("br,br->b", spec.beta.grad("x", x=x_tau), xi_h[:, -1])))
        gy = spec.gamma.grad("y", y=back.y0[None, :])[0]
        init = float(gy @ sol.eta[:, 0].mean(axis=0))
        vals.append(run + shift + term + init)
    return GateauxResult(vals[0], tuple(vals), rates)


# ---------------------------------------------------------------------------
# necessary-condition margins
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SMPReport:
    case_tag: Case
    tau_hat: float
    script_L: float | None
    h_tau: float
    t: np.ndarray                 # (T,) probe times
    probes: np.ndarray            # (P, k)
    margins: dict = field(repr=False)   # branch -> (T, P)
    min_margin: float = np.inf
    argmin: tuple | None = None

    @property
    def branches(self) -> list[str]:
        return list(self.margins)

    def rows(self):
        for b, grid in self.margins.items():
            for i, t in enumerate(self.t):
                for j, u in enumerate(self.probes):
                    yield t, u, grid[i, j], b


def _unit_hbar(spec: ProblemSpec, state: Pipeline, rhos) -> np.ndarray:
    """``h-bar`` along each constant unit direction, shape ``(k, N+1)``."""
    out = []
    N = state.control.grid.N
    for a in range(spec.k):
        e = np.zeros((N, spec.k))
        e[:, a] = 1.0
        try:
            out.append(h_bar(spec, state.ensemble, e, rhos).values)
        except DirectionLeavesBox:
            out.append(-h_bar(spec, state.ensemble, -e, rhos).values)
    return np.array(out)


def probe_indices(K: int, t_nodes: int) -> np.ndarray:
    if K == 0:
        return np.zeros(0, dtype=int)
    return np.unique(np.round(np.linspace(0, K - 1, t_nodes)).astype(int))


def check_smp(spec: ProblemSpec, state: Pipeline, u_probes, t_nodes: int = 50,
              use_hbar: bool = True, rhos=DEFAULT_RHOS) -> SMPReport:
    """Evaluate the first-order condition on a grid of probe values and times."""
    stop = state.stop
    back = state.back
    ad = state.adjoint
    probes = np.asarray(u_probes, dtype=float).reshape(len(u_probes), -1)
    if probes.shape[1] != spec.k:
        probes = probes.reshape(-1, spec.k)
    h = back.horizon
    idx = probe_indices(h.K, t_nodes)
    t = h.times[idx]
    Hu = adj.hamiltonian_u_cells(spec, back, ad).mean(axis=0)[idx]     # (T, k)
    ubar = state.control.values[idx]                                   # (T, k)
    c = probes[None, :, :] - ubar[:, None, :]                          # (T, P, k)
    base = np.einsum("tk,tpk->tp", Hu, c)
    case = stop.case_tag
    L = None
    margins = {}
    if case is Case.NEVER or not use_hbar:
        margins[str(case)] = base
    else:
        if abs(stop.h_tau) <= H_GUARD:
            raise DegenerateH(stop.h_tau)
        L = adj.script_L(spec, back, ad.q)
        hb = _unit_hbar(spec, state, rhos)[:, idx].T                   # (T, k)
        corr = L * np.einsum("tk,tpk->tp", hb, c) / stop.h_tau
        if case is Case.AT_T:
            margins["i"] = base + corr
            margins["ii"] = base
        else:
            margins[str(case)] = base + corr
    min_margin, argmin = np.inf, None
    nontrivial = np.any(np.abs(c) > 0, axis=2)
    for grid in margins.values():
        if grid.size == 0:
            continue
        min_margin = min(min_margin, float(grid.min()))
        masked = np.where(nontrivial, grid, np.inf) if nontrivial.any() else grid
        i, j = np.unravel_index(int(np.argmin(masked)), masked.shape)
        if argmin is None or masked[i, j] < argmin[2]:
            argmin = (float(t[i]), probes[j].tolist(), float(masked[i, j]))
    return SMPReport(case, stop.tau_hat, L, stop.h_tau, t, probes, margins, min_margin,
                     None if argmin is None else argmin[:2])


# ---------------------------------------------------------------------------
# convergence of the rho-moving systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceRow:
    rho: float
    d_tau: float
    err_eta: float
    err_Y: float
    err_p: float


def _interp_in_time(values: np.ndarray, times: np.ndarray, t: float) -> np.ndarray:
    j = int(np.searchsorted(times, t, side="right")) - 1
    j = min(max(j, 0), len(times) - 1)
    if j == len(times) - 1 or times[j] == t:
        return values[:, j]
    w = (t - times[j]) / (times[j + 1] - times[j])
    return values[:, j] + w * (values[:, j + 1] - values[:, j])


def _truncate(state: Pipeline, left: int, frac: float):
    """Reference trajectory restricted to the horizon ending at ``t_left + frac*dt``."""
    back = state.back
    h = Horizon.build(state.ensemble, left, frac)
    if not back.horizon.deterministic and h.deterministic:
        from dataclasses import replace
        h = replace(h, deterministic=False)
    K = h.K
    tw = h.times[-1]
    Y = np.concatenate([back.Y[:, :K], _interp_in_time(back.Y, back.times, tw)[:, None]], axis=1)
    Z = back.Z[:, :K]
    q = np.concatenate([state.adjoint.q[:, :K], _interp_in_time(state.adjoint.q, back.times, tw)[:, None]], axis=1)
    return h, Y, Z, q


def rho_convergence(spec: ProblemSpec, state: Pipeline, direction, rho_list,
                    hbar_rhos=DEFAULT_RHOS) -> list[ConvergenceRow]:
    """Distances between the rho-moving systems and their limits, one row per rho."""
    v = as_direction(state.control, direction)
    stop = state.stop
    xi = variational_forward(spec, state.ensemble, v)
    limit = variational_backward(spec, state, v, xi=xi, rhos=hbar_rhos)[0]
    ad = state.adjoint
    back = state.back
    grid = state.control.grid
    rows = []
    for rho in rho_list:
        other = state.shifted(v, rho)
        s_rho = other.stop
        d_tau = abs(s_rho.tau_hat - stop.tau_hat)
        if not np.any(v):
            rows.append(ConvergenceRow(rho, d_tau, 0.0, 0.0, 0.0))
            continue
        w = stop if stop.tau_hat <= s_rho.tau_hat else s_rho
        h, Y, Z, q = _truncate(state, w.left, w.frac)
        xi_h = on_horizon(xi, w.left, w.frac)
        tw = h.times[-1]
        M = h.M
        x_w = h.X[:, -1]
        u_w = np.broadcast_to(h.u_tau, (M, spec.k))
        psi_x = spec.Psi.grad("x", x=x_w)
        term = np.einsum("bir,br->bi", psi_x, xi_h[:, -1])
        if stop.case_tag is not Case.NEVER:
            D = (s_rho.tau_hat - stop.tau_hat) / rho
            z_w = Z[:, -1] if h.K > 0 else np.zeros((M, spec.m, spec.d))
            g = spec.g.value(t=np.full(M, tw), x=x_w, y=Y[:, -1], z=z_w, u=u_w)
            ps = adj._ito_drift(spec.Psi, spec, tw, x_w, u_w, "Psi_xx")
            term = term + ps * D - g * D
        eta_r, _ = solve_eta(spec, h, Y, Z, xi_h, v, term, back.basis_degree)
        # rho-moving adjoint: same equation as p, terminal at the earlier time
        p_term = spec.beta.grad("x", x=x_w) - np.einsum("bi,bir->br", q[:, -1], psi_x)
        if h.K > 0:
            A, C = adj._backward_state_coefficients(spec, h)
            F = {}
            for wh, sl in (("left", slice(0, h.K)), ("right", slice(1, h.K + 1))):
                gx = adj.cell_grad(spec.g, "x", h, wh, Y, Z)
                lx = adj.cell_grad(spec.l, "x", h, wh, Y, Z)
                F[wh] = np.einsum("bkir,bki->bkr", gx, q[:, sl]) + lx
            p_r, _ = solve_linear_backward(h, p_term, A["left"], A["right"], F["left"], F["right"],
                                           C, back.basis_degree)
        else:
            p_r = p_term[:, None, :]
        # compare on grid nodes common to every object: t_0 .. t_c <= tau_w
        c = w.left if w.frac < 1.0 or w.left + 1 > grid.N else w.left + 1
        c = min(c, h.K, limit.eta.shape[1] - 1, other.back.Y.shape[1] - 1)
        sl = slice(0, c + 1)
        err_eta = float(np.max(np.mean(np.sum((eta_r[:, sl] - limit.eta[:, sl]) ** 2, axis=2), axis=0)))
        Yt = (other.back.Y[:, sl] - back.Y[:, sl]) / rho - eta_r[:, sl]
        err_Y = float(np.max(np.mean(np.sum(Yt ** 2, axis=2), axis=0)))
        err_p = float(np.max(np.mean(np.sum((p_r[:, sl] - ad.p[:, sl]) ** 2, axis=2), axis=0)))
        rows.append(ConvergenceRow(rho, d_tau, err_eta, err_Y, err_p))
    return rows
