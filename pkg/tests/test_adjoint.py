import math

import numpy as np
import pytest

from varhor import adjoint as adj
from varhor.model import ControlPath, TimeGrid
from varhor.pipeline import Pipeline, Settings

from conftest import inline


def test_example_adjoints_vanish(optimal):
    a = optimal.adjoint
    for arr in (a.p, a.k, a.q):
        assert np.abs(arr).max() <= 1e-12 if arr.size else True


def test_example_terminal_constant(optimal, example):
    terms = adj.terminal_terms(example, optimal.back, optimal.adjoint.q)
    assert terms.q_psi_tilde == 0.0 and terms.q_g == 0.0 and terms.beta_tilde == 0.0
    assert terms.l_tau == 1.0
    assert terms.script_L == -1.0


def test_example_terminal_constant_at_larger_control(suboptimal, example):
    assert adj.script_L(example, suboptimal.back, suboptimal.adjoint.q) == -2.0


def test_terminal_constant_vanishes_without_costs():
    spec = inline({"f": "x1+u1", "Phi": "x1"}, alpha=1.0, lo=(1.0,), hi=(2.0,))
    P = Pipeline(spec, ControlPath.constant(TimeGrid(500, 1.0), 1.0))
    assert adj.script_L(spec, P.back, P.adjoint.q) == 0.0


def test_initial_costate_from_recursive_cost():
    spec = inline({"f": "u1", "g": "x1", "Psi": "x1", "gamma": "y1", "Phi": "x1"})
    P = Pipeline(spec, ControlPath.constant(TimeGrid(100, 1.0), 0.5))
    assert P.adjoint.q[0, 0, 0] == -1.0


def test_forward_costate_closed_form():
    # dq = -q dt from q(0) = -1
    spec = inline({"f": "u1", "g": "y1", "gamma": "y1", "Phi": "x1"})
    P = Pipeline(spec, ControlPath.constant(TimeGrid(10000, 1.0), 0.0))
    t = P.back.times
    np.testing.assert_allclose(P.adjoint.q[0, :, 0], -np.exp(-t), atol=1e-6)


@pytest.mark.parametrize("sigma,M,tol", [("0", 1, 1e-12), ("1", 500, 1e-6)])
def test_constant_backward_costate(sigma, M, tol):
    # with noise k comes from a least-squares fit, so only roundoff-level zero
    spec = inline({"f": "u1", "sigma": sigma, "beta": "x1", "Phi": "x1"})
    P = Pipeline(spec, ControlPath.constant(TimeGrid(50, 1.0), 0.2), Settings(M=M, seed=3))
    np.testing.assert_allclose(P.adjoint.p, 1.0, atol=1e-12)
    assert np.abs(P.adjoint.k).max() <= tol


def test_costate_terminal_and_initial_slices(lq):
    P = Pipeline(lq, ControlPath.constant(TimeGrid(60, 1.0), 0.8), Settings(M=400, seed=7))
    a, back = P.adjoint, P.back
    gy = lq.gamma.grad("y", y=back.y0[None, :])[0]
    np.testing.assert_array_equal(a.q[:, 0], np.broadcast_to(-gy, a.q[:, 0].shape))
    x = back.horizon.X[:, -1]
    want = lq.beta.grad("x", x=x) - np.einsum("bi,bir->br", a.q[:, -1], lq.Psi.grad("x", x=x))
    np.testing.assert_allclose(a.p[:, -1], want, rtol=0, atol=1e-12)


def test_deterministic_costate_round_trip(lq_free):
    # re-integrate dp = -(f_x p + g_x q + l_x) dt forward and recover the terminal slice
    P = Pipeline(lq_free, ControlPath.constant(TimeGrid(2000, 1.0), 0.9))
    h, a = P.back.horizon, P.adjoint
    assert P.stop.case_tag.value == "BeforeT"
    p = a.p[0, 0, 0]
    for i in range(h.K):
        dt = h.steps[i]
        F0 = a.q[0, i, 0] + h.X[0, i, 0]
        F1 = a.q[0, i + 1, 0] + h.X[0, i + 1, 0]
        p = p - dt * (F0 + 4 * 0.5 * (F0 + F1) + F1) / 6
    assert abs(p - a.p[0, -1, 0]) <= 1e-9


def test_hamiltonian_on_example(example):
    B = 5
    u = np.linspace(1, 2, B)[:, None]
    zeros = np.zeros((B, 1))
    H, Hu = adj.hamiltonian(example, 0.3, np.full((B, 1), 0.4), zeros, np.zeros((B, 1, 1)), u,
                            zeros, np.zeros((B, 1, 1)), zeros)
    np.testing.assert_array_equal(H, u[:, 0])
    np.testing.assert_array_equal(Hu[:, 0], 1.0)


def test_hamiltonian_vanishes_for_zero_coefficients():
    spec = inline({"f": "0", "Phi": "x1"})
    B = 3
    z1, z3 = np.ones((B, 1)), np.ones((B, 1, 1))
    H, Hu = adj.hamiltonian(spec, 0.1, z1, z1, z3, 0.5 * z1, z1, z3, z1)
    assert np.all(H == 0.0) and np.all(Hu == 0.0)


def test_hamiltonian_control_gradient_against_finite_difference(lq):
    rng = np.random.default_rng(4)
    B = 20
    x, y = rng.normal(size=(B, 1)), rng.normal(size=(B, 1))
    z, k = rng.normal(size=(B, 1, 1)), rng.normal(size=(B, 1, 1))
    p, q = rng.normal(size=(B, 1)), rng.normal(size=(B, 1))
    u = rng.uniform(-0.9, 0.9, (B, 1))
    _, Hu = adj.hamiltonian(lq, 0.2, x, y, z, u, p, k, q)
    h = 1e-6
    Hp, _ = adj.hamiltonian(lq, 0.2, x, y, z, u + h, p, k, q)
    Hm, _ = adj.hamiltonian(lq, 0.2, x, y, z, u - h, p, k, q)
    fd = (Hp - Hm) / (2 * h)
    np.testing.assert_allclose(Hu[:, 0], fd, rtol=1e-6, atol=1e-9)


def test_margins_match_the_worked_inequality(suboptimal, example):
    # for a constant control c the first-order condition reads
    # (u - c)(1 - c e^t / (1 + c)) >= 0
    from varhor.smp import check_smp
    rep = check_smp(example, suboptimal, [1.0, 1.25, 1.5, 1.75, 2.0], 50)
    grid = rep.margins["BeforeT"]
    want = (rep.probes[None, :, 0] - 2.0) * (1 - 2 * np.exp(rep.t)[:, None] / 3)
    np.testing.assert_allclose(grid, want, atol=1e-3)
