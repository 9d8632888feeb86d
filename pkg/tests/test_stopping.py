import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from varhor.errors import DegenerateH, DirectionLeavesBox
from varhor.model import ControlPath, TimeGrid, builtin
from varhor.sim import simulate_forward
from varhor.stopping import (Case, extrapolation_weights, h_bar, h_integrand, h_process, stopping_time,
                             tau_derivative)

from conftest import LN2, inline

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _stop(spec, c, N=10000, M=1, seed=0):
    ens = simulate_forward(spec, ControlPath.constant(TimeGrid(N, spec.T), c) if np.ndim(c) == 0
                           else ControlPath(TimeGrid(N, spec.T), c), M=M, seed=seed)
    return ens, stopping_time(spec, ens)


def test_example_terminal_time(optimal):
    s = optimal.stop
    assert abs(s.tau_hat - LN2) <= 1e-3
    assert s.case_tag is Case.BEFORE_T
    nodes = optimal.ensemble.grid.nodes
    assert nodes[s.cross_index - 1] <= s.tau_hat <= nodes[s.cross_index]
    assert s.m_curve.values[s.cross_index - 1] < 1.0 <= s.m_curve.values[s.cross_index]


def test_larger_control_stops_earlier(suboptimal):
    assert abs(suboptimal.tau_hat - math.log(1.5)) <= 1e-3


@settings(max_examples=15, deadline=None)
@given(st.floats(1.0, 2.0))
def test_terminal_time_for_constant_controls(c):
    spec = builtin("paper-example")
    _, s = _stop(spec, c, N=4000)
    assert abs(s.tau_hat - math.log((1 + c) / c)) <= 1e-3


def test_terminal_time_decreases_with_control(example):
    taus = [_stop(example, c, N=2000)[1].tau_hat for c in (1.0, 1.3, 1.6, 2.0)]
    assert all(b < a for a, b in zip(taus, taus[1:]))


def test_unreachable_threshold(example):
    _, s = _stop(example.replace(alpha=10.0), 1.0, N=1000)
    assert s.case_tag is Case.NEVER and s.tau_hat == 1.0 and s.cross_index is None


def test_fixed_horizon_variant_never_stops(classical):
    for c in (1.0, 2.0):
        _, s = _stop(classical, c, N=500)
        assert s.case_tag is Case.NEVER and s.tau_hat == classical.T


def test_constraint_met_at_start(example):
    _, s = _stop(example.replace(x0=(1.0,)), 1.0, N=100)
    assert s.tau_hat == 0.0 and s.cross_index == 0 and s.case_tag is Case.BEFORE_T


def test_crossing_in_last_cells_is_at_horizon(example):
    ens, s0 = _stop(example.replace(alpha=10.0), 1.0, N=1000)
    alpha = float(s0.m_curve.values[-1]) - 1e-9
    _, s = _stop(example.replace(alpha=alpha), 1.0, N=1000)
    assert s.case_tag is Case.AT_T
    assert s.tau_hat > 1.0 - 2 * 1e-3
    td = tau_derivative(example.replace(alpha=alpha), *_stop(example.replace(alpha=alpha), 1.0, N=1000),
                        np.ones((1000, 1)))
    assert td.case_tag is Case.AT_T and len(td.candidates) == 2 and td.candidates[1] == 0.0


def test_example_drift_of_the_mean(optimal):
    s = optimal.stop
    t = optimal.ensemble.grid.nodes
    np.testing.assert_allclose(s.h_curve.values, np.exp(t), atol=2e-4)
    assert abs(s.h_tau - 2.0) <= 1e-3


def test_linear_constraint_without_noise_has_no_second_order_term(example):
    B = 6
    rng = np.random.default_rng(0)
    x, u = rng.random((B, 1)), 1 + rng.random((B, 1))
    t = np.zeros(B)
    np.testing.assert_array_equal(h_integrand(example, t, x, u), (x + u)[:, 0])


def test_drift_of_the_mean_matches_its_slope(lq):
    N, M = 20, 100_000
    ens = simulate_forward(lq, ControlPath.constant(TimeGrid(N, 1.0), 0.5), M=M, seed=4)
    h = h_process(lq, ens)
    X2 = ens.X[:, :, 0] ** 2
    dt = ens.grid.dt
    for i in range(1, N):
        per_path = (X2[:, i + 1] - X2[:, i - 1]) / (2 * dt)
        se = per_path.std(ddof=1) / math.sqrt(M)
        tol = 3 * math.hypot(se, h.stderr[i]) + 0.25 * dt
        assert abs(per_path.mean() - h.values[i]) <= tol


def test_direction_derivative_of_drift(optimal, example):
    v = np.ones((optimal.control.grid.N, 1))
    hb = h_bar(example, optimal.ensemble, v)
    np.testing.assert_allclose(hb.values, np.exp(optimal.ensemble.grid.nodes), atol=1e-3)


def test_zero_direction(optimal, example):
    hb = h_bar(example, optimal.ensemble, np.zeros((optimal.control.grid.N, 1)))
    assert np.all(hb.values == 0.0)
    td = tau_derivative(example, optimal.ensemble, optimal.stop, 0.0)
    assert td.value == 0.0


def test_time_dependent_direction_matches_quadrature(example):
    N = 4000
    grid = TimeGrid(N, 1.0)
    ens = simulate_forward(example, ControlPath.constant(grid, 1.0))
    t = grid.nodes
    v = t[:-1, None].copy()
    hb = h_bar(example, ens, v).values
    s = np.linspace(0.0, 1.0, 200_001)
    for i in range(0, N, 400):
        ti = t[i]
        mask = s <= ti
        ss = s[mask]
        integral = _trapezoid(np.exp(ti - ss) * ss, ss) if ss.size > 1 else 0.0
        assert abs(hb[i] - (ti + integral)) <= 1e-3


def test_direction_leaving_box(suboptimal, example):
    with pytest.raises(DirectionLeavesBox):
        h_bar(example, suboptimal.ensemble, 1.0)


def test_terminal_time_derivative(optimal, example):
    td = tau_derivative(example, optimal.ensemble, optimal.stop, 1.0)
    assert td.case_tag is Case.BEFORE_T
    assert td.value == pytest.approx(0.5, rel=0.02)
    rho = 1e-3
    fd = (optimal.tau_hat - optimal.shifted(np.ones((10000, 1)), rho).tau_hat) / rho
    assert fd == pytest.approx(td.value, rel=0.02)


def test_terminal_time_derivative_is_linear(example):
    ens, s = _stop(example, 1.2, N=2000)
    v = np.sin(np.linspace(0, 3, 2000))[:, None] * 0.5
    a = tau_derivative(example, ens, s, v).value
    b = tau_derivative(example, ens, s, 2 * v).value
    assert b == pytest.approx(2 * a, rel=0.01)


def test_terminal_time_derivative_without_crossing(example):
    p = example.replace(alpha=10.0)
    ens, s = _stop(p, 1.0, N=500)
    td = tau_derivative(p, ens, s, 1.0)
    assert td.value == 0.0 and td.case_tag is Case.NEVER


def test_degenerate_drift_is_an_error():
    spec = inline({"f": "u1", "Phi": "x1"}, alpha=1.0, x0=(1.0,))
    ens = simulate_forward(spec, ControlPath.constant(TimeGrid(10, 1.0), 0.0))
    s = stopping_time(spec, ens)
    assert s.tau_hat == 0.0
    with pytest.raises(DegenerateH):
        tau_derivative(spec, ens, s, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-4, 1.0), min_size=2, max_size=4, unique=True),
       st.lists(st.floats(-5, 5), min_size=1, max_size=4))
def test_extrapolation_is_exact_for_low_degree(rhos, coef):
    rhos = sorted(set(round(r, 6) for r in rhos))
    if len(rhos) < 2 or min(np.diff(rhos)) < 1e-3:
        return
    coef = coef[: len(rhos)]
    w = extrapolation_weights(rhos)
    vals = np.polyval(coef[::-1], np.array(rhos))
    assert abs(w.sum() - 1.0) < 1e-9
    assert abs(w @ vals - coef[0]) <= 1e-6 * max(1.0, np.abs(vals).max() * np.abs(w).sum())
