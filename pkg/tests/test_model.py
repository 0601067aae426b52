import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from qihnmpc.model import (
    BoxSet,
    DiscreteModel,
    ModelError,
    TrajectoryDiverged,
    finite_difference_jacobians,
    get_model,
    linear_model,
    linearize,
    simulate_open_loop,
    two_state_benchmark,
)

unit = st.floats(-1.0, 1.0, allow_nan=False)


def test_origin_is_equilibrium(bench, euler_bench):
    for m in (bench, euler_bench):
        assert np.max(np.abs(m.step(np.zeros(2), np.zeros(1)))) <= 1e-12


def test_euler_steps_by_hand(euler_bench):
    np.testing.assert_allclose(euler_bench.step([1.0, 1.0], [0.0]), [1.1, 1.1], atol=1e-15)
    np.testing.assert_allclose(euler_bench.step([-3.0, 2.0], [0.0]), [-2.8, 1.7], atol=1e-15)


def test_euler_linearization(euler_bench):
    lin = linearize(euler_bench)
    np.testing.assert_allclose(lin.Phi, [[1.0, 0.1], [0.1, 1.0]], atol=1e-14)
    np.testing.assert_allclose(lin.Gamma, [[0.05], [0.05]], atol=1e-14)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(lin.Phi).real), [0.9, 1.1], atol=1e-14)


def test_exact_linearization_matches_zoh():
    # A = [[0,1],[1,0]], B = mu0 [1,1]; Gamma has the closed form mu0 (e^T - 1) [1,1]
    T, mu0 = 0.1, 0.5
    lin = linearize(two_state_benchmark(T, mu0))
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(lin.Phi, expm(A * T), rtol=1e-10)
    np.testing.assert_allclose(lin.Gamma.ravel(), [mu0 * math.expm1(T)] * 2, rtol=1e-10)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(lin.Phi).real), [math.exp(-T), math.exp(T)], rtol=1e-10)


def test_exact_flow_close_to_fine_euler():
    # independent integrator: 20000 explicit Euler substeps
    m = two_state_benchmark()
    x, u, h = np.array([0.7, -0.4]), np.array([1.3]), 0.1 / 20000
    y = x.copy()
    for _ in range(20000):
        y = y + h * np.array([y[1] + u[0] * (0.5 + 0.5 * y[0]), y[0] + u[0] * (0.5 - 2.0 * y[1])])
    np.testing.assert_allclose(m.step(x, u), y, atol=1e-5)


def test_linear_model_linearizes_to_itself():
    A = np.array([[0.3, 1.0], [0.0, -0.2]])
    B = np.array([[0.0], [1.0]])
    lin = linearize(linear_model(A, B))
    np.testing.assert_array_equal(lin.Phi, A)
    np.testing.assert_array_equal(lin.Gamma, B)


@settings(max_examples=100, deadline=None)
@given(unit, unit, unit)
def test_analytic_jacobians_match_finite_differences(x1, x2, u):
    for disc in ("exact", "euler"):
        m = two_state_benchmark(discretization=disc)
        x, v = np.array([x1, x2]), np.array([u])
        A, B = m.jacobians(x, v)
        Af, Bf = finite_difference_jacobians(m, x, v)
        np.testing.assert_allclose(A, Af, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(B, Bf, rtol=1e-6, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(unit, unit, st.floats(-2.0, 2.0))
def test_fused_step_matches_separate_calls(x1, x2, u):
    m = two_state_benchmark()
    x, v = np.array([x1, x2]), np.array([u])
    y, A, B = m.step_jac(x, v)
    A2, B2 = m.jacobians(x, v)
    np.testing.assert_allclose(y, m.step(x, v), rtol=0, atol=1e-15)
    np.testing.assert_allclose(A, A2, atol=1e-14)
    np.testing.assert_allclose(B, B2, atol=1e-14)


def test_batch_step_matches_pointwise(bench):
    rng = np.random.default_rng(3)
    X, U = rng.uniform(-1, 1, (20, 2)), rng.uniform(-2, 2, (20, 1))
    Y = bench.step_batch(X, U)
    for x, u, y in zip(X, U, Y):
        np.testing.assert_allclose(bench.step(x, u), y, atol=1e-15)


def test_simulate_open_loop(euler_bench):
    X = simulate_open_loop(euler_bench, [1.0, 1.0], [0.0, 0.0])
    np.testing.assert_allclose(X, [[1, 1], [1.1, 1.1], [1.21, 1.21]], atol=1e-14)
    np.testing.assert_array_equal(simulate_open_loop(euler_bench, [0, 0], np.zeros(5)), np.zeros((6, 2)))


def test_simulate_reports_divergence_step():
    m = linear_model([[1e200]], [[1.0]])
    with pytest.raises(TrajectoryDiverged) as exc:
        simulate_open_loop(m, [1e200], [0.0, 0.0, 0.0])
    assert exc.value.step == 1
    assert "trajectory diverged" in str(exc.value)


def test_non_differentiable_model_rejected():
    # cube root: infinite slope at the origin
    m = DiscreteModel(1, 1, lambda x, u: np.cbrt(x) + u,
                      analytic_jacobians=lambda x, u: (np.array([[np.inf]]), np.array([[1.0]])))
    with pytest.raises(ModelError, match="not differentiable at origin"):
        linearize(m)


def test_nonzero_equilibrium_rejected():
    with pytest.raises(ModelError, match="not an equilibrium"):
        DiscreteModel(1, 1, lambda x, u: x + 1.0)


def test_box_set_requires_interior_origin():
    with pytest.raises(ModelError):
        BoxSet(np.array([0.0]), np.array([1.0]))
    box = BoxSet(np.array([-1.0, -3.0]), np.array([2.0, 1.0]))
    np.testing.assert_array_equal(box.radius, [1.0, 1.0])
    assert box.contains([0.5, -2.9])
    assert box.violation([2.5, 0.0]) == pytest.approx(0.5)
    np.testing.assert_array_equal(box.clip([5.0, -5.0]), [2.0, -3.0])


def test_registry():
    assert get_model("two_state", discretization="euler").params["discretization"] == "euler"
    with pytest.raises(ModelError, match="unknown model"):
        get_model("pendulum")
    with pytest.raises(ModelError):
        two_state_benchmark(discretization="rk45")
