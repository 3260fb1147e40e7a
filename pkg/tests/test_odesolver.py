import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odegrud import tensor as T
from odegrud.cells import CellParams, GRUDDynamics
from odegrud.missingness import ValidationError
from odegrud.odesolver import (
    EXPONENTIAL_DECAY,
    EXPONENTIAL_GROWTH,
    DivergenceError,
    OdeFunc,
    SolverSpec,
    convergence_order,
    grad_adjoint,
    solve,
    step_counts,
)
from odegrud.tensor import GraphError, Tensor

from conftest import central_diff


def growth(y, t):
    return y


def test_zero_dynamics_keep_state_constant():
    y0 = Tensor([1.5, -2.0])
    for method in ("euler", "rk4"):
        ys = solve(lambda y, t: y * 0.0, y0, [0.0, 0.3, 1.7, 4.0], SolverSpec(method, 0.25))
        assert all(np.array_equal(y.data, y0.data) for y in ys)


def test_first_state_is_y0_and_one_state_per_grid_time():
    y0 = Tensor([0.7])
    ys = solve(growth, y0, [0.0, 0.5, 1.0], SolverSpec("rk4", 0.1))
    assert len(ys) == 3 and ys[0] is y0


def test_euler_hand_recurrence():
    ys = solve(growth, Tensor([1.0]), [0.0, 1.0], SolverSpec("euler", 0.5))
    assert ys[-1].data[0] == 2.25


def test_rk4_reproduces_e():
    ys = solve(growth, Tensor([1.0]), [0.0, 1.0], SolverSpec("rk4", 0.1))
    assert abs(ys[-1].data[0] - math.e) < 1e-5


def test_step_counts_use_ceiling():
    assert step_counts(1.0, 0.3).tolist() == 4
    assert step_counts(1.1, 0.1).tolist() == 11
    assert step_counts(0.0, 0.1).tolist() == 0


def test_convergence_orders():
    assert 0.8 <= convergence_order("euler", EXPONENTIAL_GROWTH) <= 1.2
    assert 3.8 <= convergence_order("rk4", EXPONENTIAL_GROWTH) <= 4.2
    assert 3.8 <= convergence_order("rk4", EXPONENTIAL_DECAY) <= 4.2


def test_grid_must_increase():
    for grid in ([0.0, 1.0, 1.0], [1.0, 0.5]):
        with pytest.raises(ValidationError):
            solve(growth, Tensor([1.0]), grid)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_time():
    with pytest.raises(DivergenceError) as info:
        solve(lambda y, t: y * y, Tensor([1.0]), [0.0, 20.0], SolverSpec("euler", 0.5))
    assert 0 < info.value.time < 20.0


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        SolverSpec(step_size=0.0)
    with pytest.raises(ValueError):
        SolverSpec(method="dopri5")


def test_per_row_grids_freeze_finished_rows():
    y0 = Tensor([[1.0], [1.0]])
    grid = np.array([[0.0, 0.0], [1.0, 0.0]])
    ys = solve(growth, y0, grid, SolverSpec("euler", 0.5))
    assert ys[-1].data[:, 0].tolist() == [2.25, 1.0]


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000), method=st.sampled_from(["euler", "rk4"]))
def test_linear_dynamics_give_linear_solutions(a, b, seed, method):
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(scale=0.5, size=(3, 3)))

    def f(y, t):
        return T.matmul(y, A)

    u, v = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    spec = SolverSpec(method, 0.1)
    grid = [0.0, 0.35, 1.0]
    with T.no_grad():
        lhs = solve(f, Tensor(a * u + b * v), grid, spec)[-1].data
        rhs = a * solve(f, Tensor(u), grid, spec)[-1].data + b * solve(f, Tensor(v), grid, spec)[-1].data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)


# -- gradients ---------------------------------------------------------------------------


def test_adjoint_with_zero_dynamics_sums_injected_gradients():
    grads = [np.array([1.0, 2.0]), None, np.array([0.5, -1.0]), np.array([3.0, 0.0])]
    dy0, dtheta = grad_adjoint(OdeFunc(lambda y, t: y * 0.0), np.array([0.3, 0.4]), [0.0, 1.0, 2.0, 3.0], grads)
    assert dy0.tolist() == [4.5, 1.0] and dtheta == []


def test_adjoint_grid_mismatch_is_rejected():
    with pytest.raises(GraphError):
        grad_adjoint(OdeFunc(growth), np.array([1.0]), [0.0, 1.0], [np.array([1.0])])


def _scalar_linear(mode):
    a = Tensor([[0.7]], requires_grad=True)
    y0 = Tensor([[1.3]], requires_grad=True)
    f = OdeFunc(lambda y, t: T.matmul(y, a), [a])
    ys = solve(f, y0, [0.0, 0.6, 1.5], SolverSpec("rk4", 0.1, mode))
    T.sum(ys[1] * 2.0 + ys[2] * ys[2]).backward()
    return a.grad[0, 0], y0.grad[0, 0]


def test_adjoint_matches_discretize_on_scalar_linear():
    da_d, dy_d = _scalar_linear("discretize")
    da_a, dy_a = _scalar_linear("adjoint")
    assert abs(da_a - da_d) <= 1e-6 * abs(da_d)
    assert abs(dy_a - dy_d) <= 1e-6 * abs(dy_d)


def _toy_grud(seed=0):
    rng = np.random.default_rng(seed)
    params = CellParams.init(2, 3, rng, mask_dim=2)
    for p in params.parameters():
        p.data += rng.normal(scale=0.3, size=p.shape)
    y0 = np.concatenate([rng.normal(size=(2, 2)), np.array([[1.0, 0.0], [0.0, 1.0]]), rng.normal(size=(2, 3))], axis=1)
    return GRUDDynamics(params, 2), y0


def test_adjoint_matches_finite_differences_on_grud_dynamics():
    dyn, y0 = _toy_grud()
    grid = [0.0, 0.4, 1.0]
    weights = np.random.default_rng(1).normal(size=y0.shape)
    spec = SolverSpec("rk4", 0.25, "adjoint")

    def loss():
        ys = solve(dyn, Tensor(y0), grid, spec)
        return T.sum(ys[-1] * weights) + T.sum(ys[1] * ys[1])

    ys = solve(dyn, Tensor(y0), grid, spec)
    lval = T.sum(ys[-1] * weights) + T.sum(ys[1] * ys[1])
    dyn.cell.W.grad = None
    lval.backward()
    analytic = [p.grad.copy() for p in dyn.params]
    numeric = central_diff(lambda: loss().data, [p.data for p in dyn.params])
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
        assert rel.max() < 1e-3


def test_adjoint_and_discretize_agree_on_grud_dynamics():
    results = {}
    for mode in ("discretize", "adjoint"):
        dyn, y0 = _toy_grud(3)
        y = Tensor(y0, requires_grad=True)
        ys = solve(dyn, y, [0.0, 0.5, 1.25], SolverSpec("rk4", 0.25, mode))
        T.sum(T.tanh(ys[-1]) + ys[1] * 0.5).backward()
        results[mode] = [y.grad] + [p.grad for p in dyn.params]
    for a, d in zip(results["adjoint"], results["discretize"]):
        assert np.max(np.abs(a - d)) <= 1e-3 * max(np.max(np.abs(d)), 1e-12)
