"""Fixed-step ODE integration on the autodiff graph, with an adjoint gradient mode.

A time grid is either shared (shape [n]) or per row (shape [n, N]) for a
state whose N rows evolve independently, e.g. a batch of series sampled at
different times. In the per-row case each row integrates its own interval
with its own step count; rows whose interval is already done are frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .missingness import ValidationError
from .tensor import GraphError, Tensor, enable_grad, grad, no_grad

METHODS = ("euler", "rk4")
GRADIENT_MODES = ("discretize", "adjoint")


class DivergenceError(RuntimeError):
    """The state became non-finite during integration."""

    def __init__(self, time):
        self.time = time
        super().__init__(f"non-finite ODE state at t={time}")


@dataclass(frozen=True)
class SolverSpec:
    method: str = "rk4"
    step_size: float = 0.25
    gradient_mode: str = "discretize"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}; expected one of {METHODS}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")


class OdeFunc:
    """Right-hand side ``f(y, t)`` together with the tensors it is differentiable in.

    Subclasses override ``__call__``; plain callables can be wrapped directly.
    ``params`` must list every requires-grad tensor that ``f`` reads other
    than ``y`` itself, or adjoint gradients will miss them.
    """

    def __init__(self, fn: Callable | None = None, params: Sequence[Tensor] = ()):
        self.fn = fn
        self.params = list(params)

    def __call__(self, y: Tensor, t):
        return self.fn(y, t)


def _params_of(f) -> list[Tensor]:
    return list(getattr(f, "params", ()))


def step_counts(gap, step_size: float) -> np.ndarray:
    """Uniform internal steps per interval: ceil(gap / step_size), 0 for empty intervals."""
    gap = np.asarray(gap, dtype=np.float64)
    # guard against 1.1/0.1 = 11.000000000000002 style round-up
    return np.where(gap > 0, np.ceil(gap / step_size - 1e-9), 0).astype(np.int64)


def _check_grid(t_grid) -> np.ndarray:
    grid = np.asarray(t_grid, dtype=np.float64)
    if grid.ndim not in (1, 2) or grid.shape[0] < 1:
        raise ValidationError(f"time grid must have shape [n] or [n, N], got {grid.shape}")
    gaps = np.diff(grid, axis=0)
    if grid.ndim == 1 and np.any(gaps <= 0):
        raise ValidationError("time grid must be strictly increasing")
    if grid.ndim == 2 and np.any(gaps < 0):
        raise ValidationError("per-row time grids must be non-decreasing")
    if not np.all(np.isfinite(grid)):
        raise ValidationError("time grid contains non-finite values")
    return grid


def _rk_step(f, y, t, dt, method):
    """One explicit step. ``dt`` is a float or an array shaped like ``y``."""
    if method == "euler":
        return y + f(y, t) * dt
    half = dt * 0.5
    t_half = t + (half if np.isscalar(dt) else _row_dt(dt) * 0.5)
    t_full = t + (dt if np.isscalar(dt) else _row_dt(dt))
    k1 = f(y, t)
    k2 = f(y + k1 * half, t_half)
    k3 = f(y + k2 * half, t_half)
    k4 = f(y + k3 * dt, t_full)
    return y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)


def _row_dt(dt_full: np.ndarray) -> np.ndarray:
    return dt_full.reshape(dt_full.shape[0], -1)[:, 0]


class _Schedule(NamedTuple):
    n_steps: int
    dts: list  # per step: float, or array shaped like the state
    times: list  # per step start time: float or [N]


def _schedule(t0, t1, step_size, state_shape) -> _Schedule:
    if np.ndim(t0) == 0:
        k = int(step_counts(t1 - t0, step_size))
        dt = (t1 - t0) / k if k else 0.0
        return _Schedule(k, [dt] * k, [t0 + j * dt for j in range(k)])
    t0 = np.asarray(t0, dtype=np.float64)
    gap = np.asarray(t1, dtype=np.float64) - t0
    if len(state_shape) < 1 or state_shape[0] != t0.shape[0]:
        raise ValueError(f"per-row grid with {t0.shape[0]} rows does not match state {state_shape}")
    k = step_counts(gap, step_size)
    k_max = int(k.max()) if k.size else 0
    h = np.where(k > 0, gap / np.maximum(k, 1), 0.0)
    bshape = (t0.shape[0],) + (1,) * (len(state_shape) - 1)
    dts, times = [], []
    for j in range(k_max):
        row = np.where(j < k, h, 0.0)
        dts.append(np.broadcast_to(row.reshape(bshape), state_shape).copy())
        times.append(t0 + j * h)
    return _Schedule(k_max, dts, times)


def _integrate(f, y: Tensor, t0, t1, spec: SolverSpec) -> Tensor:
    sched = _schedule(t0, t1, spec.step_size, y.shape)
    for dt, t in zip(sched.dts, sched.times):
        y = _rk_step(f, y, t, dt, spec.method)
        if not np.all(np.isfinite(y.data)):
            raise DivergenceError(t)
    return y


def solve(f, y0: Tensor, t_grid, spec: SolverSpec = SolverSpec()) -> list[Tensor]:
    """Integrate dy/dt = f(y, t) from ``t_grid[0]``; return the state at every grid time.

    The first returned state is ``y0`` itself. In ``discretize`` mode every
    internal step is recorded on the graph; in ``adjoint`` mode the forward
    pass is not recorded and gradients come from integrating the adjoint
    system backward.
    """
    grid = _check_grid(t_grid)
    if not isinstance(y0, Tensor):
        y0 = Tensor(y0)
    if spec.gradient_mode == "adjoint":
        return _solve_adjoint(f, y0, grid, spec)
    ys = [y0]
    y = y0
    for i in range(1, grid.shape[0]):
        y = _integrate(f, y, grid[i - 1], grid[i], spec)
        ys.append(y)
    return ys


# -- adjoint -------------------------------------------------------------------


def _forward_values(f, y0: np.ndarray, grid: np.ndarray, spec: SolverSpec) -> list[np.ndarray]:
    with no_grad():
        ys = [y0]
        y = Tensor(y0)
        for i in range(1, grid.shape[0]):
            y = _integrate(f, y, grid[i - 1], grid[i], spec)
            ys.append(y.data)
    return ys


def _aug_increment(f, params, y, a, t, dt):
    """dt-scaled right-hand side of the augmented (state, adjoint, param-adjoint) system."""
    y_leaf = Tensor(y, requires_grad=True)
    with enable_grad():
        out = f(y_leaf, t)
    cot = a * dt
    gs = grad(out, [y_leaf, *params], cot)
    return out.data * dt, -gs[0], [-g for g in gs[1:]]


def _adjoint_interval(f, params, y_end, a, t_start, t_end, spec):
    """Carry the adjoint from t_end back to t_start along the same step schedule."""
    sched = _schedule(t_start, t_end, spec.step_size, np.shape(y_end))
    g_theta = [np.zeros_like(p.data) for p in params]
    y = y_end
    for j in reversed(range(sched.n_steps)):
        dt = -sched.dts[j]
        if np.isscalar(dt):
            t = sched.times[j] + sched.dts[j]
            half_t, end_t = t + dt * 0.5, t + dt
        else:
            row = _row_dt(dt)
            t = sched.times[j] - row
            half_t, end_t = t + row * 0.5, t + row
        if spec.method == "euler":
            ky, ka, kt = _aug_increment(f, params, y, a, t, dt)
            y, a = y + ky, a + ka
            g_theta = [g + k for g, k in zip(g_theta, kt)]
            continue
        k1 = _aug_increment(f, params, y, a, t, dt)
        k2 = _aug_increment(f, params, y + 0.5 * k1[0], a + 0.5 * k1[1], half_t, dt)
        k3 = _aug_increment(f, params, y + 0.5 * k2[0], a + 0.5 * k2[1], half_t, dt)
        k4 = _aug_increment(f, params, y + k3[0], a + k3[1], end_t, dt)
        y = y + (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0
        a = a + (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0
        g_theta = [
            g + (c1 + 2 * c2 + 2 * c3 + c4) / 6.0
            for g, c1, c2, c3, c4 in zip(g_theta, k1[2], k2[2], k3[2], k4[2])
        ]
    return a, g_theta


def _adjoint_sweep(f, params, ys, grid, loss_grads, spec):
    """Backward sweep injecting ``loss_grads[i]`` at grid point i; returns (dL/dy0, dL/dparams)."""
    last = len(ys) - 1
    a = np.zeros_like(ys[0])
    g_theta = [np.zeros_like(p.data) for p in params]
    for i in range(last, 0, -1):
        if loss_grads[i] is not None:
            a = a + loss_grads[i]
        a, g = _adjoint_interval(f, params, ys[i], a, grid[i - 1], grid[i], spec)
        g_theta = [acc + gi for acc, gi in zip(g_theta, g)]
    if loss_grads[0] is not None:
        a = a + loss_grads[0]
    return a, g_theta


def _solve_adjoint(f, y0: Tensor, grid, spec) -> list[Tensor]:
    params = _params_of(f)
    ys = _forward_values(f, y0.data, grid, spec)
    outs = [y0]
    for i in range(1, len(ys)):

        def backward(g, i=i):
            seeds = [None] * (i + 1)
            seeds[i] = g
            a0, g_theta = _adjoint_sweep(f, params, ys[: i + 1], grid[: i + 1], seeds, spec)
            return (a0, *g_theta)

        outs.append(Tensor._result(ys[i], (y0, *params), backward))
    return outs


def grad_adjoint(f, y0, t_grid, loss_grads: Sequence, spec: SolverSpec = SolverSpec(gradient_mode="adjoint")):
    """Gradients of a loss with the given per-grid-point gradients, via the adjoint ODE.

    ``loss_grads[i]`` is dL/dy(t_i) (or None). Returns ``(dL/dy0, [dL/dtheta])``
    for ``theta`` in ``f.params``. No forward graph is kept.
    """
    grid = _check_grid(t_grid)
    if len(loss_grads) != grid.shape[0]:
        raise GraphError(f"{len(loss_grads)} loss gradients for a grid of {grid.shape[0]} times")
    y0 = y0.data if isinstance(y0, Tensor) else np.asarray(y0, dtype=np.float64)
    seeds = [None if g is None else np.asarray(g, dtype=np.float64) for g in loss_grads]
    for g in seeds:
        if g is not None and g.shape != y0.shape:
            raise GraphError(f"loss gradient shape {g.shape} != state shape {y0.shape}")
    params = _params_of(f)
    ys = _forward_values(f, y0, grid, spec)
    return _adjoint_sweep(f, params, ys, grid, seeds, spec)


# -- validation ----------------------------------------------------------------


class ReferenceProblem(NamedTuple):
    """Scalar IVP with a closed-form solution."""

    f: Callable
    y0: float
    t_end: float
    exact: Callable[[float], float]


EXPONENTIAL_GROWTH = ReferenceProblem(lambda y, t: y, 1.0, 1.0, math.exp)
EXPONENTIAL_DECAY = ReferenceProblem(lambda y, t: -y, 1.0, 1.0, lambda t: math.exp(-t))

CONVERGENCE_STEPS = (0.1, 0.05, 0.025, 0.0125)


def convergence_order(method: str, problem: ReferenceProblem = EXPONENTIAL_GROWTH, steps=CONVERGENCE_STEPS) -> float:
    """Slope of log(global error) against log(step size)."""
    errors = []
    for h in steps:
        spec = SolverSpec(method=method, step_size=h)
        with no_grad():
            ys = solve(problem.f, Tensor([problem.y0]), [0.0, problem.t_end], spec)
        errors.append(abs(ys[-1].data[0] - problem.exact(problem.t_end)))
    slope, _ = np.polyfit(np.log(steps), np.log(errors), 1)
    return float(slope)
