"""Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned."""

import dataclasses
import math
import time
import warnings

import numpy as np
import pytest

from odegrud import tensor as T
from odegrud.data import SYNTHETIC_PRESETS, generate_synthetic
from odegrud.missingness import (MissingVariableWarning, TimeSeriesBatch, compute_intervals, fit_means,
                                 impute_forward, impute_mean)
from odegrud.models import ModelSpec
from odegrud.odesolver import EXPONENTIAL_GROWTH, OdeFunc, SolverSpec, convergence_order, solve
from odegrud.tensor import Tensor
from odegrud.training import GRADCHECK_THRESHOLDS, TrainConfig, grad_check, gradcheck_model, toy_batch, train

from conftest import full_unit_batch, masked_gru_reference, reduction_models
from test_missingness import brute_forward, brute_intervals, brute_means, random_series

SEEDS = (0, 1, 2, 3, 4)
ORDER_KINDS = ("ext_ode_grud", "ode_grud", "gru")
ACCEPT_CONFIG = dict(epochs=60, batch_size=64, patience=8, learning_rate=0.01)


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def test_criterion_2_gradcheck(report):
    start = time.perf_counter()
    reports = {kind: grad_check(gradcheck_model(kind), toy_batch()) for kind in
               ("grud", "ode_rnn", "ode_grud", "ext_ode_grud")}
    elapsed = time.perf_counter() - start
    ok = all(r.worst_error < GRADCHECK_THRESHOLDS[k] for k, r in reports.items()) and elapsed < 120
    assert GRADCHECK_THRESHOLDS["grud"] == GRADCHECK_THRESHOLDS["ode_rnn"] == 1e-4
    assert GRADCHECK_THRESHOLDS["ode_grud"] == GRADCHECK_THRESHOLDS["ext_ode_grud"] == 1e-3
    report(2, ok, ", ".join(f"{k} {r.worst_error:.1e}" for k, r in reports.items()) + f"; {elapsed:.1f}s")
    assert ok


def test_criterion_3_solver(report):
    euler, rk4 = convergence_order("euler", EXPONENTIAL_GROWTH), convergence_order("rk4", EXPONENTIAL_GROWTH)
    e_err = abs(solve(lambda y, t: y, Tensor([1.0]), [0.0, 1.0], SolverSpec("rk4", 0.1))[-1].data[0] - math.e)
    ok = abs(euler - 1.0) <= 0.2 and abs(rk4 - 4.0) <= 0.2 and e_err < 1e-5
    report(3, ok, f"euler order {euler:.3f}, rk4 order {rk4:.3f}, rk4 e error {e_err:.1e}")
    assert ok


def _linear_grads(mode):
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(scale=0.5, size=(3, 3)), requires_grad=True)
    y0 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    ys = solve(OdeFunc(lambda y, t: T.matmul(y, a), [a]), y0, [0.0, 0.4, 1.3], SolverSpec("rk4", 0.1, mode))
    T.sum(ys[1] * ys[1] + T.tanh(ys[2])).backward()
    return np.concatenate([a.grad.ravel(), y0.grad.ravel()])


def _ode_grud_grads(mode):
    model = gradcheck_model("ode_grud", seed=2)
    model.spec = dataclasses.replace(model.spec, gradient_mode=mode)
    model.zero_grad()
    T.mean(T.softplus(model(toy_batch(2)))).backward()
    return np.concatenate([p.grad.ravel() for p in model.parameters()])


def test_criterion_4_adjoint_agreement(report):
    def rel(fn):
        d, a = fn("discretize"), fn("adjoint")
        return np.max(np.abs(a - d)) / np.max(np.abs(d))

    linear, grud = rel(_linear_grads), rel(_ode_grud_grads)
    ok = linear <= 1e-5 and grud <= 1e-3
    report(4, ok, f"linear {linear:.1e} (<=1e-5), ode_grud {grud:.1e} (<=1e-3)")
    assert ok


def test_criterion_5_missingness_oracles(report):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        d = int(rng.integers(1, 4))
        series = random_series(rng, int(rng.integers(1, 4)), d, max_len=6, p_obs=0.6)
        batch = TimeSeriesBatch.from_series(series)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MissingVariableWarning)
            means = fit_means(batch)
        mismatches += not np.array_equal(means, brute_means(series, d))
        mean_imp, fwd_imp = impute_mean(batch, means), impute_forward(batch, means)
        for i, (times, values, mask) in enumerate(series):
            n = len(values)
            mismatches += not np.array_equal(compute_intervals(times, mask), brute_intervals(times, mask))
            mismatches += not np.array_equal(mean_imp[i, :n], np.where(mask == 1, values, means))
            mismatches += not np.array_equal(fwd_imp[i, :n], brute_forward(values, mask, means))
    report(5, mismatches == 0, f"{mismatches} mismatches over 1000 instances")
    assert mismatches == 0


def test_criterion_6_reduction(report):
    worst = {}
    for seed in range(3):
        models, ref, head_w, head_b = reduction_models(seed=seed)
        batch = full_unit_batch(seed=seed)
        expected = masked_gru_reference(batch.values, batch.mask, ref, head_w, head_b)
        for kind, model in models.items():
            worst[kind] = max(worst.get(kind, 0.0), float(np.max(np.abs(model(batch).data - expected))))
    ok = all(v <= 1e-10 for v in worst.values())
    report(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


@pytest.fixture(scope="module")
def ordering_runs():
    runs = {kind: [] for kind in ORDER_KINDS}
    for seed in SEEDS:
        data = generate_synthetic(dataclasses.replace(SYNTHETIC_PRESETS["informative"], seed=seed))
        for kind in ORDER_KINDS:
            result = train(ModelSpec(kind=kind, imputation="mean"), data, TrainConfig(seed=seed, **ACCEPT_CONFIG))
            runs[kind].append(result.metrics)
    return runs


def test_criterion_7_ordering(report, ordering_runs):
    preset = SYNTHETIC_PRESETS["informative"]
    assert preset.n_series == 2000 and preset.n_vars == 4 and tuple(preset.missing_rates) == (0.2, 0.7)
    mean = {k: float(np.mean([m.test_auc for m in runs])) for k, runs in ordering_runs.items()}
    ext, ode, gru = mean["ext_ode_grud"], mean["ode_grud"], mean["gru"]
    ok = ext >= ode >= 0.85 and ext - gru >= 0.05
    report(7, ok, f"mean test AUC ext {ext:.4f}, ode_grud {ode:.4f}, gru {gru:.4f}; gap {ext - gru:.4f}")
    assert ok


def test_criterion_8_decay_range(report, ordering_runs):
    stats = [m for k in ("ext_ode_grud", "ode_grud") for m in ordering_runs[k]]
    lo, hi = min(m.gamma_min for m in stats), max(m.gamma_max for m in stats)
    ok = all(m.gamma_count > 0 for m in stats) and 0 < lo and hi <= 1
    report(8, ok, f"gamma in [{lo:.3g}, {hi:.6g}] over {sum(m.gamma_count for m in stats)} values")
    assert ok
