"""Sequence classifiers over TimeSeriesBatch.

All models consume standardized batches (see ``Normalizer``) and return one
logit per series. Series in a batch are processed in lock-step over their
step index; padded steps leave a row's state untouched.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cells import CellParams, CellState, GRUDDynamics, gru_step, grud_step, impute_decayed
from .missingness import (
    DecayParams,
    Normalizer,
    TimeSeriesBatch,
    ValidationError,
    concat_simple,
    decay_from_preactivation,
    decay_preactivation,
    decay_rate,
    fit_means,
    impute_forward,
    impute_mean,
)
from .odesolver import OdeFunc, SolverSpec, solve
from .tensor import Tensor

KINDS = ("gru", "grud", "ode_rnn", "ode_grud", "ext_ode_grud")
IMPUTATIONS = ("mean", "forward", "simple")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and solver settings.

    ``step_size`` and ``readout_time`` left as None are resolved from the
    training data: a quarter of, and one full, median inter-observation gap.
    ``imputation`` selects the input path of ``gru`` and ``ode_rnn``; the
    GRU-D family always imputes through its learned input decay.
    """

    kind: str = "ext_ode_grud"
    hidden_dim: int = 16
    imputation: str = "mean"
    method: str = "rk4"
    step_size: float | None = None
    gradient_mode: str = "discretize"
    readout_time: float | None = None
    dynamics_hidden: int | None = None
    literal_input_decay: bool = False
    decay_init: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.imputation not in IMPUTATIONS:
            raise ValueError(f"unknown imputation {self.imputation!r}; expected one of {IMPUTATIONS}")
        if self.decay_init < 0:
            raise ValueError("decay_init must be non-negative")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if self.readout_time is not None and self.readout_time < 0:
            raise ValueError("readout_time must be non-negative")
        SolverSpec(self.method, self.step_size or 1.0, self.gradient_mode)

    @property
    def solver(self) -> SolverSpec:
        if self.step_size is None:
            raise ValueError("step_size unresolved; call resolve() with the training median gap")
        return SolverSpec(self.method, self.step_size, self.gradient_mode)

    def resolve(self, median_gap: float) -> "ModelSpec":
        gap = median_gap if median_gap > 0 else 1.0
        return dataclasses.replace(
            self,
            step_size=self.step_size if self.step_size is not None else gap / 4.0,
            readout_time=self.readout_time if self.readout_time is not None else gap,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def median_gap(batch: TimeSeriesBatch) -> float:
    gaps = np.diff(batch.times, axis=1)
    real = (np.arange(1, batch.max_len)[None, :] < batch.lengths[:, None]) & (gaps > 0)
    return float(np.median(gaps[real])) if np.any(real) else 1.0


class DecayMonitor:
    """Running range of every decay rate computed in forward passes."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.min = np.inf
        self.max = -np.inf
        self.count = 0

    def observe(self, gamma: Tensor, rows=None):
        g = gamma.data if rows is None else gamma.data[rows]
        if g.size:
            self.min = min(self.min, float(g.min()))
            self.max = max(self.max, float(g.max()))
            self.count += g.size

    @property
    def in_range(self) -> bool:
        return self.count == 0 or (self.min > 0.0 and self.max <= 1.0)


def _select(valid: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    """Row-wise choice between ``new`` (valid rows) and ``old``; exact for 0/1 flags."""
    if valid.all():
        return new
    v = np.broadcast_to(valid[:, None], new.shape)
    return new * v + old * (1.0 - v)


class SequenceModel:
    """Shared plumbing: parameters, fitted statistics, classification head."""

    kind = ""

    def __init__(self, spec: ModelSpec, n_vars: int, seed: int = 0):
        self.spec = spec
        self.n_vars = n_vars
        self.rng = np.random.default_rng(seed)
        self.means = np.zeros(n_vars)
        self.normalizer: Normalizer | None = None
        self.monitor = DecayMonitor()
        h = spec.hidden_dim
        self.head_w = Tensor(self.rng.uniform(-1, 1, size=(1, h)) / np.sqrt(h), requires_grad=True)
        self.head_b = Tensor(np.zeros(1), requires_grad=True)

    # -- parameters ----------------------------------------------------------
    def _own_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self._own_parameters() + [("head.weight", self.head_w), ("head.bias", self.head_b)]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_groups(self) -> dict[str, list[Tensor]]:
        groups = {"main": [], "decay": []}
        for name, p in self.named_parameters():
            groups["decay" if "decay" in name else "main"].append(p)
        return groups

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- statistics ----------------------------------------------------------
    def fit_stats(self, train: TimeSeriesBatch) -> TimeSeriesBatch:
        """Fit standardization and imputation means on raw training data; resolve the spec."""
        self.normalizer = Normalizer.fit(train)
        scaled = self.normalizer.apply(train)
        self.means = fit_means(scaled)
        self.spec = self.spec.resolve(median_gap(train))
        return scaled

    def prepare(self, batch: TimeSeriesBatch) -> TimeSeriesBatch:
        if batch.n_vars != self.n_vars:
            raise ValidationError(f"batch has {batch.n_vars} variables, model expects {self.n_vars}")
        return self.normalizer.apply(batch) if self.normalizer is not None else batch

    # -- forward -------------------------------------------------------------
    def encode(self, batch: TimeSeriesBatch) -> Tensor:
        raise NotImplementedError

    def forward(self, batch: TimeSeriesBatch) -> Tensor:
        """Logits [N] for a standardized batch."""
        batch.validate()
        if batch.n_vars != self.n_vars:
            raise ValidationError(f"batch has {batch.n_vars} variables, model expects {self.n_vars}")
        h = self.encode(batch)
        return T.reshape(T.linear(h, self.head_w, self.head_b), (batch.n_series,))

    __call__ = forward

    def predict_logits(self, raw: TimeSeriesBatch) -> np.ndarray:
        with T.no_grad():
            return self.forward(self.prepare(raw)).data.copy()

    @staticmethod
    def _observed(batch: TimeSeriesBatch) -> np.ndarray:
        # placeholders are never read: anything under mask 0 becomes 0 here
        return np.where(batch.mask > 0, batch.values, 0.0)

    def _inputs(self, batch: TimeSeriesBatch) -> np.ndarray:
        x = self._observed(batch)
        clean = batch.with_values(x)
        if self.spec.imputation == "forward":
            return impute_forward(clean, self.means)
        imputed = impute_mean(clean, self.means)
        if self.spec.imputation == "simple":
            return concat_simple(imputed, batch.mask, batch.deltas)
        return imputed

    def _input_dim(self) -> int:
        return 3 * self.n_vars if self.spec.imputation == "simple" else self.n_vars

    def _grid(self, batch: TimeSeriesBatch, k: int, readout: float) -> np.ndarray:
        """Per-row interval [t_k, t_next]: next observation, the readout tail, or empty."""
        t_k = batch.times[:, k]
        last = batch.lengths - 1
        if k + 1 < batch.max_len:
            nxt = np.where(k < last, batch.times[:, k + 1], t_k)
        else:
            nxt = t_k.copy()
        nxt = np.where(k == last, t_k + readout, nxt)
        return np.stack([t_k, nxt])


class GRUModel(SequenceModel):
    """Plain GRU over imputed inputs; mask-blind unless imputation is ``simple``."""

    kind = "gru"

    def __init__(self, spec, n_vars, seed=0):
        super().__init__(spec, n_vars, seed)
        self.cell = CellParams.init(self._input_dim(), spec.hidden_dim, self.rng)

    def _own_parameters(self):
        return [(f"cell.{n}", p) for n, p in self.cell.named_parameters()]

    def encode(self, batch):
        x = self._inputs(batch)
        valid = batch.step_valid()
        h = Tensor(np.zeros((batch.n_series, self.spec.hidden_dim)))
        for k in range(batch.max_len):
            h = _select(valid[:, k], gru_step(x[:, k], h, self.cell), h)
        return h


class GRUDModel(SequenceModel):
    """GRU-D: trainable input decay toward the mean and hidden-state decay."""

    kind = "grud"

    def __init__(self, spec, n_vars, seed=0):
        super().__init__(spec, n_vars, seed)
        self.cell = CellParams.init(n_vars, spec.hidden_dim, self.rng, mask_dim=n_vars, decay_dim=n_vars,
                                     decay_init=spec.decay_init)

    def _own_parameters(self):
        return [(f"cell.{n}", p) for n, p in self.cell.named_parameters()]

    def encode(self, batch):
        x = self._observed(batch)
        valid = batch.step_valid()
        n = batch.n_series
        state = CellState(
            Tensor(np.zeros((n, self.spec.hidden_dim))),
            np.broadcast_to(self.means, (n, self.n_vars)).copy(),
            np.zeros((n, self.n_vars)),
        )
        for k in range(batch.max_len):
            delta = batch.deltas[:, k]
            if self.monitor is not None:
                rows = valid[:, k] > 0
                self.monitor.observe(decay_rate(delta, self.cell.input_decay), rows)
                self.monitor.observe(decay_rate(delta, self.cell.hidden_decay), rows)
            h, new = grud_step(x[:, k], batch.mask[:, k], delta, state, self.cell, self.means,
                               self.spec.literal_input_decay)
            state = CellState(_select(valid[:, k], h, state.h), new.x_last, new.delta)
        return state.h


class MLPDynamics(OdeFunc):
    """dh/dt = W2 tanh(W1 h + b1) + b2."""

    def __init__(self, hidden_dim: int, width: int, rng: np.random.Generator):
        def u(rows, cols):
            return Tensor(rng.uniform(-1, 1, size=(rows, cols)) / np.sqrt(cols), requires_grad=True)

        self.W1 = u(width, hidden_dim)
        self.b1 = Tensor(np.zeros(width), requires_grad=True)
        self.W2 = u(hidden_dim, width)
        self.b2 = Tensor(np.zeros(hidden_dim), requires_grad=True)
        self.params = [self.W1, self.b1, self.W2, self.b2]

    def named_parameters(self):
        return list(zip(("W1", "b1", "W2", "b2"), self.params))

    def __call__(self, h, t=None):
        return T.linear(T.tanh(T.linear(h, self.W1, self.b1)), self.W2, self.b2)


class ODERNNModel(SequenceModel):
    """Hidden state follows a learned ODE between observations; a GRU step at each one."""

    kind = "ode_rnn"

    def __init__(self, spec, n_vars, seed=0):
        super().__init__(spec, n_vars, seed)
        self.cell = CellParams.init(self._input_dim(), spec.hidden_dim, self.rng, mask_dim=n_vars)
        self.dynamics = MLPDynamics(spec.hidden_dim, spec.dynamics_hidden or spec.hidden_dim, self.rng)

    def _own_parameters(self):
        return [(f"cell.{n}", p) for n, p in self.cell.named_parameters()] + [
            (f"dynamics.{n}", p) for n, p in self.dynamics.named_parameters()
        ]

    def encode(self, batch):
        x = self._inputs(batch)
        valid = batch.step_valid()
        solver = self.spec.solver
        h = Tensor(np.zeros((batch.n_series, self.spec.hidden_dim)))
        for k in range(batch.max_len):
            if k > 0:
                grid = np.stack([batch.times[:, k - 1], batch.times[:, k]])
                h = solve(self.dynamics, h, grid, solver)[-1]
            h = _select(valid[:, k], gru_step(x[:, k], h, self.cell, batch.mask[:, k]), h)
        return h


class FilterLinear(OdeFunc):
    """Time derivative of a decay pre-activation driven by the elapsed interval.

    Between observations at ``t_start`` the interval grows as
    ``delta(t) = delta_start + (t - t_start)``, and ``dg/dt = W delta(t) + b``.
    """

    def __init__(self, decay: DecayParams):
        self.decay = decay
        self.params = decay.parameters()
        self.delta_start = None
        self.t_start = None

    def drive(self, delta_start: np.ndarray, t_start) -> "FilterLinear":
        """Bind one interval's starting intervals and times (returns a new function)."""
        bound = FilterLinear(self.decay)
        bound.delta_start = np.asarray(delta_start, dtype=np.float64)
        bound.t_start = np.asarray(t_start, dtype=np.float64)
        return bound

    def __call__(self, g, t):
        elapsed = np.asarray(t, dtype=np.float64) - self.t_start
        delta = self.delta_start + (elapsed[:, None] if elapsed.ndim else elapsed)
        return decay_preactivation(delta, self.decay)


class ODEGRUDModel(SequenceModel):
    """Continuous GRU-D: the concatenated state [x; m; h] is integrated between observations.

    At each observation the x and m segments are overwritten with the decayed
    imputation and the new mask, and h is scaled by the hidden decay.
    """

    kind = "ode_grud"

    def __init__(self, spec, n_vars, seed=0):
        super().__init__(spec, n_vars, seed)
        self.cell = CellParams.init(n_vars, spec.hidden_dim, self.rng, mask_dim=n_vars, decay_dim=n_vars,
                                     decay_init=spec.decay_init)
        self.dynamics = GRUDDynamics(self.cell, n_vars)

    def _own_parameters(self):
        return [(f"cell.{n}", p) for n, p in self.cell.named_parameters()]

    # decay hooks, replaced by the extended model
    def _start_decay(self, batch):
        return None

    def _decays(self, batch, k, carry):
        delta = batch.deltas[:, k]
        return decay_rate(delta, self.cell.input_decay), decay_rate(delta, self.cell.hidden_decay)

    def _advance_decay(self, batch, k, carry, grid, solver):
        return carry

    def encode(self, batch):
        d, hdim = self.n_vars, self.spec.hidden_dim
        n = batch.n_series
        x = self._observed(batch)
        valid = batch.step_valid()
        solver = self.spec.solver
        readout = self.spec.readout_time or 0.0
        x_last = np.broadcast_to(self.means, (n, d)).copy()
        h = Tensor(np.zeros((n, hdim)))
        y = None
        carry = self._start_decay(batch)
        for k in range(batch.max_len):
            m_k = batch.mask[:, k]
            rows = valid[:, k]
            gamma_x, gamma_h = self._decays(batch, k, carry)
            self.monitor.observe(gamma_x, rows > 0)
            self.monitor.observe(gamma_h, rows > 0)
            x_hat = impute_decayed(x[:, k], m_k, x_last, self.means, gamma_x, self.spec.literal_input_decay)
            if y is not None:
                h = T.take(y, (slice(None), slice(2 * d, None)))
            injected = T.concat([x_hat, Tensor(m_k), gamma_h * h], axis=-1)
            y = injected if y is None else _select(rows, injected, y)
            x_last = np.where(m_k > 0, x[:, k], x_last)
            grid = self._grid(batch, k, readout)
            carry = self._advance_decay(batch, k, carry, grid, solver)
            y = solve(self.dynamics, y, grid, solver)[-1]
        return T.take(y, (slice(None), slice(2 * d, None)))


class ExtODEGRUDModel(ODEGRUDModel):
    """Extended ODE-GRU-D: decay pre-activations are themselves integrated by Filter Linear ODEs.

    The input head restarts from 0 at each variable's observation; the hidden
    head restarts at every observation time, so the hidden decay applied at
    an observation reflects the gap since the previous one.
    """

    kind = "ext_ode_grud"

    def __init__(self, spec, n_vars, seed=0):
        super().__init__(spec, n_vars, seed)
        self.input_fl = FilterLinear(self.cell.input_decay)
        self.hidden_fl = FilterLinear(self.cell.hidden_decay)

    def _start_decay(self, batch):
        n = batch.n_series
        return Tensor(np.zeros((n, self.n_vars))), Tensor(np.zeros((n, self.spec.hidden_dim)))

    def _decays(self, batch, k, carry):
        g_x, g_h = carry
        return decay_from_preactivation(g_x), decay_from_preactivation(g_h)

    def _advance_decay(self, batch, k, carry, grid, solver):
        g_x, _ = carry
        m_k = batch.mask[:, k]
        keep = 1.0 - m_k
        delta_start = keep * batch.deltas[:, k]
        g_x = g_x * keep
        g_x = solve(self.input_fl.drive(delta_start, grid[0]), g_x, grid, solver)[-1]
        g_h0 = Tensor(np.zeros((batch.n_series, self.spec.hidden_dim)))
        g_h = solve(self.hidden_fl.drive(delta_start, grid[0]), g_h0, grid, solver)[-1]
        return g_x, g_h


MODEL_CLASSES = {
    cls.kind: cls for cls in (GRUModel, GRUDModel, ODERNNModel, ODEGRUDModel, ExtODEGRUDModel)
}


def build_model(spec: ModelSpec, n_vars: int, seed: int = 0) -> SequenceModel:
    return MODEL_CLASSES[spec.kind](spec, n_vars, seed)
