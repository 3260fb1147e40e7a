"""Missingness encoding: masks, time intervals, imputation and decay rates."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class ValidationError(ValueError):
    """Input data violates a structural invariant."""


class MissingVariableWarning(UserWarning):
    """A variable has no observations in the training split."""


@dataclass
class TimeSeriesBatch:
    """A batch of variable-length multivariate series, padded to a common length.

    ``values``, ``mask`` and ``deltas`` are [N, T, D]; ``times`` is [N, T];
    ``lengths`` holds the true length of every series. Padded steps repeat the
    last timestamp and are fully masked. Missing entries hold the placeholder 0.
    """

    values: np.ndarray
    mask: np.ndarray
    times: np.ndarray
    lengths: np.ndarray
    deltas: np.ndarray | None = None
    labels: np.ndarray | None = None
    ids: list[str] | None = None
    variables: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.values.ndim != 3 or self.mask.shape != self.values.shape:
            raise DimensionError(f"values {self.values.shape} and mask {self.mask.shape} must be equal [N, T, D]")
        if self.times.shape != self.values.shape[:2]:
            raise DimensionError(f"times {self.times.shape} must be [N, T] = {self.values.shape[:2]}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.deltas is None:
            self.deltas = compute_intervals(self.times, self.mask, self.lengths)
        else:
            self.deltas = np.asarray(self.deltas, dtype=np.float64)

    @classmethod
    def from_series(cls, series: Sequence[tuple], labels=None, ids=None, variables=None) -> "TimeSeriesBatch":
        """Build from a list of ``(times [T], values [T, D], mask [T, D])`` tuples."""
        if len(series) == 0:
            raise ValidationError("batch needs at least one series")
        d = np.asarray(series[0][1]).shape[1]
        t_max = max(len(s[0]) for s in series)
        n = len(series)
        values = np.zeros((n, t_max, d))
        mask = np.zeros((n, t_max, d))
        times = np.zeros((n, t_max))
        lengths = np.zeros(n, dtype=np.int64)
        for i, (ts, xs, ms) in enumerate(series):
            ts = np.asarray(ts, dtype=np.float64)
            length = len(ts)
            if length == 0:
                raise ValidationError(f"series {i} is empty")
            ms = np.asarray(ms, dtype=np.float64)
            values[i, :length] = np.where(ms > 0, xs, 0.0)
            mask[i, :length] = ms
            times[i, :length] = ts
            times[i, length:] = ts[-1]
            lengths[i] = length
        return cls(values, mask, times, lengths, labels=labels, ids=ids, variables=variables)

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[2]

    @property
    def max_len(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.n_series

    def step_valid(self) -> np.ndarray:
        """[N, T] indicator of real (non-padded) steps."""
        return (np.arange(self.max_len)[None, :] < self.lengths[:, None]).astype(np.float64)

    def subset(self, index) -> "TimeSeriesBatch":
        index = np.asarray(index)
        lengths = self.lengths[index]
        t_max = int(lengths.max()) if len(lengths) else 0
        return TimeSeriesBatch(
            values=self.values[index, :t_max],
            mask=self.mask[index, :t_max],
            times=self.times[index, :t_max],
            lengths=lengths,
            deltas=self.deltas[index, :t_max],
            labels=None if self.labels is None else self.labels[index],
            ids=None if self.ids is None else [self.ids[i] for i in index],
            variables=self.variables,
        )

    def with_values(self, values: np.ndarray) -> "TimeSeriesBatch":
        return TimeSeriesBatch(
            values=values, mask=self.mask, times=self.times, lengths=self.lengths,
            deltas=self.deltas, labels=self.labels, ids=self.ids, variables=self.variables,
        )

    def shift_time(self, offsets) -> "TimeSeriesBatch":
        offsets = np.broadcast_to(np.asarray(offsets, dtype=np.float64), (self.n_series,))
        return TimeSeriesBatch(
            values=self.values, mask=self.mask, times=self.times + offsets[:, None],
            lengths=self.lengths, labels=self.labels, ids=self.ids, variables=self.variables,
        )

    def validate(self) -> "TimeSeriesBatch":
        if self.n_series == 0:
            raise ValidationError("batch has no series")
        if np.any(self.lengths < 1):
            bad = int(np.flatnonzero(self.lengths < 1)[0])
            raise ValidationError(f"series {bad} is empty")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError("mask entries must be exactly 0 or 1")
        if np.any(np.diff(self.times, axis=1) < 0):
            bad = int(np.flatnonzero(np.any(np.diff(self.times, axis=1) < 0, axis=1))[0])
            raise ValidationError(f"timestamps decrease within series {bad}")
        if self.labels is not None and not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be 0 or 1")
        return self


def compute_intervals(times, mask, lengths=None) -> np.ndarray:
    """Time since each variable was last observed.

    ``times`` is [T] or [N, T]; ``mask`` is [T], [T, D] or [N, T, D]. The
    result has the shape of ``mask``. Steps past a series' length get 0.
    """
    times = np.asarray(times, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    in_shape = mask.shape
    if times.ndim == 1:
        times = times[None, :]
        mask = mask.reshape(1, times.shape[1], -1)
    if mask.shape[:2] != times.shape:
        raise DimensionError(f"mask {in_shape} does not match timestamps {times.shape}")
    n, t_max, d = mask.shape
    lengths = np.full(n, t_max) if lengths is None else np.asarray(lengths)
    steps = np.diff(times, axis=1)
    for i in range(n):
        if np.any(steps[i, : max(int(lengths[i]) - 1, 0)] < 0):
            raise ValidationError(f"timestamps decrease within series {i}")
    delta = np.zeros((n, t_max, d))
    for t in range(1, t_max):
        carried = np.where(mask[:, t - 1] > 0, 0.0, delta[:, t - 1])
        delta[:, t] = steps[:, t - 1][:, None] + carried
    delta *= (np.arange(t_max)[None, :] < lengths[:, None])[:, :, None]
    return delta.reshape(in_shape)


def fit_means(batch: TimeSeriesBatch) -> np.ndarray:
    """Per-variable mean of observed values over every series and step.

    Sums are correctly rounded (fsum), so the result does not depend on the
    order or padding of the series.
    """
    if batch.n_series == 0:
        raise ValidationError("fit_means needs at least one series")
    valid = batch.step_valid()[:, :, None]
    m = batch.mask * valid
    num = np.array([math.fsum(batch.values[:, :, j][m[:, :, j] > 0]) for j in range(batch.n_vars)])
    den = np.sum(m, axis=(0, 1))
    empty = den == 0
    if np.any(empty):
        names = [batch.variables[i] if batch.variables else str(i) for i in np.flatnonzero(empty)]
        warnings.warn(
            f"no training observations for variable(s) {', '.join(names)}; mean set to 0",
            MissingVariableWarning,
            stacklevel=2,
        )
    return np.where(empty, 0.0, num / np.where(empty, 1.0, den))


def impute_mean(batch: TimeSeriesBatch, means) -> np.ndarray:
    """Replace missing entries with the training means."""
    means = np.asarray(means, dtype=np.float64)
    return np.where(batch.mask > 0, batch.values, means[None, None, :])


def impute_forward(batch: TimeSeriesBatch, means) -> np.ndarray:
    """Last observation carried forward; the training mean fills leading gaps."""
    means = np.asarray(means, dtype=np.float64)
    out = np.empty_like(batch.values)
    last = np.broadcast_to(means, (batch.n_series, batch.n_vars)).copy()
    for t in range(batch.max_len):
        obs = batch.mask[:, t] > 0
        last = np.where(obs, batch.values[:, t], last)
        out[:, t] = last
    return out


def concat_simple(x, m, delta) -> np.ndarray:
    """Stack measurement, mask and interval along the last axis: [x; m; delta]."""
    x, m, delta = (np.asarray(a, dtype=np.float64) for a in (x, m, delta))
    if not (x.shape == m.shape == delta.shape):
        raise DimensionError(f"concat_simple: shapes {x.shape}, {m.shape}, {delta.shape} differ")
    return np.concatenate([x, m, delta], axis=-1)


def split_simple(z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z = np.asarray(z)
    if z.shape[-1] % 3:
        raise DimensionError(f"split_simple: last extent {z.shape[-1]} is not a multiple of 3")
    return tuple(np.split(z, 3, axis=-1))


@dataclass
class DecayParams:
    """Weights of one decay head.

    ``weight`` is either a vector [D] (diagonal, per-variable decay) or a
    matrix [K, D] mapping intervals to K decay rates. ``bias`` has length D
    (diagonal) or K.
    """

    weight: Tensor
    bias: Tensor

    @property
    def diagonal(self) -> bool:
        return self.weight.ndim == 1

    @property
    def out_dim(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int | None = None) -> "DecayParams":
        if out_dim is None:
            return cls(Tensor(np.zeros(in_dim), requires_grad=True), Tensor(np.zeros(in_dim), requires_grad=True))
        return cls(Tensor(np.zeros((out_dim, in_dim)), requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True))


def decay_preactivation(delta, params: DecayParams) -> Tensor:
    """W_gamma * delta + b_gamma for delta [N, D]."""
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    n = delta.shape[0]
    if params.diagonal:
        if params.weight.shape[0] != delta.shape[1]:
            raise DimensionError(f"decay weight {params.weight.shape} vs intervals {delta.shape}")
        return T.mul(T.tile_rows(params.weight, n), delta) + T.tile_rows(params.bias, n)
    return T.linear(delta, params.weight, params.bias)


def decay_from_preactivation(pre) -> Tensor:
    """gamma = exp(-max(0, pre)), in (0, 1]."""
    return T.exp(T.neg(T.relu(pre)))


def decay_rate(delta, params: DecayParams) -> Tensor:
    """Exponential decay rate of intervals ``delta`` [N, D]."""
    return decay_from_preactivation(decay_preactivation(delta, params))


@dataclass
class Normalizer:
    """Per-variable standardization fitted on observed training values."""

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-6

    @classmethod
    def fit(cls, batch: TimeSeriesBatch) -> "Normalizer":
        mean = fit_means(batch)
        valid = batch.step_valid()[:, :, None] * batch.mask
        den = np.maximum(valid.sum(axis=(0, 1)), 1.0)
        dev = np.where(valid > 0, batch.values - mean, 0.0)
        std = np.sqrt((dev**2).sum(axis=(0, 1)) / den)
        return cls(mean=mean, std=np.maximum(std, cls.STD_FLOOR))

    def apply(self, batch: TimeSeriesBatch) -> TimeSeriesBatch:
        scaled = np.where(batch.mask > 0, (batch.values - self.mean) / self.std, 0.0)
        return batch.with_values(scaled)

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean
