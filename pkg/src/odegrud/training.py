"""Loss, metrics, optimizers, finite-difference gradient checks and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import split
from .missingness import TimeSeriesBatch, ValidationError
from .models import ModelSpec, SequenceModel, build_model
from .tensor import Tensor

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """AUC needs both classes."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name}")


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = "loss is not finite"):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")


# -- loss and metrics -----------------------------------------------------------------


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    return labels


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on logits: softplus(l) - y*l."""
    labels = _check_labels(labels)
    if logits.shape != labels.shape:
        raise ValidationError(f"logits {logits.shape} and labels {labels.shape} differ")
    return T.mean(T.softplus(logits) - logits * labels)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined with a single class")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def bootstrap_auc_std(scores, labels, n_resamples: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    scores, labels = np.asarray(scores), np.asarray(labels)
    values = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(scores), len(scores))
        if 0 < labels[idx].sum() < len(idx):
            values.append(auc(scores[idx], labels[idx]))
    return float(np.std(values)) if values else float("nan")


# -- optimizers --------------------------------------------------------------------


class Optimizer:
    """SGD or Adam over named parameter groups with per-group learning-rate multipliers."""

    def __init__(self, named_groups: dict, lr: float, kind: str = "adam",
                 lr_mult: dict | None = None, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        lr_mult = lr_mult or {}
        self.entries = [
            (name, p, lr_mult.get(group, 1.0))
            for group, items in named_groups.items()
            for name, p in items
        ]
        self.m = {id(p): np.zeros_like(p.data) for _, p, _ in self.entries}
        self.v = {id(p): np.zeros_like(p.data) for _, p, _ in self.entries}
        self.t = 0

    @classmethod
    def for_params(cls, params, lr, kind="adam"):
        return cls({"main": [(f"p{i}", p) for i, p in enumerate(params)]}, lr, kind)

    def step(self) -> None:
        for name, p, _ in self.entries:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        self.t += 1
        b1, b2 = self.betas
        for _, p, mult in self.entries:
            if p.grad is None:
                continue
            g = p.grad
            lr = self.lr * mult
            if self.kind == "sgd":
                p.data -= lr * g
                continue
            m = self.m[id(p)] = b1 * self.m[id(p)] + (1 - b1) * g
            v = self.v[id(p)] = b2 * self.v[id(p)] + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p, _ in self.entries:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- gradient verification -----------------------------------------------------------

GRADCHECK_THRESHOLDS = {"gru": 1e-4, "grud": 1e-4, "ode_rnn": 1e-4, "ode_grud": 1e-3, "ext_ode_grud": 1e-3}
GRADCHECK_EPS = 1e-5
GRADCHECK_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    kind: str
    worst_error: float
    worst_parameter: str
    per_parameter: dict[str, float]
    threshold: float
    n_entries: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst_error < self.threshold


def relative_error(analytic, numeric, floor: float = GRADCHECK_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries on an absolute scale."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(loss_fn, tensor: Tensor, eps: float = GRADCHECK_EPS) -> np.ndarray:
    """Central differences of ``loss_fn()`` over every entry of ``tensor``."""
    out = np.zeros_like(tensor.data)
    for idx in np.ndindex(tensor.shape):
        old = tensor.data[idx]
        tensor.data[idx] = old + eps
        with T.no_grad():
            up = float(loss_fn().data)
        tensor.data[idx] = old - eps
        with T.no_grad():
            down = float(loss_fn().data)
        tensor.data[idx] = old
        out[idx] = (up - down) / (2 * eps)
    return out


def toy_batch(seed: int = 0, n_series: int = 3, n_vars: int = 2, max_len: int = 5) -> TimeSeriesBatch:
    """Small irregular batch with missing entries and mixed lengths."""
    rng = np.random.default_rng(seed)
    series = []
    lengths = [max_len, max(1, max_len - 2), max(1, max_len - 1), max_len][:n_series]
    for length in lengths:
        times = np.concatenate([[0.0], np.cumsum(rng.uniform(0.4, 1.4, size=length - 1))])
        values = rng.normal(size=(length, n_vars))
        mask = (rng.random((length, n_vars)) < 0.6).astype(np.float64)
        mask[0, 0] = 1.0
        series.append((times, values, mask))
    labels = np.array([i % 2 for i in range(n_series)], dtype=np.float64)
    return TimeSeriesBatch.from_series(series, labels=labels)


def gradcheck_model(kind: str, seed: int = 0, hidden_dim: int = 3, n_vars: int = 2) -> SequenceModel:
    """Toy model with all parameters moved off their (kink-prone) initial values."""
    spec = ModelSpec(kind=kind, hidden_dim=hidden_dim, imputation="forward", method="rk4",
                     step_size=0.25, readout_time=1.0)
    model = build_model(spec, n_vars, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for p in model.parameters():
        p.data += rng.normal(scale=0.3, size=p.shape)
    model.means = rng.normal(scale=0.2, size=n_vars)
    return model


def grad_check(model: SequenceModel, batch: TimeSeriesBatch, threshold: float | None = None) -> GradCheckReport:
    """Compare analytic gradients of the BCE loss with central differences, entry by entry."""
    start = time.perf_counter()

    def loss_fn():
        return bce_loss(model(batch), batch.labels)

    model.zero_grad()
    loss_fn().backward()
    per, worst, worst_name, count = {}, 0.0, "", 0
    for name, p in model.named_parameters():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numeric_gradient(loss_fn, p)
        err = float(relative_error(analytic, numeric).max()) if p.size else 0.0
        per[name] = err
        count += p.size
        if err >= worst:
            worst, worst_name = err, name
    model.zero_grad()
    if threshold is None:
        threshold = GRADCHECK_THRESHOLDS.get(model.kind, 1e-4)
    return GradCheckReport(model.kind, worst, worst_name, per, threshold, count, time.perf_counter() - start)


# -- training loop --------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    gradient_mode: str | None = None
    patience: int = 8
    validation_fraction: float = 0.2
    test_fraction: float = 0.2
    clip_norm: float = 5.0
    decay_lr_mult: float = 1.0
    bootstrap: int = 200
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not 0 <= self.test_fraction < 1 or self.validation_fraction + self.test_fraction >= 1:
            raise ValueError("test_fraction must lie in [0, 1) and leave room for training data")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Metrics:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    test_auc: float = float("nan")
    test_auc_std: float = float("nan")
    test_loss: float = float("nan")
    gamma_min: float = float("nan")
    gamma_max: float = float("nan")
    gamma_count: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    model: SequenceModel
    metrics: Metrics
    splits: tuple[TimeSeriesBatch, TimeSeriesBatch, TimeSeriesBatch | None]


def evaluate(model: SequenceModel, batch: TimeSeriesBatch, batch_size: int = 256,
             prepared: bool = False) -> tuple[np.ndarray, float]:
    """Logits and mean BCE over a batch, without recording a graph."""
    if not prepared:
        batch = model.prepare(batch)
    logits = np.empty(batch.n_series)
    with T.no_grad():
        for start in range(0, batch.n_series, batch_size):
            idx = np.arange(start, min(start + batch_size, batch.n_series))
            logits[idx] = model(batch.subset(idx)).data
    loss = float("nan")
    if batch.labels is not None:
        loss = float(np.mean(np.logaddexp(0.0, logits) - logits * batch.labels))
    return logits, loss


def _safe_auc(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def train(spec: ModelSpec, dataset: TimeSeriesBatch, config: TrainConfig = TrainConfig(),
          out_dir=None, splits=None, log_every: int = 0) -> TrainResult:
    """Fit a model; keeps the parameters of the best validation-AUC epoch.

    ``dataset`` is split (stratified) into train/validation/test unless
    ``splits`` supplies them. With ``out_dir`` the per-epoch metrics are
    written to ``metrics.jsonl`` and the best model to ``checkpoint.bin``.
    """
    if dataset is not None:
        dataset.validate()
        if dataset.labels is None or len(set(dataset.labels.tolist())) < 2:
            raise ValidationError("training data must contain both classes")
    if config.gradient_mode is not None:
        spec = dataclasses.replace(spec, gradient_mode=config.gradient_mode)
    if splits is None:
        fr = (1 - config.validation_fraction - config.test_fraction, config.validation_fraction, config.test_fraction)
        if config.test_fraction > 0:
            train_raw, val_raw, test_raw = split(dataset, fr, seed=config.seed, stratified=True)
        else:
            train_raw, val_raw = split(dataset, fr[:2], seed=config.seed, stratified=True)
            test_raw = None
    else:
        train_raw, val_raw, test_raw = splits

    model = build_model(spec, train_raw.n_vars, seed=config.seed)
    train_b = model.fit_stats(train_raw)
    val_b = model.prepare(val_raw)
    groups = {"main": [], "decay": []}
    for name, p in model.named_parameters():
        groups["decay" if "decay" in name else "main"].append((name, p))
    opt = Optimizer(groups, config.learning_rate, config.optimizer, lr_mult={"decay": config.decay_lr_mult})
    rng = np.random.default_rng(config.seed)
    metrics = Metrics()
    best_state = [p.data.copy() for p in model.parameters()]
    best_auc, stale = -np.inf, 0
    metrics_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    model.monitor.reset()
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(train_b.n_series)
            total = 0.0
            for b_idx, start in enumerate(range(0, len(order), config.batch_size)):
                idx = np.sort(order[start:start + config.batch_size])
                mb = train_b.subset(idx)
                opt.zero_grad()
                loss = bce_loss(model(mb), mb.labels)
                if not np.isfinite(loss.data):
                    raise TrainingDivergence(epoch, b_idx)
                loss.backward()
                try:
                    clip_grad_norm(model.parameters(), config.clip_norm)
                    opt.step()
                except NonFiniteGradientError as exc:
                    raise TrainingDivergence(epoch, b_idx, str(exc)) from exc
                total += float(loss.data) * len(idx)
            metrics.train_loss.append(total / train_b.n_series)
            val_logits, val_loss = evaluate(model, val_b, config.eval_batch_size, prepared=True)
            val_auc = _safe_auc(val_logits, val_b.labels)
            metrics.val_loss.append(val_loss)
            metrics.val_auc.append(val_auc)
            metrics.epoch_seconds.append(time.perf_counter() - t0)
            if metrics_file is not None:
                metrics_file.write(json.dumps({"epoch": epoch, "train_loss": metrics.train_loss[-1],
                                               "val_loss": val_loss, "val_auc": val_auc}) + "\n")
                metrics_file.flush()
            if log_every and epoch % log_every == 0:
                logger.info("epoch %d loss %.4f val_auc %.4f", epoch, metrics.train_loss[-1], val_auc)
            if val_auc > best_auc:
                best_auc, stale, metrics.best_epoch = val_auc, 0, epoch
                best_state = [p.data.copy() for p in model.parameters()]
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if metrics_file is not None:
            metrics_file.close()

    for p, saved in zip(model.parameters(), best_state):
        p.data = saved
    metrics.best_val_auc = float(best_auc) if np.isfinite(best_auc) else float("nan")
    metrics.gamma_min, metrics.gamma_max, metrics.gamma_count = model.monitor.min, model.monitor.max, model.monitor.count
    if test_raw is not None:
        test_logits, test_loss = evaluate(model, test_raw, config.eval_batch_size)
        metrics.test_auc = _safe_auc(test_logits, test_raw.labels)
        metrics.test_loss = test_loss
        metrics.test_auc_std = bootstrap_auc_std(test_logits, test_raw.labels, config.bootstrap, config.seed)
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(model, out_dir / "checkpoint.bin")
    return TrainResult(model, metrics, (train_raw, val_raw, test_raw))
