"""Loading triplet files, synthetic data with informative missingness, and splits."""

from __future__ import annotations

import csv
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .missingness import TimeSeriesBatch, ValidationError

TRIPLET_HEADER = ["series_id", "time", "variable", "value"]
LABEL_HEADER = ["series_id", "label"]
DEFAULT_MAX_LENGTH = 200


class DataError(ValueError):
    """Malformed input file; the message names the file line."""


# -- triplet files ---------------------------------------------------------------


def _read_csv(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [c.strip() for c in first] != header:
            raise DataError(f"{path}:1: expected header {','.join(header)}, got {','.join(first)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def _number(text, path, lineno, what):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: non-numeric {what} {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{lineno}: non-finite {what} {text!r}")
    return value


def load_labels(path) -> dict[str, int]:
    labels = {}
    for lineno, (sid, label) in _read_csv(path, LABEL_HEADER):
        value = _number(label, path, lineno, "label")
        if value not in (0.0, 1.0):
            raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        labels[sid] = int(value)
    return labels


def load_triplets(path, vocabulary=None, labels_path=None, max_length: int = DEFAULT_MAX_LENGTH) -> TimeSeriesBatch:
    """Read ``series_id,time,variable,value`` rows into a batch.

    Rows of one series are sorted by time and observations sharing a
    timestamp form one step. Without a vocabulary the variables are the
    sorted set of names in the file. Series longer than ``max_length`` steps
    keep their first ``max_length`` steps.
    """
    rows = list(_read_csv(path, TRIPLET_HEADER))
    if vocabulary is None:
        vocabulary = sorted({r[2] for _, r in rows})
    index = {name: i for i, name in enumerate(vocabulary)}
    grouped: OrderedDict[str, list] = OrderedDict()
    for lineno, (sid, time, var, value) in rows:
        if var not in index:
            raise DataError(f"{path}:{lineno}: unknown variable {var!r}")
        t = _number(time, path, lineno, "time")
        if t < 0:
            raise DataError(f"{path}:{lineno}: negative time {time!r}")
        grouped.setdefault(sid, []).append((t, index[var], _number(value, path, lineno, "value")))
    if not grouped:
        raise DataError(f"{path}: no observations")

    d = len(vocabulary)
    series = []
    for records in grouped.values():
        records.sort(key=lambda r: r[0])
        times = sorted({r[0] for r in records})[:max_length]
        pos = {t: i for i, t in enumerate(times)}
        values = np.zeros((len(times), d))
        mask = np.zeros((len(times), d))
        for t, j, v in records:
            if t in pos:
                values[pos[t], j] = v
                mask[pos[t], j] = 1.0
        series.append((np.array(times), values, mask))

    ids = list(grouped)
    labels = None
    if labels_path is not None:
        table = load_labels(labels_path)
        missing = [sid for sid in ids if sid not in table]
        if missing:
            raise DataError(f"{labels_path}: no label for series {', '.join(missing[:5])}")
        labels = np.array([table[sid] for sid in ids], dtype=np.float64)
    return TimeSeriesBatch.from_series(series, labels=labels, ids=ids, variables=list(vocabulary))


def write_triplets(batch: TimeSeriesBatch, path, labels_path=None) -> None:
    """Write observed entries (and optionally labels) in the triplet format."""
    names = batch.variables or [f"v{j}" for j in range(batch.n_vars)]
    ids = batch.ids or [str(i) for i in range(batch.n_series)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIPLET_HEADER)
        for i in range(batch.n_series):
            for t in range(int(batch.lengths[i])):
                for j in np.flatnonzero(batch.mask[i, t] > 0):
                    w.writerow([ids[i], repr(float(batch.times[i, t])), names[j], repr(float(batch.values[i, t, j]))])
    if labels_path is not None:
        if batch.labels is None:
            raise ValidationError("batch has no labels to write")
        with open(labels_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LABEL_HEADER)
            for sid, y in zip(ids, batch.labels):
                w.writerow([sid, int(y)])


def drop_empty_steps(batch: TimeSeriesBatch) -> TimeSeriesBatch:
    """Remove steps with no observed variable; the triplet format cannot represent them."""
    series = []
    for i in range(batch.n_series):
        n = int(batch.lengths[i])
        keep = batch.mask[i, :n].any(axis=1)
        series.append((batch.times[i, :n][keep], batch.values[i, :n][keep], batch.mask[i, :n][keep]))
    return TimeSeriesBatch.from_series(series, labels=batch.labels, ids=batch.ids, variables=batch.variables)


PHYSIONET_STATIC = ("Age", "Gender", "Height", "ICUType", "Weight")


def physionet_to_triplets(record_dir, out_path, outcomes_path=None, labels_out=None) -> int:
    """Convert PhysioNet 2012 per-record files (``Time,Parameter,Value``) to one triplet file.

    Times ``HH:MM`` become hours. RecordID rows are dropped; static
    descriptors already sit at 00:00 and are kept as time-0 observations.
    Missing values coded as -1 are skipped. Returns the number of records.
    """
    files = sorted(p for p in Path(record_dir).iterdir() if p.suffix == ".txt")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIPLET_HEADER)
        for p in files:
            sid = p.stem
            for lineno, (time, param, value) in _read_csv(p, ["Time", "Parameter", "Value"]):
                if param == "RecordID" or not param:
                    continue
                hh, mm = time.split(":")
                v = _number(value, p, lineno, "value")
                if v == -1 and param in PHYSIONET_STATIC:
                    continue
                w.writerow([sid, repr(int(hh) + int(mm) / 60.0), param, repr(v)])
    if outcomes_path is not None and labels_out is not None:
        with open(outcomes_path, newline="", encoding="utf-8") as src, open(labels_out, "w", newline="") as dst:
            reader = csv.DictReader(src)
            w = csv.writer(dst, lineterminator="\n")
            w.writerow(LABEL_HEADER)
            for row in reader:
                w.writerow([row["RecordID"], row["In-hospital_death"]])
    return len(files)


# -- synthetic data ----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Two-class irregular series generator.

    Each variable follows ``sin(freq * t + phase) + (2y - 1) * amplitude * drift * t``
    plus Gaussian noise, then a per-variable affine rescaling. Steps are spaced
    by ``1 +- jitter``. In informative mode an entry is missing with probability
    ``missing_rates[y]``; otherwise with ``missing_rate`` for both classes.
    """

    n_series: int = 400
    n_vars: int = 4
    mean_length: int = 12
    jitter: float = 0.5
    amplitude: float = 0.5
    drift: float = 0.1
    noise: float = 0.5
    informative: bool = True
    missing_rates: tuple[float, float] = (0.2, 0.7)
    missing_rate: float = 0.4
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_series < 1:
            raise ValidationError("synthetic spec needs at least one series")
        if self.n_vars < 1 or self.mean_length < 1:
            raise ValidationError("n_vars and mean_length must be positive")
        rates = self.missing_rates if self.informative else (self.missing_rate,)
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise ValidationError(f"missing rates must lie in [0, 1), got {rates}")
        if not 0.0 <= self.jitter < 1.0:
            raise ValidationError("jitter must lie in [0, 1)")


SYNTHETIC_PRESETS = {
    "default": SyntheticSpec(),
    # short series: the mask carries the label, few entries per series
    "informative": SyntheticSpec(n_series=2000, mean_length=3),
    "random": SyntheticSpec(informative=False, amplitude=2.0),
    "small": SyntheticSpec(n_series=120, mean_length=8),
}


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> TimeSeriesBatch:
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_series, spec.n_vars
    n_pos = int(round(spec.positive_fraction * n))
    if n >= 2:
        n_pos = min(max(n_pos, 1), n - 1)
    labels = np.zeros(n)
    labels[:n_pos] = 1.0
    rng.shuffle(labels)

    freq = rng.uniform(0.3, 1.2, size=d)
    scale = 10.0 ** rng.uniform(-1, 2, size=d)
    offset = rng.normal(0, 3, size=d) * scale
    lo = max(1, spec.mean_length - spec.mean_length // 2)
    hi = spec.mean_length + spec.mean_length // 2

    series = []
    for i in range(n):
        y = labels[i]
        length = int(rng.integers(lo, hi + 1))
        gaps = 1.0 + rng.uniform(-spec.jitter, spec.jitter, size=length - 1)
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        phase = rng.uniform(0, 2 * np.pi, size=d)
        signal = np.sin(freq[None, :] * times[:, None] + phase[None, :])
        signal += (2 * y - 1) * spec.amplitude * spec.drift * times[:, None]
        signal += rng.normal(0, spec.noise, size=(length, d))
        values = signal * scale + offset
        rate = spec.missing_rates[int(y)] if spec.informative else spec.missing_rate
        mask = (rng.random((length, d)) >= rate).astype(np.float64)
        if not mask.any():
            mask[rng.integers(length), rng.integers(d)] = 1.0
        series.append((times, values, mask))
    ids = [f"s{i:05d}" for i in range(n)]
    return TimeSeriesBatch.from_series(series, labels=labels, ids=ids, variables=[f"v{j}" for j in range(d)])


# -- splitting -----------------------------------------------------------------------


def _allocate(n: int, fractions, at_least_one: bool = False) -> np.ndarray:
    """Largest-remainder rounding of n * fractions to integers summing to n.

    With ``at_least_one`` every part with a positive fraction gets one item
    when n allows, taken from the currently largest part.
    """
    fractions = np.asarray(fractions)
    raw = fractions * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    if at_least_one and n >= np.count_nonzero(fractions):
        for k in np.flatnonzero((counts == 0) & (fractions > 0)):
            counts[np.argmax(counts)] -= 1
            counts[k] += 1
    return counts


def split(batch: TimeSeriesBatch, fractions=(0.6, 0.2, 0.2), seed: int = 0,
          stratified: bool = True) -> tuple[TimeSeriesBatch, ...]:
    """Disjoint, exhaustive random split with the given fractions."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError(f"split fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    if stratified:
        if batch.labels is None:
            raise ValidationError("stratified split needs labels")
        for cls in (0.0, 1.0):
            idx = np.flatnonzero(batch.labels == cls)
            rng.shuffle(idx)
            counts = _allocate(len(idx), fractions, at_least_one=True)
            for p, chunk in zip(parts, np.split(idx, np.cumsum(counts)[:-1])):
                p.extend(chunk.tolist())
        for k, p in enumerate(parts):
            if fractions[k] > 0 and len(set(batch.labels[p].tolist())) < 2:
                raise ValidationError(f"split {k} lacks a class; too few series for stratification")
    else:
        idx = rng.permutation(batch.n_series)
        counts = _allocate(batch.n_series, fractions)
        for p, chunk in zip(parts, np.split(idx, np.cumsum(counts)[:-1])):
            p.extend(chunk.tolist())
    return tuple(batch.subset(np.sort(np.asarray(p, dtype=np.int64))) for p in parts)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
