"""Command-line entry point: train, eval, gradcheck, bench, synth."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .cells import CellParams, GRUDDynamics
from .checkpoint import CheckpointError, load_checkpoint
from .data import SYNTHETIC_PRESETS, DataError, generate_synthetic, load_triplets, write_triplets
from .missingness import ValidationError
from .models import KINDS, ModelSpec
from .odesolver import DivergenceError, SolverSpec, solve
from .tensor import Tensor
from .training import (
    TrainConfig,
    TrainingDivergence,
    auc,
    evaluate,
    grad_check,
    gradcheck_model,
    toy_batch,
    train,
    UndefinedMetricError,
)

logger = logging.getLogger("odegrud")

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

# option name -> (default, type, help)
OPTIONS = {
    "model": ("ext_ode_grud", str, f"model kind, one of {', '.join(KINDS)}"),
    "hidden_dim": (16, int, "hidden state size"),
    "imputation": ("mean", str, "input path of gru/ode_rnn: mean, forward or simple"),
    "solver": ("rk4", str, "fixed-step ODE method: euler or rk4"),
    "step_size": (None, float, "solver step; None uses a quarter of the median training gap"),
    "grad_mode": ("discretize", str, "discretize or adjoint"),
    "epochs": (30, int, "maximum training epochs"),
    "lr": (0.01, float, "learning rate"),
    "batch_size": (64, int, "minibatch size"),
    "patience": (8, int, "early-stopping patience in epochs"),
    "optimizer": ("adam", str, "adam or sgd"),
    "seed": (0, int, "random seed for data, initialization and shuffling"),
    "data": (None, str, "triplet file series_id,time,variable,value"),
    "labels": (None, str, "label file series_id,label"),
    "synthetic": (None, str, f"synthetic preset: {', '.join(SYNTHETIC_PRESETS)}"),
    "n_series": (None, int, "override the synthetic preset's series count"),
    "min_auc": (None, float, "exit 1 if the test AUC falls below this value"),
    "out": ("run", str, "output directory"),
}

TRAIN_KEYS = ["model", "hidden_dim", "imputation", "solver", "step_size", "grad_mode", "epochs", "lr",
              "batch_size", "patience", "optimizer", "seed", "data", "labels", "synthetic", "n_series",
              "min_auc", "out"]


class UsageError(Exception):
    pass


def _add_options(parser, keys):
    for key in keys:
        default, typ, text = OPTIONS[key]
        parser.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                            help=f"{text} (default: {default})")
    parser.add_argument("--config", default=None, help="key = value file; flags override it (default: None)")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys mirror flag names."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        typ = OPTIONS[key][1]
        try:
            out[key] = None if value.lower() in ("none", "") else typ(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def resolve(args, keys) -> dict:
    """Defaults, then config file, then explicit flags."""
    cfg = {k: OPTIONS[k][0] for k in keys}
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            if k in cfg:
                cfg[k] = v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _load_dataset(cfg) -> tuple:
    """(batch, description); exactly one data source must be given."""
    if (cfg.get("data") is None) == (cfg.get("synthetic") is None):
        raise UsageError("give exactly one data source: --data or --synthetic")
    if cfg["synthetic"] is not None:
        if cfg["synthetic"] not in SYNTHETIC_PRESETS:
            raise UsageError(f"unknown synthetic preset {cfg['synthetic']!r}; choose from {', '.join(SYNTHETIC_PRESETS)}")
        spec = dataclasses.replace(SYNTHETIC_PRESETS[cfg["synthetic"]], seed=cfg["seed"])
        if cfg.get("n_series") is not None:
            spec = dataclasses.replace(spec, n_series=cfg["n_series"])
        return generate_synthetic(spec), dataclasses.asdict(spec)
    if not Path(cfg["data"]).is_file():
        raise UsageError(f"data file not found: {cfg['data']}")
    if cfg.get("labels") is not None and not Path(cfg["labels"]).is_file():
        raise UsageError(f"labels file not found: {cfg['labels']}")
    return load_triplets(cfg["data"], labels_path=cfg.get("labels")), {"data": cfg["data"], "labels": cfg.get("labels")}


def _model_spec(cfg) -> ModelSpec:
    return ModelSpec(kind=cfg["model"], hidden_dim=cfg["hidden_dim"], imputation=cfg["imputation"],
                     method=cfg["solver"], step_size=cfg["step_size"], gradient_mode=cfg["grad_mode"])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _echo_config(out: Path, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        for k, v in cfg.items():
            fh.write(f"{k} = {v}\n")


# -- subcommands -----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_KEYS)
    try:
        spec = _model_spec(cfg)
        config = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                             optimizer=cfg["optimizer"], seed=cfg["seed"], patience=cfg["patience"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    batch, source = _load_dataset(cfg)
    if batch.labels is None:
        raise UsageError("training needs labels (--labels)")
    out = Path(cfg["out"])
    _echo_config(out, cfg)
    result = train(spec, batch, config, out_dir=out)
    m = result.metrics
    summary = {
        "model": result.model.spec.to_dict(),
        "source": source,
        "epochs_run": len(m.val_auc),
        "best_epoch": m.best_epoch,
        "best_val_auc": m.best_val_auc,
        "test_auc": m.test_auc,
        "test_auc_std": m.test_auc_std,
        "test_loss": m.test_loss,
        "gamma_min": m.gamma_min if m.gamma_count else None,
        "gamma_max": m.gamma_max if m.gamma_count else None,
    }
    _write_json(out / "summary.json", summary)
    print(f"{spec.kind}: test AUC {m.test_auc:.4f} +- {m.test_auc_std:.4f} (best epoch {m.best_epoch})")
    if cfg["min_auc"] is not None and not m.test_auc >= cfg["min_auc"]:
        print(f"test AUC {m.test_auc:.4f} below threshold {cfg['min_auc']}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve(args, ["data", "labels", "synthetic", "n_series", "seed", "out"])
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    batch, _ = _load_dataset(cfg)
    try:
        logits, loss = evaluate(model, batch)
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ids = batch.ids or [str(i) for i in range(batch.n_series)]
    with open(out / "scores.csv", "w", encoding="utf-8") as fh:
        fh.write("series_id,logit,probability" + (",label" if batch.labels is not None else "") + "\n")
        for i, sid in enumerate(ids):
            row = [sid, repr(float(logits[i])), repr(float(1.0 / (1.0 + np.exp(-logits[i]))))]
            if batch.labels is not None:
                row.append(str(int(batch.labels[i])))
            fh.write(",".join(row) + "\n")
    if batch.labels is not None:
        try:
            score = auc(logits, batch.labels)
        except UndefinedMetricError:
            score = float("nan")
        print(f"AUC {score:.4f} loss {loss:.4f}")
        _write_json(out / "eval.json", {"auc": score, "loss": loss, "n_series": batch.n_series})
    else:
        print(f"scored {batch.n_series} series")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = KINDS if args.kind == "all" else [args.kind]
    if args.kind != "all" and args.kind not in KINDS:
        raise UsageError(f"unknown model kind {args.kind!r}; expected one of {', '.join(KINDS)} or all")
    seed = args.seed if args.seed is not None else 0
    failed = []
    for kind in kinds:
        rep = grad_check(gradcheck_model(kind, seed=seed), toy_batch(seed))
        status = "ok" if rep.passed else "FAIL"
        print(f"{kind:14s} worst {rep.worst_error:.2e} at {rep.worst_parameter} "
              f"(threshold {rep.threshold:.0e}, {rep.n_entries} entries, {rep.seconds:.1f}s) {status}")
        if not rep.passed:
            failed.append(f"{kind}:{rep.worst_parameter}")
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def solver_throughput(method: str, seconds: float = 0.5, batch: int = 64, hidden: int = 16, n_vars: int = 4,
                      seed: int = 0) -> float:
    """Solver steps per second on GRU-D dynamics, forward only."""
    rng = np.random.default_rng(seed)
    dyn = GRUDDynamics(CellParams.init(n_vars, hidden, rng, mask_dim=n_vars), n_vars)
    y0 = Tensor(rng.normal(size=(batch, 2 * n_vars + hidden)))
    spec = SolverSpec(method, 0.1)
    grid = np.linspace(0.0, 1.0, 11)
    steps, start = 0, time.perf_counter()
    with T.no_grad():
        while time.perf_counter() - start < seconds:
            solve(dyn, y0, grid, spec)
            steps += 10
    return steps / (time.perf_counter() - start)


def cmd_bench(args) -> int:
    kinds = args.kinds.split(",")
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise UsageError(f"unknown model kind(s): {', '.join(unknown)}")
    seed = args.seed if args.seed is not None else 0
    data = generate_synthetic(dataclasses.replace(SYNTHETIC_PRESETS["default"], n_series=args.n_series, seed=seed))
    config = TrainConfig(epochs=1, seed=seed, patience=10**6, test_fraction=0.0)
    rows = []
    print(f"{'model':14s} {'epoch_s':>9s} {'std_s':>8s}")
    for kind in kinds:
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            train(ModelSpec(kind=kind), data, config)
            times.append(time.perf_counter() - t0)
        rows.append({"model": kind, "epoch_seconds": float(np.mean(times)), "std_seconds": float(np.std(times)),
                     "repeats": times})
        print(f"{kind:14s} {np.mean(times):9.3f} {np.std(times):8.3f}")
    throughput = {m: solver_throughput(m, seed=seed) for m in ("euler", "rk4")}
    for m, v in throughput.items():
        print(f"solver {m:6s} {v:10.1f} steps/s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "bench.json", {"models": rows, "solver_steps_per_second": throughput})
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = resolve(args, ["synthetic", "n_series", "seed", "out"])
    if cfg["synthetic"] is None:
        cfg["synthetic"] = "default"
    batch, spec = _load_dataset({**cfg, "data": None})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_triplets(batch, out / "triplets.csv", out / "labels.csv")
    _write_json(out / "synthetic_spec.json", spec)
    print(f"wrote {batch.n_series} series to {out}")
    return EXIT_OK


# -- wiring ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odegrud", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, metrics and summary")
    _add_options(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train (required)")
    _add_options(p, ["data", "labels", "synthetic", "n_series", "seed", "out"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on toy fixtures")
    p.add_argument("kind", help=f"model kind ({', '.join(KINDS)}) or all")
    p.add_argument("--seed", type=int, default=None, help="fixture seed (default: 0)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="per-epoch wall time per model kind and solver throughput")
    p.add_argument("--kinds", default=",".join(KINDS), help=f"comma-separated kinds (default: {','.join(KINDS)})")
    p.add_argument("--n-series", type=int, default=100, help="synthetic series in the workload (default: 100)")
    p.add_argument("--repeats", type=int, default=3, help="timed repeats per kind (default: 3)")
    p.add_argument("--seed", type=int, default=None, help="workload seed (default: 0)")
    p.add_argument("--out", default=None, help="directory for bench.json (default: None, print only)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic dataset as triplet and label files")
    _add_options(p, ["synthetic", "n_series", "seed", "out"])
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, DivergenceError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
