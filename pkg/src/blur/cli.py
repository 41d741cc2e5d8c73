"""Command-line entry point: ``blur train | eval | bench | verify``.

Settings resolve in layers, later layers winning:
built-in defaults, task preset, ``--config`` file section, command-line flags.
Every run writes the resolved settings, with the source of each key, to
``resolved_config.ini`` in the output directory; that file can be passed back
through ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    bidir_task, forecast_task, load_csv, persistence_forecast, sine_persistence_mse, split_fractions,
    split_months, synth_sine, Standardizer,
)
from .errors import BlurError, ConfigError
from .network import ModelConfig, init_model, model_forward
from .scan import par_scan, seq_scan
from .training import PAPER_ETTH1_H24, TrainConfig, evaluate, loss_mse, predict, train
from .verification import run_suite, write_reports

log = logging.getLogger("blur")

METRIC_COLUMNS = ("epoch", "split", "mse", "mae", "lr", "seconds", "seed", "train_loss", "accuracy")
SUMMARY_COLUMNS = ("seed", "best_epoch", "test_mse", "test_mae", "test_accuracy", "persistence_mse")
EVAL_COLUMNS = ("split", "mse", "mae", "accuracy", "persistence_mse", "windows")
BENCH_COLUMNS = ("op", "N", "median_seconds", "ns_per_element", "doubling_ratio")
TASKS = ("csv", "synth-sine", "synth-bidir")


# -- typed settings --------------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable
    default: object
    help: str = ""


COMMON = {
    "out_dir": Key(str, "", "output directory (falls back to $BLUR_OUT_DIR, then ./blur-out)"),
    "threads": Key(int, 0, "worker threads; 0 means all cores"),
}

MODEL_KEYS = {
    "n_layers": Key(int, 4), "d_model": Key(int, 256), "d_hidden": Key(int, 128),
    "e_min": Key(float, 0.0), "e_max": Key(float, 1.0), "norm": Key(str, "batch"),
    "nonlinearity": Key(str, "glu"), "bidirectional": Key(_bool, True),
}

TRAIN_KEYS = {
    **COMMON, **MODEL_KEYS,
    "task": Key(str, "csv", "csv, synth-sine or synth-bidir"),
    "data": Key(str, "", "path of a date,<features...> CSV"),
    "horizon": Key(int, 24),
    "seeds": Key(_int_list, (0, 1, 2, 3, 4), "comma-separated seeds; results are averaged"),
    "epochs": Key(int, 8), "batch_size": Key(int, 64), "base_lr": Key(float, 1e-3),
    "min_lr": Key(float, 1e-7), "lr_decay": Key(float, 0.7), "dropout": Key(float, 0.1),
    "weight_decay": Key(float, 0.05), "max_grad_norm": Key(float, 0.0, "0 disables clipping"),
    "split": Key(str, "months", "months (12/4/4 calendar months) or fractions (60/20/20)"),
    "train_stride": Key(int, 1),
    "data_seed": Key(int, 0, "seed of synthetic data"),
    "sine_length": Key(int, 3000), "sine_noise": Key(float, 0.0),
    "bidir_length": Key(int, 64), "bidir_train": Key(int, 512), "bidir_val": Key(int, 128),
    "bidir_test": Key(int, 256),
}

PRESETS = {
    "csv": {},
    "synth-sine": {"n_layers": 2, "d_model": 32, "d_hidden": 32, "base_lr": 3e-3, "split": "fractions",
                   "sine_length": 2000},
    "synth-bidir": {"n_layers": 2, "d_model": 32, "d_hidden": 32, "e_min": 0.5, "e_max": 0.99,
                    "base_lr": 5e-3, "lr_decay": 0.9, "dropout": 0.0, "epochs": 4},
}

EVAL_KEYS = {
    **COMMON,
    "checkpoint": Key(str, "", "checkpoint written by train"),
    "data": Key(str, "", "overrides the data path stored in the checkpoint"),
    "horizon": Key(int, 0, "0 keeps the horizon stored in the checkpoint"),
    "split": Key(str, "test", "val or test"),
}

BENCH_KEYS = {
    **COMMON,
    "sizes": Key(_int_list, tuple(2**k for k in range(10, 19))),
    "width": Key(int, 64, "state width n for the scans"),
    "model_width": Key(int, 32, "d_model = d_hidden of the benchmarked network"),
    "repeats": Key(int, 5), "warmup": Key(int, 1), "seed": Key(int, 0),
    "ops": Key(str, "seq_scan,par_scan,blur_forward"),
}

VERIFY_KEYS = {**COMMON, "inject_unstable": Key(_bool, False), "seed": Key(int, 0)}

SCHEMAS = {"train": TRAIN_KEYS, "eval": EVAL_KEYS, "bench": BENCH_KEYS, "verify": VERIFY_KEYS}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def dump(self, path: Path) -> Path:
        lines = [f"[{self.command}]"]
        for key in sorted(self.values):
            lines.append(f"# {key}: {self.source[key]}")
            lines.append(f"{key} = {_fmt(self.values[key])}")
        path.write_text("\n".join(lines) + "\n")
        return path


def _apply(cfg: RunConfig, schema: dict, items: dict, source: str):
    for key, raw in items.items():
        key = key.replace("-", "_")
        if key not in schema:
            raise ConfigError(f"unknown {cfg.command} setting {key!r} (from {source}); "
                              f"known: {', '.join(sorted(schema))}")
        try:
            cfg.values[key] = schema[key].parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} (from {source}): {exc}") from None
        cfg.source[key] = source


def _read_file(path: str, command: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return dict(parser[command]) if parser.has_section(command) else {}


def resolve(command: str, args: argparse.Namespace) -> RunConfig:
    """Merge defaults, preset, file section and flags; unknown keys are errors."""
    schema = SCHEMAS[command]
    cfg = RunConfig(command)
    _apply(cfg, schema, {k: v.default for k, v in schema.items()}, "default")
    file_items = _read_file(args.config, command) if args.config else {}

    flags = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    for name in ("data", "horizon", "threads", "out_dir", "task", "epochs", "checkpoint", "sizes",
                 "inject_unstable"):
        value = getattr(args, name, None)
        if value not in (None, False):
            flags[name] = value
    if getattr(args, "seed", None) is not None:
        flags["seeds" if command == "train" else "seed"] = args.seed

    if command == "train":
        task = flags.get("task", file_items.get("task", "csv"))
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
        _apply(cfg, schema, PRESETS[task], f"preset:{task}")
    if file_items:
        _apply(cfg, schema, file_items, f"file:{args.config}")
    _apply(cfg, schema, flags, "flag")

    if not cfg["out_dir"]:
        cfg.values["out_dir"] = os.environ.get("BLUR_OUT_DIR") or "blur-out"
        cfg.source["out_dir"] = "env:BLUR_OUT_DIR" if os.environ.get("BLUR_OUT_DIR") else "default"
    if cfg["threads"] <= 0:
        cfg.values["threads"] = os.cpu_count() or 1
    return cfg


# -- data ------------------------------------------------------------------------


def build_task(run: dict, scaler=None):
    """Return ``(TaskData, scaler or None, d_input, d_output, model_task)`` for a resolved train config."""
    task = run["task"]
    if task == "synth-bidir":
        data = bidir_task(run["bidir_length"], run["bidir_train"], run["bidir_val"], run["bidir_test"],
                          seed=run["data_seed"])
        return data, None, data.train.inputs.shape[-1], 3, "labeling"
    if task == "synth-sine":
        series = synth_sine(run["sine_length"], run["sine_noise"], seed=run["data_seed"], horizon=run["horizon"])
    else:
        if not run["data"]:
            raise ConfigError("--data is required for the csv task")
        series = load_csv(run["data"])
    if run["split"] not in ("months", "fractions"):
        raise ConfigError(f"split must be 'months' or 'fractions', got {run['split']!r}")
    splits = split_months(series) if run["split"] == "months" else split_fractions(series)
    data, scaler = forecast_task(series, run["horizon"], splits, train_stride=run["train_stride"], scaler=scaler)
    return data, scaler, series.n_features, series.n_features, "regression"


def _model_config(run: dict, d_input: int, d_output: int, task: str, seed: int) -> ModelConfig:
    return ModelConfig(d_input=d_input, d_output=d_output, task=task, seed=seed, dropout=run["dropout"],
                       **{k: run[k] for k in MODEL_KEYS})


def _train_config(run: dict, seed: int, threads: int) -> TrainConfig:
    return TrainConfig(batch_size=run["batch_size"], epochs=run["epochs"], base_lr=run["base_lr"],
                       min_lr=run["min_lr"], lr_decay=run["lr_decay"], dropout=run["dropout"],
                       weight_decay=run["weight_decay"], seed=seed,
                       max_grad_norm=run["max_grad_norm"] or None, eval_workers=threads)


def _write_csv(path: Path, columns, rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in columns})
    return path


def _cell(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


# -- subcommands -----------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    run = cfg.values
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved_config.ini")
    data, scaler, d_in, d_out, model_task = build_task(run)
    baseline = None
    if model_task == "regression":
        baseline = loss_mse(data.test.targets, persistence_forecast(data.test.inputs))
    print(f"task {run['task']}: {len(data.train)} train / {len(data.val)} val / {len(data.test)} test samples")

    metric_rows, summary_rows = [], []
    for seed in run["seeds"]:
        model = init_model(_model_config(run, d_in, d_out, model_task, seed))
        start = time.perf_counter()
        report = train(model, data, _train_config(run, seed, run["threads"]))
        for e in range(report.epochs):
            for split, metrics in (("val", report.val[e]), ("test", report.test[e])):
                metric_rows.append({"epoch": e, "split": split, "mse": metrics.get("mse", ""),
                                    "mae": metrics.get("mae", ""), "lr": report.lr[e],
                                    "seconds": report.seconds[e], "seed": seed,
                                    "train_loss": report.train_loss[e],
                                    "accuracy": metrics.get("accuracy", "")})
        final = report.final_test
        summary_rows.append({"seed": seed, "best_epoch": report.best_epoch, "test_mse": final.get("mse", ""),
                             "test_mae": final.get("mae", ""), "test_accuracy": final.get("accuracy", ""),
                             "persistence_mse": baseline if baseline is not None else ""})
        extras = {"scaler_mean": scaler.mean, "scaler_scale": scaler.scale} if scaler is not None else {}
        meta = {"run": {k: _fmt(v) for k, v in run.items()}, "seed": seed, "best_epoch": report.best_epoch}
        save_checkpoint(model, out / f"model_seed{seed}.ckpt", extras=extras, meta=meta)
        shown = ", ".join(f"{k} {v:.6g}" for k, v in final.items())
        print(f"seed {seed}: best epoch {report.best_epoch}, test {shown} ({time.perf_counter() - start:.1f} s)")

    _write_csv(out / "metrics.csv", METRIC_COLUMNS, metric_rows)
    mean = {"seed": "mean"}
    for col in ("test_mse", "test_mae", "test_accuracy"):
        vals = [r[col] for r in summary_rows if r[col] != ""]
        mean[col] = statistics.fmean(vals) if vals else ""
    mean["persistence_mse"] = summary_rows[0]["persistence_mse"]
    mean["best_epoch"] = ""
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows + [mean])

    if model_task == "regression":
        print(f"mean over {len(summary_rows)} seed(s): test mse {mean['test_mse']:.6g}, mae {mean['test_mae']:.6g}; "
              f"persistence mse {baseline:.6g}")
        if run["task"] == "csv" and run["horizon"] == 24:
            print(f"published reference (ETTh1, horizon 24): mse {PAPER_ETTH1_H24['mse']}, "
                  f"mae {PAPER_ETTH1_H24['mae']}")
        if run["task"] == "synth-sine" and run["split"] == "fractions":
            scale = float(scaler.scale[0]) ** 2
            print(f"oracle persistence mse (raw units) {sine_persistence_mse(run['horizon'], run['sine_noise']):.6g}; "
                  f"model {mean['test_mse'] * scale:.6g}")
    else:
        print(f"mean over {len(summary_rows)} seed(s): test accuracy {mean['test_accuracy']:.4f}")
    print(f"artifacts in {out}")
    return 0


def _run_from_meta(meta: dict) -> dict:
    stored = meta.get("run")
    if not stored:
        raise ConfigError("checkpoint carries no run settings; was it written by 'blur train'?")
    run = {}
    for key, text in stored.items():
        if key in TRAIN_KEYS:
            run[key] = TRAIN_KEYS[key].parse(text)
    return run


def cmd_eval(cfg: RunConfig) -> int:
    opts = cfg.values
    if not opts["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    model = load_checkpoint(opts["checkpoint"])
    run = _run_from_meta(model.meta)
    if opts["data"]:
        run["data"] = opts["data"]
    if opts["horizon"]:
        run["horizon"] = opts["horizon"]
    if opts["split"] not in ("val", "test"):
        raise ConfigError(f"split must be 'val' or 'test', got {opts['split']!r}")
    stored = None
    if "scaler_mean" in model.extras:
        stored = Standardizer(model.extras["scaler_mean"], model.extras["scaler_scale"])
    data, _, d_in, d_out, model_task = build_task(run, scaler=stored)
    if (d_in, d_out) != (model.config.d_input, model.config.d_output):
        raise ConfigError(f"data has {d_in} inputs / {d_out} outputs, checkpoint expects "
                          f"{model.config.d_input} / {model.config.d_output}")
    split = getattr(data, opts["split"])
    if split.inputs.shape[1] != run["horizon"] and model_task == "regression":
        raise ConfigError("window length does not match the horizon")

    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved_config.ini")
    metrics = evaluate(model, split, workers=opts["threads"])
    pred = predict(model, split.inputs, workers=opts["threads"])
    row = {"split": opts["split"], "windows": len(split), **metrics}
    if model_task == "regression":
        row["persistence_mse"] = loss_mse(split.targets, persistence_forecast(split.inputs))
    _write_csv(out / "eval_metrics.csv", EVAL_COLUMNS, [row])

    rows, columns = [], ["window", "step"]
    if model_task == "regression":
        names = [f"f{j}" for j in range(d_out)]
        columns += [f"truth_{c}" for c in names] + [f"pred_{c}" for c in names]
        for w in range(len(split)):
            for k in range(split.inputs.shape[1]):
                r = {"window": w, "step": k}
                r.update({f"truth_{c}": split.targets[w, k, j] for j, c in enumerate(names)})
                r.update({f"pred_{c}": pred[w, k, j] for j, c in enumerate(names)})
                rows.append(r)
    else:
        columns += ["truth", "pred"]
        labels = np.argmax(pred, axis=-1)
        for w in range(len(split)):
            for k in range(split.inputs.shape[1]):
                rows.append({"window": w, "step": k, "truth": int(split.targets[w, k]), "pred": int(labels[w, k])})
    _write_csv(out / "predictions.csv", columns, rows)
    print(", ".join(f"{k} {v:.6g}" for k, v in metrics.items()) + f" on {len(split)} {opts['split']} windows")
    print(f"artifacts in {out}")
    return 0


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cmd_bench(cfg: RunConfig) -> int:
    opts = cfg.values
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved_config.ini")
    rng = np.random.default_rng(opts["seed"])
    ops = [o.strip() for o in opts["ops"].split(",") if o.strip()]
    unknown = set(ops) - {"seq_scan", "par_scan", "blur_forward"}
    if unknown:
        raise ConfigError(f"unknown benchmark ops {sorted(unknown)}")
    n, w = opts["width"], opts["model_width"]
    lam = 0.999 * np.exp(1j * rng.uniform(0, 2 * np.pi, n))
    model = init_model(ModelConfig(d_input=1, d_output=1, d_model=w, d_hidden=w, n_layers=2, seed=opts["seed"]))
    rows = []
    for op in ops:
        prev = None
        for N in sorted(opts["sizes"]):
            if op == "blur_forward":
                v = rng.normal(size=(1, N, 1))
                fn = lambda: model_forward(model, v)
            else:
                b = rng.normal(size=(N, n)) + 1j * rng.normal(size=(N, n))
                scan = seq_scan if op == "seq_scan" else par_scan
                fn = lambda: scan(lam, b)
            t = _median_time(fn, opts["repeats"], opts["warmup"])
            ratio = ""
            if prev is not None:
                doublings = np.log2(N / prev[0])
                ratio = (t / prev[1]) ** (1.0 / doublings) if doublings > 0 else ""
            rows.append({"op": op, "N": N, "median_seconds": t, "ns_per_element": 1e9 * t / N,
                         "doubling_ratio": ratio})
            print(f"{op:>12} N={N:>8}  {t:.4g} s  {1e9 * t / N:.4g} ns/element")
            prev = (N, t)
    rows.sort(key=lambda r: (r["N"], ops.index(r["op"])))
    _write_csv(out / "bench.csv", BENCH_COLUMNS, rows)
    print(f"artifacts in {out}")
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    opts = cfg.values
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved_config.ini")
    reports = run_suite(inject_unstable=opts["inject_unstable"], seed=opts["seed"])
    write_reports(reports, out / "probes.csv")
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.probe}  measured={r.measured:.3g}  tol={r.tolerance:.3g}")
    print(f"{len(reports) - len(failed)}/{len(reports)} probes passed; report in {out / 'probes.csv'}")
    return 1 if failed else 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "verify": cmd_verify}


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blur", description="Bidirectional linear recurrent networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"train": "train on a CSV or synthetic task", "eval": "evaluate a checkpoint",
             "bench": "time the scans and the network forward pass", "verify": "run the verification probes"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="INI file; the [%s] section is read" % name)
        p.add_argument("--data")
        p.add_argument("--horizon", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting")
        if name == "train":
            p.add_argument("--task", choices=TASKS)
            p.add_argument("--epochs", type=int)
        if name == "eval":
            p.add_argument("--checkpoint")
        if name == "bench":
            p.add_argument("--sizes", help="comma-separated sequence lengths")
        if name == "verify":
            p.add_argument("--inject-unstable", dest="inject_unstable", action="store_true",
                           help="swap in an |lambda| = 1.01 layer; the stability probe must fail")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args.command, args)
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"blur {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (BlurError, OSError, ValueError) as exc:
        print(f"blur {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
