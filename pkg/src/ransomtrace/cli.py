"""Command-line pipeline driver: gen -> prep -> train -> eval -> report.

One top-level seed drives every stage.  Modules derive their own streams via
``numpy.random.SeedSequence([seed, domain, ...])`` with fixed domain codes
(dataset generation 1, unseen families 2, speed sweeps 3, model init 4,
training loop 5), so changing only the seed changes all outputs and changing
nothing changes nothing.

All outputs are written temp-then-rename so an interrupted run never leaves
a corrupt artifact, and an output directory is guarded by a ``.lock`` file
against concurrent invocations.

Exit codes: 0 success, 2 input/config error, 3 training divergence,
4 evaluation integrity (leakage or checkpoint/stats mismatch).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import os
import shutil
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .baseline import fit_baseline
from .dynamics import DivergenceError
from .evaluation import run_experiments, save_report
from .generator import WINDOW_DT, default_composition, gen_dataset
from .model import (TrainConfig, load_checkpoint, save_checkpoint, score_trace,
                    select_threshold, train)
from .preprocess import (LeakageError, NormalizationRange, SplitSpec, Splits,
                         load_stats, prep_pipeline, save_stats)
from .statespace import (LABEL_RANSOMWARE, ids_digest, load_dataset, load_traces,
                         save_manifest, save_traces, validate_dataset)

__all__ = ["ConfigError", "RunConfig", "load_run_config", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INTEGRITY = 4


class ConfigError(ValueError):
    """Bad config file, bad flag value, or missing input artifact."""


_DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "run",
    "paths": {
        "data_dir": "data",
        "model_path": "model.json",
        "log_path": "training_log.csv",
        "report_dir": "report",
    },
    "generator": {"scale": 1.0, "window_dt": WINDOW_DT},
    "preprocess": {
        "ratios": [0.8, 0.1, 0.1],
        "denoise_window": 3,
        "table_faithful": False,
        "norm_range": [-1.0, 1.0],
    },
    "train": {
        "blocks": 3,
        "width": 32,
        "alpha": 0.01,
        "beta": 1.0,
        "learning_rate": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "weight_decay": 1e-4,
        "dropout": 0.1,
        "epochs": 30,
        "batch_size": 16,
        "max_window": 256,
    },
    "eval": {
        "sweep_speeds": [1.0, 5.0, 10.0, 25.0, 50.0],
        "sweep_per_family": 8,
        "unseen_families": ["royal", "quantum", "play"],
        "stride": 8,
        "persistence": 3,
    },
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: Path
    data_dir: Path
    model_path: Path
    log_path: Path
    report_dir: Path
    scale: float
    window_dt: float
    ratios: tuple[float, ...]
    denoise_window: int
    table_faithful: bool
    norm_range: tuple[float, float]
    train: TrainConfig
    sweep_speeds: tuple[float, ...]
    sweep_per_family: int
    unseen_families: tuple[str, ...]
    stride: int
    persistence: int


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_run_config(config_path=None, seed=None, out=None, scale=None,
                    table_faithful=None) -> RunConfig:
    """Defaults <- config file <- command-line overrides, strictly validated."""
    doc = {}
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge(_DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out_dir"] = out
    if scale is not None:
        cfg["generator"]["scale"] = scale
    if table_faithful:
        cfg["preprocess"]["table_faithful"] = True

    out_dir = Path(cfg["out_dir"])

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else out_dir / p

    try:
        tc = TrainConfig(seed=int(cfg["seed"]), **cfg["train"])
        lo, hi = cfg["preprocess"]["norm_range"]
        return RunConfig(
            seed=int(cfg["seed"]),
            out_dir=out_dir,
            data_dir=resolve(cfg["paths"]["data_dir"]),
            model_path=resolve(cfg["paths"]["model_path"]),
            log_path=resolve(cfg["paths"]["log_path"]),
            report_dir=resolve(cfg["paths"]["report_dir"]),
            scale=float(cfg["generator"]["scale"]),
            window_dt=float(cfg["generator"]["window_dt"]),
            ratios=tuple(float(r) for r in cfg["preprocess"]["ratios"]),
            denoise_window=int(cfg["preprocess"]["denoise_window"]),
            table_faithful=bool(cfg["preprocess"]["table_faithful"]),
            norm_range=(float(lo), float(hi)),
            train=tc,
            sweep_speeds=tuple(float(s) for s in cfg["eval"]["sweep_speeds"]),
            sweep_per_family=int(cfg["eval"]["sweep_per_family"]),
            unseen_families=tuple(cfg["eval"]["unseen_families"]),
            stride=int(cfg["eval"]["stride"]),
            persistence=int(cfg["eval"]["persistence"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}")


# --- output plumbing ----------------------------------------------------------

def _atomic(final_path: Path, save_fn) -> None:
    """Run save_fn against a temp path, then rename over the final path."""
    final_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = final_path.with_name(final_path.name + ".tmp")
    save_fn(tmp)
    os.replace(tmp, final_path)


@contextlib.contextmanager
def _output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output dir {out_dir} is in use (remove stale {lock} to proceed)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path} (run `{hint}` first)")
    return path


# --- subcommands ----------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    spec = replace(default_composition(cfg.scale, cfg.seed),
                   window_dt=cfg.window_dt)
    ds = gen_dataset(spec)
    problems = validate_dataset(ds)
    if problems:
        raise ConfigError("generated dataset failed validation: "
                          + "; ".join(problems[:3]))
    with _output_lock(cfg.out_dir):
        _atomic(cfg.data_dir / "traces.jsonl", lambda p: save_traces(p, ds.traces))
        _atomic(cfg.data_dir / "manifest.json",
                lambda p: save_manifest(p, ds.manifest))
    fams = ", ".join(f"{k}:{v}" for k, v in sorted(ds.manifest["families"].items()))
    print(f"generated {len(ds.traces)} traces (seed {cfg.seed}, "
          f"scale {cfg.scale:g}) -> {cfg.data_dir}")
    print(f"  families: {fams}")
    return EXIT_OK


def cmd_prep(cfg: RunConfig) -> int:
    ds = load_dataset(_require(cfg.data_dir / "traces.jsonl",
                               "ransomtrace gen").parent)
    splits, stats = prep_pipeline(
        ds, SplitSpec(cfg.ratios, cfg.seed), cfg.denoise_window,
        cfg.table_faithful,
        target=NormalizationRange(*cfg.norm_range))
    with _output_lock(cfg.out_dir):
        for name in ("train", "val", "test"):
            traces = getattr(splits, name)
            _atomic(cfg.data_dir / f"{name}.jsonl",
                    lambda p, tr=traces: save_traces(p, tr))
        _atomic(cfg.data_dir / "norm_stats.json", lambda p: save_stats(p, stats))
    print(f"split {len(ds.traces)} traces -> train {len(splits.train)} / "
          f"val {len(splits.val)} / test {len(splits.test)}"
          + (" (table-faithful prep)" if cfg.table_faithful else ""))
    return EXIT_OK


def _write_training_log(path: Path, log: list[dict]) -> None:
    cols = ("epoch", "total", "bce", "prediction", "smoothness",
            "weight_decay", "val_balanced_accuracy")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for entry in log:
            w.writerow([entry[c] for c in cols])


def cmd_train(cfg: RunConfig) -> int:
    train_traces = load_traces(_require(cfg.data_dir / "train.jsonl",
                                        "ransomtrace prep"))
    val_traces = load_traces(_require(cfg.data_dir / "val.jsonl",
                                      "ransomtrace prep"))
    params, log = train(train_traces, val_traces, cfg.train)
    scores = [score_trace(t, params) for t in val_traces]
    labels = [1 if t.label == LABEL_RANSOMWARE else 0 for t in val_traces]
    digest = ids_digest(t.id for t in val_traces)[:12]
    thr = select_threshold(scores, labels, provenance=f"val:{digest}")
    with _output_lock(cfg.out_dir):
        _atomic(cfg.log_path, lambda p: _write_training_log(p, log))
        _atomic(cfg.model_path,
                lambda p: save_checkpoint(p, params, thr,
                                          cfg.data_dir / "norm_stats.json",
                                          cfg.train))
    best = max(log, key=lambda e: (e["val_balanced_accuracy"], -e["epoch"]))
    print(f"trained {cfg.train.epochs} epochs; best val balanced accuracy "
          f"{best['val_balanced_accuracy']:.4f} at epoch {best['epoch']}; "
          f"tau {thr.tau:.6f} -> {cfg.model_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    params, thr, doc = load_checkpoint(_require(cfg.model_path,
                                                "ransomtrace train"))
    stats_path = _require(cfg.data_dir / "norm_stats.json", "ransomtrace prep")
    ref = doc.get("norm_stats_ref")
    if ref is not None:
        actual = hashlib.sha256(stats_path.read_bytes()).hexdigest()
        if actual != ref["sha256"]:
            raise LeakageError(
                "norm_stats.json changed since training; refusing to evaluate")
    stats = load_stats(stats_path)
    splits = Splits(
        load_traces(_require(cfg.data_dir / "train.jsonl", "ransomtrace prep")),
        load_traces(_require(cfg.data_dir / "val.jsonl", "ransomtrace prep")),
        load_traces(_require(cfg.data_dir / "test.jsonl", "ransomtrace prep")))
    baseline_params = fit_baseline(splits.train)
    spec = replace(default_composition(cfg.scale, cfg.seed),
                   window_dt=cfg.window_dt)
    report, timing = run_experiments(
        splits, stats, params, thr, baseline_params, spec, seed=cfg.seed,
        unseen_names=cfg.unseen_families, sweep_speeds=cfg.sweep_speeds,
        sweep_per_family=cfg.sweep_per_family, window=cfg.denoise_window,
        table_faithful=cfg.table_faithful, stride=cfg.stride,
        persistence=cfg.persistence)
    with _output_lock(cfg.out_dir):
        tmp = cfg.report_dir.with_name(cfg.report_dir.name + ".tmp")
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        save_report(tmp, report, timing)
        cfg.report_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, cfg.report_dir / f.name)
        tmp.rmdir()
    m = report.metrics
    print(f"test accuracy: transducer {m['transducer']['accuracy']:.4f} "
          f"vs baseline {m['baseline']['accuracy']:.4f} -> {cfg.report_dir}")
    if report.latency_overall_median_s is not None:
        print(f"median detection latency {report.latency_overall_median_s:.3f} s")
    return EXIT_OK


def _copy_csv(src: Path, dst: Path, header_map=None) -> None:
    with open(src, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if header_map:
        rows[0] = [header_map.get(c, c) for c in rows[0]]
    with open(dst, "w", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)


def cmd_report(cfg: RunConfig) -> int:
    rd = cfg.report_dir
    for name in ("families.csv", "latency.csv", "sweep.csv"):
        _require(rd / name, "ransomtrace eval")
    with _output_lock(cfg.out_dir):
        _atomic(rd / "fig2_detection_rates.csv",
                lambda p: _copy_csv(rd / "families.csv", p,
                                    {"detection_rate": "rate"}))
        _atomic(rd / "fig3_latency.csv",
                lambda p: _copy_csv(rd / "latency.csv", p))
        _atomic(rd / "fig4_speed_accuracy.csv",
                lambda p: _copy_csv(rd / "sweep.csv", p))
    print(f"figure data -> {rd}/fig2_detection_rates.csv, "
          f"fig3_latency.csv, fig4_speed_accuracy.csv")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ransomtrace",
        description="Synthetic encrypted-behavior traces, a residual "
                    "transition-prediction classifier, and its evaluation "
                    "against a signature baseline.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen": "generate the labeled synthetic dataset",
        "prep": "split, denoise and normalize the dataset",
        "train": "train the transducer and calibrate the threshold",
        "eval": "run the full evaluation battery",
        "report": "emit figure-ready CSVs from an evaluation",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config mirroring RunConfig")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default: run)")
        if name == "gen":
            p.add_argument("--scale", type=float, default=None,
                           help="dataset scale factor (1.0 = full composition)")
        if name == "prep":
            p.add_argument("--table-faithful", action="store_true",
                           help="per-family denoise/range handling")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.seed, args.out,
                              getattr(args, "scale", None),
                              getattr(args, "table_faithful", False))
        handler = {"gen": cmd_gen, "prep": cmd_prep, "train": cmd_train,
                   "eval": cmd_eval, "report": cmd_report}[args.command]
        return handler(cfg)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except LeakageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
