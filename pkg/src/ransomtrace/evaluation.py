"""Experiment harness: metrics, latency, generalization and speed robustness.

Everything here is deterministic given the seeds carried by the inputs; wall
clock numbers go into a separate timing dict so the report itself is
byte-stable across runs.  Model rows are named "transducer" and "baseline"
in every table.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import BaselineParams, detect
from .generator import (CompositionSpec, FamilyProfile, gen_speed_set,
                        gen_unseen_families, profiles_by_name)
from .model import ModelParams, Threshold, classify_prefix, score_trace
from .preprocess import LeakageError, NormStats, Splits, prep_eval_traces
from .statespace import Dataset, LABEL_BENIGN, LABEL_RANSOMWARE, StateTrace

__all__ = [
    "Confusion",
    "DEFAULT_SWEEP_SPEEDS",
    "DEFAULT_UNSEEN_FAMILIES",
    "EvalReport",
    "MODEL_BASELINE",
    "MODEL_TRANSDUCER",
    "confusion",
    "detection_rates",
    "ensure_no_leakage",
    "latency_rows",
    "metrics_from_confusion",
    "run_experiments",
    "save_report",
    "write_families_csv",
    "write_latency_csv",
    "write_metrics_csv",
    "write_sweep_csv",
]

MODEL_TRANSDUCER = "transducer"
MODEL_BASELINE = "baseline"

DEFAULT_SWEEP_SPEEDS = (1.0, 5.0, 10.0, 25.0, 50.0)
DEFAULT_SWEEP_PER_FAMILY = 8
DEFAULT_UNSEEN_FAMILIES = ("royal", "quantum", "play")

_METRIC_ORDER = ("accuracy", "precision", "recall", "f1", "fpr", "fnr")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(y_true, y_pred) -> Confusion:
    """Counts with ransomware as the positive class; labels are strings."""
    if len(y_true) != len(y_pred):
        raise ValueError("label length mismatch")
    tp = fp = tn = fn = 0
    for t, p in zip(y_true, y_pred):
        if t == LABEL_RANSOMWARE:
            if p == LABEL_RANSOMWARE:
                tp += 1
            else:
                fn += 1
        else:
            if p == LABEL_RANSOMWARE:
                fp += 1
            else:
                tn += 1
    return Confusion(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics_from_confusion(c: Confusion) -> dict[str, float]:
    """Standard rates; any zero denominator yields 0.0 for that metric."""
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return {
        "accuracy": _ratio(c.tp + c.tn, c.n),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "fpr": _ratio(c.fp, c.fp + c.tn),
        "fnr": _ratio(c.fn, c.fn + c.tp),
    }


def detection_rates(traces: list[StateTrace], preds) -> dict[str, float]:
    """Per-family fraction of ransomware traces flagged; benign excluded."""
    hits: dict[str, list[int]] = {}
    for t, p in zip(traces, preds):
        if t.label == LABEL_RANSOMWARE:
            hits.setdefault(t.family, []).append(1 if p == LABEL_RANSOMWARE else 0)
    return {fam: float(np.mean(v)) for fam, v in sorted(hits.items())}


def latency_rows(traces: list[StateTrace], params: ModelParams, tau: float,
                 stride: int = 8, persistence: int = 3) -> list[dict]:
    """Per-family median detection latency over ransomware traces.

    Misses never enter the median; they are reported in the ``missed`` count.
    ``median_s`` is None for a family with zero detections.
    """
    buckets: dict[str, list[float]] = {}
    missed: dict[str, int] = {}
    for t in traces:
        if t.label != LABEL_RANSOMWARE:
            continue
        buckets.setdefault(t.family, [])
        missed.setdefault(t.family, 0)
        _, latency = classify_prefix(t, params, tau, stride, persistence)
        if latency is None:
            missed[t.family] += 1
        else:
            buckets[t.family].append(latency)
    rows = []
    for fam in sorted(buckets):
        det = buckets[fam]
        rows.append({
            "family": fam,
            "median_s": float(np.median(det)) if det else None,
            "detected": len(det),
            "missed": missed[fam],
        })
    return rows


def ensure_no_leakage(train_ids, eval_sets: dict[str, list[str]]) -> None:
    """Raise LeakageError if any evaluation id was seen during fitting."""
    fitted = set(train_ids)
    for name, ids in eval_sets.items():
        shared = fitted.intersection(ids)
        if shared:
            sample = sorted(shared)[:5]
            raise LeakageError(
                f"{len(shared)} {name} trace ids appeared during fitting: {sample}")


@dataclass
class EvalReport:
    metrics: dict            # model -> metric -> value (test split)
    families: dict           # family -> model -> detection rate (test split)
    latency: list            # latency_rows output (transducer, test split)
    latency_overall_median_s: float | None
    sweep: list              # {speed_mbps, model, accuracy}
    unseen: dict             # per-family and overall unseen accuracy
    evasion: dict            # evasive vs non-evasive detection-rate gaps
    threshold: dict          # {tau, provenance}
    counts: dict             # split and eval-set sizes
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "families": self.families,
            "latency": self.latency,
            "latency_overall_median_s": self.latency_overall_median_s,
            "sweep": self.sweep,
            "unseen": self.unseen,
            "evasion": self.evasion,
            "threshold": self.threshold,
            "counts": self.counts,
            "config": self.config,
        }


def _predict_transducer(traces, params: ModelParams, tau: float) -> list[str]:
    return [LABEL_RANSOMWARE if score_trace(t, params) > tau else LABEL_BENIGN
            for t in traces]


def _predict_baseline(traces, params: BaselineParams) -> list[str]:
    return [detect(t, params)[0] for t in traces]


def _accuracy(y_true, y_pred) -> float:
    return metrics_from_confusion(confusion(y_true, y_pred))["accuracy"]


def run_experiments(splits: Splits, stats: NormStats, model_params: ModelParams,
                    threshold: Threshold, baseline_params: BaselineParams,
                    spec: CompositionSpec, *, seed: int | None = None,
                    unseen: Dataset | None = None,
                    unseen_names=DEFAULT_UNSEEN_FAMILIES,
                    sweep_speeds=DEFAULT_SWEEP_SPEEDS,
                    sweep_per_family: int = DEFAULT_SWEEP_PER_FAMILY,
                    window: int = 3, table_faithful: bool = False,
                    profiles: dict[str, FamilyProfile] | None = None,
                    stride: int = 8, persistence: int = 3,
                    ) -> tuple[EvalReport, dict]:
    """Full evaluation battery; returns (report, timing seconds by phase).

    Fresh unseen-family and speed-controlled sets are generated here (unless
    ``unseen`` is supplied) and pushed through the fitted preprocessing.
    The no-leakage guard runs before any scoring.
    """
    if seed is None:
        seed = spec.seed
    timing: dict[str, float] = {}
    t0 = time.perf_counter()

    if unseen is None:
        unseen = gen_unseen_families(unseen_names, spec, seed)
    sweep_sets = {speed: gen_speed_set(spec, speed, sweep_per_family, seed)
                  for speed in sweep_speeds}
    timing["generate_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    unseen_traces = prep_eval_traces(unseen.traces, stats, window,
                                     table_faithful, profiles)
    sweep_prepped = {speed: prep_eval_traces(traces, stats, window,
                                             table_faithful, profiles)
                     for speed, traces in sweep_sets.items()}
    timing["preprocess_s"] = time.perf_counter() - t0

    train_ids = [t.id for t in splits.train] + [t.id for t in splits.val]
    eval_ids = {"test": [t.id for t in splits.test],
                "unseen": [t.id for t in unseen_traces]}
    for speed, traces in sweep_prepped.items():
        eval_ids[f"sweep-{speed:g}"] = [t.id for t in traces]
    ensure_no_leakage(train_ids, eval_ids)

    t0 = time.perf_counter()
    test = splits.test
    y_test = [t.label for t in test]
    pred_t = _predict_transducer(test, model_params, threshold.tau)
    pred_b = _predict_baseline(test, baseline_params)
    metrics = {
        MODEL_TRANSDUCER: metrics_from_confusion(confusion(y_test, pred_t)),
        MODEL_BASELINE: metrics_from_confusion(confusion(y_test, pred_b)),
    }

    rates_t = detection_rates(test, pred_t)
    rates_b = detection_rates(test, pred_b)
    families = {fam: {MODEL_TRANSDUCER: rates_t[fam], MODEL_BASELINE: rates_b[fam]}
                for fam in sorted(rates_t)}

    if profiles is None:
        profiles = profiles_by_name(spec.profiles)
    evasive = sorted(f for f in rates_t
                     if f in profiles and profiles[f].evasion != "none")
    plain = sorted(f for f in rates_t
                   if f in profiles and profiles[f].evasion == "none")
    gap = {f: rates_t[f] - rates_b[f] for f in rates_t}
    evasion = {
        "evasive_families": evasive,
        "non_evasive_families": plain,
        "evasive_gap": float(np.mean([gap[f] for f in evasive])) if evasive else 0.0,
        "non_evasive_gap": float(np.mean([gap[f] for f in plain])) if plain else 0.0,
    }

    lat = latency_rows(test, model_params, threshold.tau, stride, persistence)
    all_lat = []
    for t in test:
        if t.label != LABEL_RANSOMWARE:
            continue
        _, latency = classify_prefix(t, model_params, threshold.tau, stride,
                                     persistence)
        if latency is not None:
            all_lat.append(latency)
    overall_median = float(np.median(all_lat)) if all_lat else None
    timing["test_eval_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    test_benign = [t for t in test if t.label == LABEL_BENIGN]
    seen_accuracy = metrics[MODEL_TRANSDUCER]["accuracy"]
    per_family_unseen = {}
    for fam in sorted({t.family for t in unseen_traces}):
        fam_traces = [t for t in unseen_traces if t.family == fam]
        mixed = fam_traces + test_benign
        y = [t.label for t in mixed]
        per_family_unseen[fam] = _accuracy(y, _predict_transducer(
            mixed, model_params, threshold.tau))
    mixed_all = list(unseen_traces) + test_benign
    y_all = [t.label for t in mixed_all]
    unseen_report = {
        "seen_accuracy": seen_accuracy,
        "per_family_accuracy": per_family_unseen,
        "overall_accuracy": _accuracy(y_all, _predict_transducer(
            mixed_all, model_params, threshold.tau)),
        "baseline_overall_accuracy": _accuracy(y_all, _predict_baseline(
            mixed_all, baseline_params)),
    }
    timing["unseen_eval_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sweep_rows = []
    for speed in sweep_speeds:
        traces = sweep_prepped[speed]
        y = [t.label for t in traces]
        sweep_rows.append({"speed_mbps": float(speed), "model": MODEL_TRANSDUCER,
                           "accuracy": _accuracy(y, _predict_transducer(
                               traces, model_params, threshold.tau))})
        sweep_rows.append({"speed_mbps": float(speed), "model": MODEL_BASELINE,
                           "accuracy": _accuracy(y, _predict_baseline(
                               traces, baseline_params))})
    timing["sweep_eval_s"] = time.perf_counter() - t0

    counts = {
        "train": len(splits.train),
        "val": len(splits.val),
        "test": len(test),
        "unseen": len(unseen_traces),
        "sweep_per_speed": {f"{s:g}": len(sweep_prepped[s]) for s in sweep_speeds},
    }
    config = {
        "seed": int(seed),
        "scale": spec.scale,
        "sweep_speeds": [float(s) for s in sweep_speeds],
        "sweep_per_family": sweep_per_family,
        "unseen_families": sorted({t.family for t in unseen_traces}),
        "stride": stride,
        "persistence": persistence,
        "table_faithful": table_faithful,
    }
    report = EvalReport(metrics, families, lat, overall_median, sweep_rows,
                        unseen_report, evasion,
                        {"tau": threshold.tau, "provenance": threshold.provenance},
                        counts, config)
    return report, timing


# --- flat-file emission -------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_metrics_csv(path, report: EvalReport) -> None:
    rows = [(model, metric, report.metrics[model][metric])
            for model in (MODEL_TRANSDUCER, MODEL_BASELINE)
            for metric in _METRIC_ORDER]
    _write_csv(path, ("model", "metric", "value"), rows)


def write_latency_csv(path, report: EvalReport) -> None:
    rows = [(r["family"], "" if r["median_s"] is None else r["median_s"],
             r["detected"], r["missed"]) for r in report.latency]
    _write_csv(path, ("family", "median_s", "detected", "missed"), rows)


def write_sweep_csv(path, report: EvalReport) -> None:
    rows = [(r["speed_mbps"], r["model"], r["accuracy"]) for r in report.sweep]
    _write_csv(path, ("speed_mbps", "model", "accuracy"), rows)


def write_families_csv(path, report: EvalReport) -> None:
    rows = [(fam, model, report.families[fam][model])
            for fam in sorted(report.families)
            for model in (MODEL_TRANSDUCER, MODEL_BASELINE)]
    _write_csv(path, ("family", "model", "detection_rate"), rows)


def save_report(out_dir, report: EvalReport, timing: dict | None = None) -> None:
    """Write report.json plus the four CSV tables (and timing.json if given).

    Wall-clock numbers stay out of report.json so it is byte-stable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    write_metrics_csv(out / "metrics.csv", report)
    write_latency_csv(out / "latency.csv", report)
    write_sweep_csv(out / "sweep.csv", report)
    write_families_csv(out / "families.csv", report)
    if timing is not None:
        (out / "timing.json").write_text(
            json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
