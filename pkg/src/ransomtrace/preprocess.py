"""Trace preprocessing: denoise, min-max normalization, temporal split.

Normalization statistics are always fitted on the training split alone and
carry provenance (a label plus a digest of the contributing trace ids) so a
leakage audit can prove where they came from.  The split is temporal within
each family: traces stay in generation order and each family is apportioned
across train/val/test by largest remainder, so per-split family proportions
are within one trace of the requested ratios.

Two modes:

* default -- every trace is denoised with one window and normalized to one
  dataset-level target range;
* table-faithful -- families tagged ``denoise=False`` (and benign) skip
  denoising, and families carrying their own ``norm_range`` are normalized
  into it while everyone else uses the default range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .generator import FamilyProfile, profiles_by_name
from .statespace import Dataset, LABEL_BENIGN, StateTrace, ids_digest

__all__ = [
    "DEFAULT_RANGE",
    "LeakageError",
    "MovingAverageDenoiser",
    "NormStats",
    "NormalizationRange",
    "SplitSpec",
    "Splits",
    "TraceNormalizer",
    "audit_stats",
    "denoise",
    "fit_stats",
    "load_stats",
    "normalize",
    "prep_eval_traces",
    "prep_pipeline",
    "save_stats",
    "stratified_split",
]


class LeakageError(RuntimeError):
    """Raised when evaluation inputs overlap training data or stats lack
    training provenance."""


@dataclass(frozen=True)
class NormalizationRange:
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError(f"need finite lo < hi, got ({self.lo}, {self.hi})")


DEFAULT_RANGE = NormalizationRange(-1.0, 1.0)


@dataclass
class NormStats:
    """Per-channel source min/max plus the target range and provenance."""

    src_min: np.ndarray
    src_max: np.ndarray
    lo: float
    hi: float
    provenance: str
    ids_digest: str
    family_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def range_for(self, family: str) -> NormalizationRange:
        lo, hi = self.family_ranges.get(family, (self.lo, self.hi))
        return NormalizationRange(lo, hi)


def fit_stats(traces: list[StateTrace], target: NormalizationRange = DEFAULT_RANGE,
              provenance: str = "train",
              family_ranges: dict[str, tuple[float, float]] | None = None) -> NormStats:
    if not traces:
        raise ValueError("cannot fit normalization stats on zero traces")
    src_min = np.min([t.states.min(axis=0) for t in traces], axis=0)
    src_max = np.max([t.states.max(axis=0) for t in traces], axis=0)
    return NormStats(src_min, src_max, target.lo, target.hi, provenance,
                     ids_digest(t.id for t in traces), dict(family_ranges or {}))


def normalize(trace: StateTrace, stats: NormStats,
              target: NormalizationRange | None = None) -> StateTrace:
    """Affine per-channel map of [src_min, src_max] onto [lo, hi].

    Values outside the source envelope clip to the range ends; a degenerate
    channel (src_min == src_max) maps to the range midpoint.
    """
    rng = target if target is not None else NormalizationRange(stats.lo, stats.hi)
    span = stats.src_max - stats.src_min
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    scaled = (trace.states - stats.src_min) / safe
    out = rng.lo + scaled * (rng.hi - rng.lo)
    out = np.clip(out, rng.lo, rng.hi)
    if degenerate.any():
        out[:, degenerate] = 0.5 * (rng.lo + rng.hi)
    return StateTrace(trace.id, trace.label, trace.family, trace.window_dt,
                      out, trace.actions)


def denoise(trace: StateTrace, window: int = 3) -> StateTrace:
    """Centered moving average per channel; the window truncates at the ends.

    ``window`` must be odd; a window of 1 is the identity.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return trace
    s = trace.states
    n = s.shape[0]
    h = window // 2
    csum = np.vstack([np.zeros((1, s.shape[1])), np.cumsum(s, axis=0)])
    lo = np.clip(np.arange(n) - h, 0, None)
    hi = np.clip(np.arange(n) + h + 1, None, n)
    out = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return StateTrace(trace.id, trace.label, trace.family, trace.window_dt,
                      out, trace.actions)


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios (must sum to 1 within 1e-12).

    The seed field is carried for config compatibility; the ordered temporal
    strategy is fully deterministic and never consumes it.
    """

    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"need 3 non-negative ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-12:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


@dataclass
class Splits:
    train: list[StateTrace]
    val: list[StateTrace]
    test: list[StateTrace]


def _apportion(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of n into len(ratios) buckets.

    Remainder ties favor earlier buckets (train before val before test).
    """
    quotas = [n * r for r in ratios]
    base = [math.floor(q) for q in quotas]
    left = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def stratified_split(data, spec: SplitSpec) -> Splits:
    """Per-family temporal split: earliest traces to train, latest to test."""
    traces = data.traces if isinstance(data, Dataset) else list(data)
    by_family: dict[str, list[StateTrace]] = {}
    for t in traces:
        by_family.setdefault(t.family, []).append(t)
    out = Splits([], [], [])
    for family, group in by_family.items():
        if len(group) < 3:
            raise ValueError(f"family {family!r} has {len(group)} traces; need >= 3")
        n_train, n_val, _ = _apportion(len(group), spec.ratios)
        out.train.extend(group[:n_train])
        out.val.extend(group[n_train:n_train + n_val])
        out.test.extend(group[n_train + n_val:])
    return out


def audit_stats(stats: NormStats, train_traces: list[StateTrace],
                expect_provenance: str = "train") -> None:
    """Verify the stats were fitted on exactly these traces, else raise."""
    if stats.provenance != expect_provenance:
        raise LeakageError(f"stats provenance is {stats.provenance!r}, "
                           f"expected {expect_provenance!r}")
    digest = ids_digest(t.id for t in train_traces)
    if digest != stats.ids_digest:
        raise LeakageError("normalization stats digest does not match the "
                           "training split; stats were fitted on different traces")


def prep_pipeline(dataset: Dataset, split_spec: SplitSpec, window: int = 3,
                  table_faithful: bool = False,
                  profiles: dict[str, FamilyProfile] | None = None,
                  target: NormalizationRange = DEFAULT_RANGE,
                  ) -> tuple[Splits, NormStats]:
    """split -> denoise -> fit stats on train -> normalize all splits."""
    if profiles is None:
        profiles = profiles_by_name()
    splits = stratified_split(dataset, split_spec)

    def wants_denoise(t: StateTrace) -> bool:
        if not table_faithful:
            return True
        if t.family == LABEL_BENIGN:
            return False
        prof = profiles.get(t.family)
        return prof.denoise if prof is not None else True

    family_ranges: dict[str, tuple[float, float]] = {}
    if table_faithful:
        for prof in profiles.values():
            if prof.norm_range is not None:
                family_ranges[prof.name] = tuple(prof.norm_range)

    for name in ("train", "val", "test"):
        cleaned = [denoise(t, window) if wants_denoise(t) else t
                   for t in getattr(splits, name)]
        setattr(splits, name, cleaned)

    stats = fit_stats(splits.train, target, "train", family_ranges)
    for name in ("train", "val", "test"):
        normed = [normalize(t, stats, stats.range_for(t.family))
                  for t in getattr(splits, name)]
        setattr(splits, name, normed)
    return splits, stats


def prep_eval_traces(traces: list[StateTrace], stats: NormStats, window: int = 3,
                     table_faithful: bool = False,
                     profiles: dict[str, FamilyProfile] | None = None,
                     ) -> list[StateTrace]:
    """Apply the fitted pipeline transform to traces generated after the fit.

    Mirrors :func:`prep_pipeline` exactly (denoise policy, per-family target
    ranges) but never refits, so evaluation sets share the training envelope.
    Families unknown to the profile table denoise by default and use the
    fitted default range.
    """
    if profiles is None:
        profiles = profiles_by_name()

    def wants_denoise(t: StateTrace) -> bool:
        if not table_faithful:
            return True
        if t.family == LABEL_BENIGN:
            return False
        prof = profiles.get(t.family)
        return prof.denoise if prof is not None else True

    out = []
    for t in traces:
        cleaned = denoise(t, window) if wants_denoise(t) else t
        out.append(normalize(cleaned, stats, stats.range_for(t.family)))
    return out


# --- persistence ------------------------------------------------------------

def save_stats(path, stats: NormStats) -> None:
    doc = {
        "lo": stats.lo,
        "hi": stats.hi,
        "src_min": stats.src_min.tolist(),
        "src_max": stats.src_max.tolist(),
        "provenance": stats.provenance,
        "ids_digest": stats.ids_digest,
        "family_ranges": {k: list(v) for k, v in sorted(stats.family_ranges.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_stats(path) -> NormStats:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return NormStats(np.asarray(doc["src_min"], dtype=np.float64),
                     np.asarray(doc["src_max"], dtype=np.float64),
                     float(doc["lo"]), float(doc["hi"]),
                     doc["provenance"], doc["ids_digest"],
                     {k: tuple(v) for k, v in doc["family_ranges"].items()})


# --- sklearn-style wrappers -------------------------------------------------

class TraceNormalizer(BaseEstimator, TransformerMixin):
    """Min-max trace normalizer with train-only statistics.

    Parameters
    ----------
    lo, hi : float
        Target range.
    provenance : str
        Label recorded in the fitted stats (used by the leakage audit).

    Attributes
    ----------
    stats_ : NormStats
        Fitted per-channel source envelope and provenance.
    """

    def __init__(self, lo: float = -1.0, hi: float = 1.0, provenance: str = "train"):
        self.lo = lo
        self.hi = hi
        self.provenance = provenance

    def fit(self, X, y=None):
        self.stats_ = fit_stats(list(X), NormalizationRange(self.lo, self.hi),
                                self.provenance)
        return self

    def transform(self, X):
        return [normalize(t, self.stats_) for t in X]


class MovingAverageDenoiser(BaseEstimator, TransformerMixin):
    """Stateless centered moving-average denoiser.

    ``skip_families`` lists family names passed through untouched.
    """

    def __init__(self, window: int = 3, skip_families: tuple[str, ...] = ()):
        self.window = window
        self.skip_families = skip_families

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        skip = set(self.skip_families)
        return [t if t.family in skip else denoise(t, self.window) for t in X]
