"""Heuristic detector the transducer is compared against.

Two rules, OR-ed:

1. entropy rule: the maximum ``window``-length rolling mean of the byte
   entropy channel exceeds ``theta1``;
2. signature rule: the cosine similarity between the trace's signature
   vector and any stored family signature reaches ``COSINE_THRESHOLD``.

A trace's signature vector is the channel mean over the 64 windows starting
at its activity peak (the window farthest in L2 from the per-channel trace
median), minus the training benign channel means.  Centering on the benign
means matters: in normalized space the raw segment mean is dominated by the
shared benign offset, which would make every cosine collapse toward 1.

``fit_baseline`` grid-searches ``window`` and ``theta1`` (quantiles of the
training entropy values) for the best training balanced accuracy; ties keep
the smallest window, then the smallest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .statespace import LABEL_BENIGN, LABEL_RANSOMWARE, StateTrace

__all__ = [
    "BaselineParams",
    "COSINE_THRESHOLD",
    "ENTROPY_CHANNEL",
    "GRID_QUANTILES",
    "GRID_WINDOWS",
    "SIGNATURE_WINDOW",
    "SignatureBaseline",
    "detect",
    "fit_baseline",
    "max_rolling_mean",
    "trace_signature",
]

ENTROPY_CHANNEL = 0
SIGNATURE_WINDOW = 64
COSINE_THRESHOLD = 0.95
GRID_WINDOWS = (4, 8, 16, 32, 64)
GRID_QUANTILES = (0.5, 0.75, 0.9, 0.95, 0.98, 0.99, 0.995, 0.998, 0.999, 0.9995)


@dataclass(frozen=True)
class BaselineParams:
    window: int
    theta1: float
    benign_means: np.ndarray
    signatures: dict[str, np.ndarray]


def max_rolling_mean(values: np.ndarray, window: int) -> float:
    """Max over all length-``window`` means; whole-series mean if shorter."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n == 0:
        raise ValueError("empty series")
    if n < window:
        return float(values.mean())
    csum = np.concatenate([[0.0], np.cumsum(values)])
    return float(np.max((csum[window:] - csum[:-window]) / window))


def trace_signature(states: np.ndarray, benign_means: np.ndarray) -> np.ndarray:
    """Benign-centered channel mean of the 64 windows after the activity peak."""
    med = np.median(states, axis=0)
    peak = int(np.argmax(np.linalg.norm(states - med, axis=1)))
    seg = states[peak:peak + SIGNATURE_WINDOW]
    return seg.mean(axis=0) - benign_means


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _best_cosine(sig: np.ndarray, signatures: dict[str, np.ndarray]):
    best, name = -1.0, None
    for family in sorted(signatures):
        c = _cosine(sig, signatures[family])
        if c > best:
            best, name = c, family
    return best, name


def detect(trace: StateTrace, params: BaselineParams):
    """(label, score) for one trace.

    The score is the larger of the two rule margins (entropy excess over
    theta1, cosine excess over the match cutoff); it is informational, the
    label is what evaluation uses.
    """
    roll = max_rolling_mean(trace.states[:, ENTROPY_CHANNEL], params.window)
    sig = trace_signature(trace.states, params.benign_means)
    cos, _ = _best_cosine(sig, params.signatures)
    flagged = roll > params.theta1 or cos >= COSINE_THRESHOLD
    label = LABEL_RANSOMWARE if flagged else LABEL_BENIGN
    return label, max(roll - params.theta1, cos - COSINE_THRESHOLD)


def fit_baseline(train_traces: list[StateTrace]) -> BaselineParams:
    """Build signatures from training ransomware and grid-search the entropy
    rule on training balanced accuracy."""
    benign = [t for t in train_traces if t.label == LABEL_BENIGN]
    attacks = [t for t in train_traces if t.label == LABEL_RANSOMWARE]
    if not benign or not attacks:
        raise ValueError("baseline fit needs both classes in the training split")

    benign_means = np.mean([t.states.mean(axis=0) for t in benign], axis=0)
    by_family: dict[str, list[np.ndarray]] = {}
    for t in attacks:
        by_family.setdefault(t.family, []).append(
            trace_signature(t.states, benign_means))
    signatures = {fam: np.mean(sigs, axis=0) for fam, sigs in by_family.items()}

    # precompute per-trace evidence once; the grid only moves the cutoffs
    y = np.array([1 if t.label == LABEL_RANSOMWARE else 0 for t in train_traces])
    cosines = np.array([
        _best_cosine(trace_signature(t.states, benign_means), signatures)[0]
        for t in train_traces])
    sig_hit = cosines >= COSINE_THRESHOLD
    entropy_pool = np.concatenate(
        [t.states[:, ENTROPY_CHANNEL] for t in train_traces])
    thetas = np.quantile(entropy_pool, GRID_QUANTILES)

    best = (-1.0, None, None)
    for window in GRID_WINDOWS:
        rolls = np.array([max_rolling_mean(t.states[:, ENTROPY_CHANNEL], window)
                          for t in train_traces])
        for theta1 in thetas:
            pred = (rolls > theta1) | sig_hit
            tpr = float(np.mean(pred[y == 1]))
            tnr = float(np.mean(~pred[y == 0]))
            bal = 0.5 * (tpr + tnr)
            if bal > best[0]:
                best = (bal, window, float(theta1))
    _, window, theta1 = best
    return BaselineParams(window, theta1, benign_means, signatures)


class SignatureBaseline(BaseEstimator):
    """sklearn-style wrapper around :func:`fit_baseline` / :func:`detect`."""

    def fit(self, X, y=None):
        self.params_ = fit_baseline(list(X))
        return self

    def predict(self, X) -> np.ndarray:
        return np.array([detect(t, self.params_)[0] for t in X])

    def decision_function(self, X) -> np.ndarray:
        return np.array([detect(t, self.params_)[1] for t in X])
