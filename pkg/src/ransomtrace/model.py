"""Residual state-transition model and classifier head.

The transducer predicts the next behavioral state from the current state and
the observed action code: the concatenated ``(state, one-hot action)`` vector
passes through a stack of residual blocks (``h + W2 tanh(W1 h + b1) + b2``)
and the first ``d`` components of the output are the prediction.  With all
weights at zero every block is the identity, so the state passes through
unchanged and the score sits exactly at 0.5.

Classification pools the per-transition absolute residuals (per-channel mean
and per-channel max over time) into a ``2d`` vector and applies an affine
head plus a sigmoid.  The logit is clipped to ``+-LOGIT_CLIP`` before the
sigmoid so scores stay strictly inside (0, 1) in float64.

The training objective is

    bce(scores, labels)
    + beta  * mean residual power on benign traces
    + alpha * mean squared step-to-step difference of the flow net's output
    + weight_decay * ||theta||^2

with exact hand-written gradients (verified against central finite
differences) and an Adam-style optimizer.  Dropout applies to the residual
blocks' hidden activations only and only on the training path; the loss and
gradient entry points default to the deterministic evaluation path so the
finite-difference check is well posed.

Seed handling: parameter init draws from ``SeedSequence([seed, 4])`` and the
training loop (shuffling, crops, dropout) from ``SeedSequence([seed, 5])``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .dynamics import DivergenceError
from .statespace import LABEL_BENIGN, LABEL_RANSOMWARE, N_ACTIONS, StateTrace

__all__ = [
    "LOGIT_CLIP",
    "ModelParams",
    "Threshold",
    "TrainConfig",
    "TransductionClassifier",
    "classify",
    "classify_prefix",
    "forward",
    "grad",
    "init_params",
    "load_checkpoint",
    "loss",
    "save_checkpoint",
    "score_trace",
    "select_threshold",
    "train",
]

LOGIT_CLIP = 30.0

_DOMAIN_INIT = 4
_DOMAIN_TRAIN = 5


@dataclass
class ModelParams:
    """All learnable arrays; doubles as the gradient container."""

    d: int
    n_actions: int
    block_w1: list[np.ndarray]
    block_b1: list[np.ndarray]
    block_w2: list[np.ndarray]
    block_b2: list[np.ndarray]
    flow_v1: np.ndarray
    flow_c1: np.ndarray
    flow_v2: np.ndarray
    flow_c2: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.block_w1)

    @property
    def width(self) -> int:
        return self.block_w1[0].shape[0]

    def arrays(self):
        """(name, array) pairs in a fixed order shared with the optimizer."""
        for k in range(self.n_blocks):
            yield f"block{k}.w1", self.block_w1[k]
            yield f"block{k}.b1", self.block_b1[k]
            yield f"block{k}.w2", self.block_w2[k]
            yield f"block{k}.b2", self.block_b2[k]
        yield "flow.v1", self.flow_v1
        yield "flow.c1", self.flow_c1
        yield "flow.v2", self.flow_v2
        yield "flow.c2", self.flow_c2
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def param_count(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def copy(self) -> "ModelParams":
        return ModelParams(self.d, self.n_actions,
                           [a.copy() for a in self.block_w1],
                           [a.copy() for a in self.block_b1],
                           [a.copy() for a in self.block_w2],
                           [a.copy() for a in self.block_b2],
                           self.flow_v1.copy(), self.flow_c1.copy(),
                           self.flow_v2.copy(), self.flow_c2.copy(),
                           self.head_w.copy(), self.head_b.copy())

    def zeros_like(self) -> "ModelParams":
        out = self.copy()
        for _, a in out.arrays():
            a[:] = 0.0
        return out


def init_params(d: int, n_actions: int = N_ACTIONS, blocks: int = 3, width: int = 32,
                seed: int = 0) -> ModelParams:
    """Near-identity init: small residual branches, zero head."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _DOMAIN_INIT]))
    p = d + n_actions
    w1, b1, w2, b2 = [], [], [], []
    for _ in range(blocks):
        w1.append(rng.standard_normal((width, p)) / np.sqrt(p))
        b1.append(np.zeros(width))
        w2.append(rng.standard_normal((p, width)) * (0.1 / np.sqrt(width)))
        b2.append(np.zeros(p))
    flow_v1 = rng.standard_normal((width, d)) / np.sqrt(d)
    flow_c1 = np.zeros(width)
    flow_v2 = rng.standard_normal((d, width)) * (0.1 / np.sqrt(width))
    flow_c2 = np.zeros(d)
    return ModelParams(d, n_actions, w1, b1, w2, b2, flow_v1, flow_c1, flow_v2,
                       flow_c2, np.zeros(2 * d), np.zeros(1))


@dataclass(frozen=True)
class TrainConfig:
    blocks: int = 3
    width: int = 32
    alpha: float = 0.01          # flow smoothness coefficient
    beta: float = 1.0            # benign prediction coefficient
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    dropout: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    max_window: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1 or self.width < 1:
            raise ValueError("blocks and width must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 1 or self.batch_size < 1 or self.max_window < 2:
            raise ValueError("epochs/batch_size must be >= 1, max_window >= 2")
        for name in ("alpha", "beta", "learning_rate", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")


@dataclass(frozen=True)
class Threshold:
    tau: float
    provenance: str


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def _softplus(z: float) -> float:
    return float(np.log1p(np.exp(-abs(z))) + max(z, 0.0))


def _one_hot(actions: np.ndarray, n_actions: int) -> np.ndarray:
    if actions.size and (actions.min() < 0 or actions.max() >= n_actions):
        raise ValueError("action code outside the alphabet")
    return np.eye(n_actions)[actions]


def _forward_trace(states: np.ndarray, actions: np.ndarray, params: ModelParams,
                   dropout_p: float = 0.0, rng: np.random.Generator | None = None):
    """Run the transducer over one trace; returns a cache for backprop."""
    m = states.shape[0] - 1
    x = np.concatenate([states[:-1], _one_hot(actions, params.n_actions)], axis=1)
    hs = [x]
    tanhs, masks = [], []
    h = x
    for k in range(params.n_blocks):
        z = h @ params.block_w1[k].T + params.block_b1[k]
        t = np.tanh(z)
        if rng is not None and dropout_p > 0.0:
            mask = (rng.random(t.shape) >= dropout_p) / (1.0 - dropout_p)
        else:
            mask = None
        d_act = t if mask is None else t * mask
        h = h + d_act @ params.block_w2[k].T + params.block_b2[k]
        hs.append(h)
        tanhs.append(t)
        masks.append(mask)
    preds = h[:, :params.d]
    resid = states[1:] - preds
    a = np.abs(resid)
    pooled = np.concatenate([a.mean(axis=0), a.max(axis=0)])
    z_raw = float(pooled @ params.head_w + params.head_b[0])
    z_clip = float(np.clip(z_raw, -LOGIT_CLIP, LOGIT_CLIP))
    score = _sigmoid(z_clip)
    cache = dict(x=x, hs=hs, tanhs=tanhs, masks=masks, resid=resid, a=a,
                 pooled=pooled, z_raw=z_raw, m=m)
    return preds, resid, score, cache


def _flow_forward(states: np.ndarray, params: ModelParams):
    z = states @ params.flow_v1.T + params.flow_c1
    t = np.tanh(z)
    g = t @ params.flow_v2.T + params.flow_c2
    return g, t


def forward(trace: StateTrace, params: ModelParams, dropout_p: float = 0.0,
            rng: np.random.Generator | None = None):
    """(predicted next states (n-1, d), residuals (n-1, d), score in (0, 1)).

    The default arguments give the deterministic evaluation path; pass a
    generator plus a dropout rate for the training path.
    """
    if trace.d != params.d:
        raise ValueError(f"trace d={trace.d} != model d={params.d}")
    preds, resid, score, _ = _forward_trace(trace.states, trace.actions, params,
                                            dropout_p, rng)
    return preds, resid, score


def score_trace(trace: StateTrace, params: ModelParams) -> float:
    return forward(trace, params)[2]


def _label_of(trace: StateTrace) -> int:
    return 1 if trace.label == LABEL_RANSOMWARE else 0


def _loss_and_grad(batch: list[StateTrace], params: ModelParams, cfg: TrainConfig,
                   rng: np.random.Generator | None = None, want_grad: bool = True):
    """Shared implementation behind :func:`loss` and :func:`grad`."""
    nb = len(batch)
    if nb == 0:
        raise ValueError("empty batch")
    grads = params.zeros_like() if want_grad else None
    n_benign = sum(1 for t in batch if _label_of(t) == 0)
    bce_total = 0.0
    pred_total = 0.0
    smooth_total = 0.0

    for trace in batch:
        y = _label_of(trace)
        _, resid, _, cache = _forward_trace(trace.states, trace.actions,
                                            params, cfg.dropout, rng)
        m = cache["m"]
        z_raw = cache["z_raw"]
        z_c = float(np.clip(z_raw, -LOGIT_CLIP, LOGIT_CLIP))
        bce_total += _softplus(z_c) - y * z_c
        if y == 0:
            pred_total += float(np.sum(resid**2)) / m

        g_flow, t_flow = _flow_forward(trace.states, params)
        diffs = g_flow[1:] - g_flow[:-1]
        n_steps = diffs.shape[0]
        smooth_total += float(np.sum(diffs**2)) / n_steps

        if not want_grad:
            continue

        # head and pooled-statistics backprop
        gate = 1.0 if abs(z_raw) < LOGIT_CLIP else 0.0
        dz = (_sigmoid(z_c) - y) / nb * gate
        grads.head_w += cache["pooled"] * dz
        grads.head_b[0] += dz
        du = params.head_w * dz
        a = cache["a"]
        d_abs = np.tile(du[: params.d] / m, (m, 1))
        arg = np.argmax(a, axis=0)
        d_abs[arg, np.arange(params.d)] += du[params.d:]
        d_resid = np.sign(cache["resid"]) * d_abs
        if y == 0 and n_benign > 0:
            d_resid += (2.0 * cfg.beta / (m * n_benign)) * cache["resid"]

        # residual blocks backprop
        dh = np.zeros_like(cache["hs"][-1])
        dh[:, : params.d] = -d_resid
        for k in range(params.n_blocks - 1, -1, -1):
            t, mask = cache["tanhs"][k], cache["masks"][k]
            d_act = t if mask is None else t * mask
            dd = dh @ params.block_w2[k]
            grads.block_w2[k] += dh.T @ d_act
            grads.block_b2[k] += dh.sum(axis=0)
            dt = dd if mask is None else dd * mask
            dzb = dt * (1.0 - t * t)
            grads.block_w1[k] += dzb.T @ cache["hs"][k]
            grads.block_b1[k] += dzb.sum(axis=0)
            dh = dh + dzb @ params.block_w1[k]

        # flow-net smoothness backprop
        c = 2.0 * cfg.alpha / (n_steps * nb)
        dg = np.zeros_like(g_flow)
        dg[1:] += c * diffs
        dg[:-1] -= c * diffs
        grads.flow_v2 += dg.T @ t_flow
        grads.flow_c2 += dg.sum(axis=0)
        dtf = (dg @ params.flow_v2) * (1.0 - t_flow * t_flow)
        grads.flow_v1 += dtf.T @ trace.states
        grads.flow_c1 += dtf.sum(axis=0)

    bce = bce_total / nb
    prediction = cfg.beta * (pred_total / n_benign if n_benign else 0.0)
    smoothness = cfg.alpha * (smooth_total / nb)
    wd = cfg.weight_decay * sum(float(np.sum(a * a)) for _, a in params.arrays())
    components = {"bce": bce, "prediction": prediction, "smoothness": smoothness,
                  "weight_decay": wd}
    total = bce + prediction + smoothness + wd

    if want_grad:
        for (_, g), (_, p) in zip(grads.arrays(), params.arrays()):
            g += 2.0 * cfg.weight_decay * p
    return total, components, grads


def loss(batch: list[StateTrace], params: ModelParams, cfg: TrainConfig,
         rng: np.random.Generator | None = None):
    """(total, components); components already carry their coefficients and
    sum exactly to the total."""
    total, components, _ = _loss_and_grad(batch, params, cfg, rng, want_grad=False)
    return total, components


def grad(batch: list[StateTrace], params: ModelParams, cfg: TrainConfig,
         rng: np.random.Generator | None = None) -> ModelParams:
    """Gradient of :func:`loss` with the same shape as the parameters.

    With ``rng=None`` (the default) this is the exact gradient of the
    deterministic evaluation-mode loss, which is what the finite-difference
    check verifies; the training loop passes its generator to get dropout.
    """
    _, _, grads = _loss_and_grad(batch, params, cfg, rng, want_grad=True)
    return grads


def _crop(trace: StateTrace, max_window: int, rng: np.random.Generator) -> StateTrace:
    n = trace.n_windows
    if n <= max_window:
        return trace
    start = int(rng.integers(0, n - max_window + 1))
    return StateTrace(trace.id, trace.label, trace.family, trace.window_dt,
                      trace.states[start:start + max_window],
                      trace.actions[start:start + max_window - 1])


def _balanced_accuracy(scores: np.ndarray, labels: np.ndarray, tau: float) -> float:
    pos = labels == 1
    tpr = float(np.mean(scores[pos] > tau))
    tnr = float(np.mean(scores[~pos] <= tau))
    return 0.5 * (tpr + tnr)


def train(train_traces: list[StateTrace], val_traces: list[StateTrace],
          cfg: TrainConfig) -> tuple[ModelParams, list[dict]]:
    """Adam training over seeded shuffled batches with seeded crops.

    Returns the parameters of the epoch with the best validation balanced
    accuracy (at that epoch's own Youden threshold; earliest epoch wins ties)
    plus a per-epoch log.  Raises DivergenceError on non-finite loss.
    """
    if not train_traces or not val_traces:
        raise ValueError("need non-empty train and val splits")
    d = train_traces[0].d
    params = init_params(d, N_ACTIONS, cfg.blocks, cfg.width, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), _DOMAIN_TRAIN]))
    val_labels = np.array([_label_of(t) for t in val_traces])
    if val_labels.min() == val_labels.max():
        raise ValueError("validation split must contain both classes")

    adam_m = params.zeros_like()
    adam_v = params.zeros_like()
    step = 0
    best_bal = -1.0
    best_params = params.copy()
    log: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_traces))
        comp_sums = {"total": 0.0, "bce": 0.0, "prediction": 0.0,
                     "smoothness": 0.0, "weight_decay": 0.0}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [_crop(train_traces[i], cfg.max_window, rng)
                     for i in order[lo:lo + cfg.batch_size]]
            total, comps, grads = _loss_and_grad(batch, params, cfg, rng)
            if not np.isfinite(total):
                raise DivergenceError(f"training diverged at epoch {epoch}")
            step += 1
            bc1 = 1.0 - cfg.adam_beta1**step
            bc2 = 1.0 - cfg.adam_beta2**step
            for (_, p), (_, g), (_, m1), (_, v1) in zip(
                    params.arrays(), grads.arrays(), adam_m.arrays(), adam_v.arrays()):
                m1 *= cfg.adam_beta1
                m1 += (1.0 - cfg.adam_beta1) * g
                v1 *= cfg.adam_beta2
                v1 += (1.0 - cfg.adam_beta2) * g * g
                p -= cfg.learning_rate * (m1 / bc1) / (np.sqrt(v1 / bc2) + cfg.adam_eps)
            comp_sums["total"] += total
            for k, v in comps.items():
                comp_sums[k] += v
            n_batches += 1

        val_scores = np.array([score_trace(t, params) for t in val_traces])
        thr = select_threshold(val_scores, val_labels)
        bal = _balanced_accuracy(val_scores, val_labels, thr.tau)
        entry = {k: v / n_batches for k, v in comp_sums.items()}
        entry.update(epoch=epoch, val_balanced_accuracy=bal)
        log.append(entry)
        if bal > best_bal:
            best_bal = bal
            best_params = params.copy()
    return best_params, log


def select_threshold(scores, labels, provenance: str = "val") -> Threshold:
    """Youden's J over midpoints of adjacent sorted scores; ties take the
    smallest candidate.  Classification is strict (> tau means ransomware)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape or scores.size < 2:
        raise ValueError("need matching 1-d scores/labels with >= 2 entries")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("threshold selection needs both classes")
    order = np.sort(scores)
    candidates = (order[:-1] + order[1:]) / 2.0
    best_tau, best_j = candidates[0], -np.inf
    for tau in candidates:
        tpr = float(np.sum(scores[pos] > tau)) / n_pos
        fpr = float(np.sum(scores[~pos] > tau)) / n_neg
        j = tpr - fpr
        if j > best_j:
            best_j, best_tau = j, float(tau)
    return Threshold(best_tau, provenance)


def classify(trace: StateTrace, params: ModelParams, tau: float) -> str:
    """Ransomware iff score strictly exceeds tau (boundary stays benign)."""
    return LABEL_RANSOMWARE if score_trace(trace, params) > tau else LABEL_BENIGN


def classify_prefix(trace: StateTrace, params: ModelParams, tau: float,
                    stride: int = 8, persistence: int = 3):
    """Scan growing prefixes every ``stride`` windows until ``persistence``
    consecutive prefix scores exceed tau.

    Returns (detection window index, latency seconds) or (None, None).  The
    detection index is the end window of the first qualifying run; latency is
    ``index * window_dt``.  Because the transducer scores transitions
    independently, the prefix scores reuse one residual pass via cumulative
    pooled statistics; this equals scoring each truncated prefix directly.
    """
    if stride < 1 or persistence < 1:
        raise ValueError("stride and persistence must be >= 1")
    _, _, _, cache = _forward_trace(trace.states, trace.actions, params)
    a = cache["a"]
    cummean = np.cumsum(a, axis=0) / np.arange(1, a.shape[0] + 1)[:, None]
    cummax = np.maximum.accumulate(a, axis=0)
    run = 0
    for k in range(stride, trace.n_windows + 1, stride):
        if k < 2:
            continue
        pooled = np.concatenate([cummean[k - 2], cummax[k - 2]])
        z = float(np.clip(pooled @ params.head_w + params.head_b[0],
                          -LOGIT_CLIP, LOGIT_CLIP))
        run = run + 1 if _sigmoid(z) > tau else 0
        if run >= persistence:
            return k, k * trace.window_dt
    return None, None


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, threshold: Threshold,
                    norm_stats_path=None, cfg: TrainConfig | None = None) -> None:
    ref = None
    if norm_stats_path is not None:
        blob = Path(norm_stats_path).read_bytes()
        ref = {"path": Path(norm_stats_path).name,
               "sha256": hashlib.sha256(blob).hexdigest()}
    doc = {
        "format_version": 1,
        "architecture": {"d": params.d, "n_actions": params.n_actions,
                         "blocks": params.n_blocks, "width": params.width},
        "weights": {name: a.tolist() for name, a in params.arrays()},
        "threshold": {"tau": threshold.tau, "provenance": threshold.provenance},
        "norm_stats_ref": ref,
        "train_config": None if cfg is None else {
            k: getattr(cfg, k) for k in TrainConfig.__dataclass_fields__},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, Threshold, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    arch = doc["architecture"]
    params = init_params(arch["d"], arch["n_actions"], arch["blocks"], arch["width"])
    for name, a in params.arrays():
        a[:] = np.asarray(doc["weights"][name], dtype=np.float64)
    thr = Threshold(float(doc["threshold"]["tau"]), doc["threshold"]["provenance"])
    return params, thr, doc


# --- sklearn-style wrapper ---------------------------------------------------

class TransductionClassifier(BaseEstimator):
    """Residual transition-prediction classifier over state traces.

    Parameters mirror :class:`TrainConfig` plus the prefix-scan settings.
    ``fit`` expects the traces to be preprocessed (normalized) and requires a
    validation set for epoch selection and threshold calibration.

    Attributes
    ----------
    params_ : ModelParams
    threshold_ : Threshold
    history_ : list of per-epoch log dicts
    """

    def __init__(self, blocks: int = 3, width: int = 32, alpha: float = 0.01,
                 beta: float = 1.0, learning_rate: float = 1e-3,
                 adam_beta1: float = 0.9, adam_beta2: float = 0.999,
                 adam_eps: float = 1e-8, weight_decay: float = 1e-4,
                 dropout: float = 0.1, epochs: int = 30, batch_size: int = 16,
                 max_window: int = 256, seed: int = 0, stride: int = 8,
                 persistence: int = 3):
        self.blocks = blocks
        self.width = width
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_window = max_window
        self.seed = seed
        self.stride = stride
        self.persistence = persistence

    def _config(self) -> TrainConfig:
        return TrainConfig(blocks=self.blocks, width=self.width, alpha=self.alpha,
                           beta=self.beta, learning_rate=self.learning_rate,
                           adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
                           adam_eps=self.adam_eps, weight_decay=self.weight_decay,
                           dropout=self.dropout, epochs=self.epochs,
                           batch_size=self.batch_size, max_window=self.max_window,
                           seed=self.seed)

    def fit(self, X, y=None, val=None):
        if val is None:
            raise ValueError("fit requires val=<list of validation traces>")
        self.params_, self.history_ = train(list(X), list(val), self._config())
        scores = np.array([score_trace(t, self.params_) for t in val])
        labels = np.array([_label_of(t) for t in val])
        self.threshold_ = select_threshold(scores, labels)
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.array([score_trace(t, self.params_) for t in X])

    def predict(self, X) -> np.ndarray:
        tau = self.threshold_.tau
        return np.array([LABEL_RANSOMWARE if s > tau else LABEL_BENIGN
                         for s in self.decision_function(X)])

    def detect_latency(self, trace: StateTrace):
        return classify_prefix(trace, self.params_, self.threshold_.tau,
                               self.stride, self.persistence)
