"""Encrypted behavioral state traces and their on-disk form.

A trace is a sequence of per-window behavioral state vectors plus the action
code observed between consecutive windows.  States are rows of a float64
``(n, d)`` array; the eight default channels are unitless normalized readings
sampled at a fixed window interval.

On disk a dataset is a JSONL trace file (one trace per line, UTF-8) plus a
small JSON manifest.  Floats round-trip bit-exactly: ``json`` serializes
float64 via ``repr``, which is the shortest exact representation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ACTIONS",
    "CHANNELS",
    "Dataset",
    "LABEL_BENIGN",
    "LABEL_RANSOMWARE",
    "N_ACTIONS",
    "N_CHANNELS",
    "StateTrace",
    "build_manifest",
    "ids_digest",
    "load_dataset",
    "load_manifest",
    "load_traces",
    "make_trace",
    "save_dataset",
    "save_manifest",
    "save_traces",
    "trace_stats",
    "validate_dataset",
    "validate_trace",
]

CHANNELS = (
    "byte_entropy",       # entropy of written byte blocks
    "uniformity",         # uniformity score of written bytes
    "write_burst",        # write-burst rate
    "rw_ratio",           # read/write operation ratio
    "file_touch",         # unique-file-touch rate
    "crypto_calls",       # crypto API call intensity
    "mem_entropy_delta",  # memory-region entropy change
    "net_egress",         # outbound network rate
)
N_CHANNELS = len(CHANNELS)

ACTIONS = ("idle", "file_io", "crypto", "net", "mem")
N_ACTIONS = len(ACTIONS)

LABEL_BENIGN = "benign"
LABEL_RANSOMWARE = "ransomware"

# Fixed field order of one JSONL trace record.
_TRACE_FIELDS = ("id", "label", "family", "window_dt", "states", "actions")


@dataclass(frozen=True)
class StateTrace:
    """One labeled behavioral trace.

    ``states`` has shape ``(n, d)`` with ``n >= 2``; ``actions`` has shape
    ``(n - 1,)`` and holds the action code observed between window ``t`` and
    ``t + 1``.  ``family`` is ``"benign"`` exactly when ``label`` is benign.
    Construct through :func:`make_trace` to get coercion plus eager
    validation; the raw constructor trusts its caller.
    """

    id: str
    label: str
    family: str
    window_dt: float
    states: np.ndarray
    actions: np.ndarray

    @property
    def n_windows(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]


def make_trace(id, label, family, window_dt, states, actions) -> StateTrace:
    """Build a validated StateTrace, coercing array dtypes.

    Raises ValueError listing every violated invariant.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    trace = StateTrace(str(id), str(label), str(family), float(window_dt), states, actions)
    problems = validate_trace(trace)
    if problems:
        raise ValueError(f"invalid trace {id!r}: " + "; ".join(problems))
    return trace


def validate_trace(trace: StateTrace, n_actions: int | None = N_ACTIONS) -> list[str]:
    """Return a list of invariant violations; empty means valid.

    Never raises: this is the checking half used by loaders and tests.
    Pass ``n_actions=None`` to skip the action-alphabet bound.
    """
    out: list[str] = []
    s, a = trace.states, trace.actions
    if s.ndim != 2:
        out.append(f"states must be 2-d, got ndim={s.ndim}")
        return out
    n, d = s.shape
    if n < 2:
        out.append(f"need at least 2 windows, got {n}")
    if d < 1:
        out.append("state dimension must be >= 1")
    if a.ndim != 1 or a.shape[0] != n - 1:
        out.append(f"actions must have shape ({n - 1},), got {a.shape}")
    if not np.isfinite(trace.window_dt) or trace.window_dt <= 0:
        out.append(f"window_dt must be > 0, got {trace.window_dt}")
    bad = np.argwhere(~np.isfinite(s))
    for t, j in bad[:8]:
        out.append(f"non-finite state at window {t}, channel {j}")
    if len(bad) > 8:
        out.append(f"... {len(bad) - 8} more non-finite states")
    if n_actions is not None and a.size:
        lo, hi = int(a.min()), int(a.max())
        if lo < 0 or hi >= n_actions:
            out.append(f"action codes must lie in [0, {n_actions}), got range [{lo}, {hi}]")
    if trace.label not in (LABEL_BENIGN, LABEL_RANSOMWARE):
        out.append(f"unknown label {trace.label!r}")
    if (trace.family == LABEL_BENIGN) != (trace.label == LABEL_BENIGN):
        out.append(f"family {trace.family!r} inconsistent with label {trace.label!r}")
    return out


def trace_stats(trace: StateTrace) -> dict[str, np.ndarray]:
    """Per-channel min/max/mean/var (population variance, ddof=0)."""
    s = trace.states
    return {
        "min": s.min(axis=0),
        "max": s.max(axis=0),
        "mean": s.mean(axis=0),
        "var": s.var(axis=0),
    }


@dataclass
class Dataset:
    """A list of traces plus the manifest describing their composition."""

    traces: list[StateTrace]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.traces)


def build_manifest(traces: list[StateTrace], seed: int, d: int = N_CHANNELS,
                   n_actions: int = N_ACTIONS) -> dict:
    families: dict[str, int] = {}
    for t in traces:
        families[t.family] = families.get(t.family, 0) + 1
    return {
        "d": int(d),
        "action_alphabet_size": int(n_actions),
        "families": dict(sorted(families.items())),
        "seed": int(seed),
    }


def validate_dataset(ds: Dataset) -> list[str]:
    """Dataset-level violations: per-trace checks, a shared d, manifest counts."""
    out: list[str] = []
    n_actions = ds.manifest.get("action_alphabet_size", N_ACTIONS)
    dims = set()
    seen: dict[str, int] = {}
    ids = set()
    for t in ds.traces:
        out.extend(f"{t.id}: {v}" for v in validate_trace(t, n_actions))
        dims.add(t.states.shape[-1] if t.states.ndim == 2 else None)
        seen[t.family] = seen.get(t.family, 0) + 1
        if t.id in ids:
            out.append(f"duplicate trace id {t.id!r}")
        ids.add(t.id)
    if len(dims) > 1:
        out.append(f"inconsistent state dimensions: {sorted(map(str, dims))}")
    if ds.manifest:
        want = ds.manifest.get("families", {})
        if want != seen:
            out.append(f"manifest families {want} != actual {seen}")
        if dims and ds.manifest.get("d") not in dims:
            out.append(f"manifest d={ds.manifest.get('d')} != actual {sorted(map(str, dims))}")
    return out


def ids_digest(ids) -> str:
    """Order-independent sha256 digest of a collection of trace ids."""
    h = hashlib.sha256()
    for i in sorted(ids):
        h.update(i.encode())
        h.update(b"\n")
    return h.hexdigest()


# --- serialization ---------------------------------------------------------

def _trace_record(trace: StateTrace) -> dict:
    return {
        "id": trace.id,
        "label": trace.label,
        "family": trace.family,
        "window_dt": trace.window_dt,
        "states": trace.states.tolist(),
        "actions": trace.actions.tolist(),
    }


def trace_to_line(trace: StateTrace) -> str:
    return json.dumps(_trace_record(trace), separators=(",", ":"))


def trace_from_line(line: str) -> StateTrace:
    rec = json.loads(line)
    missing = [k for k in _TRACE_FIELDS if k not in rec]
    if missing:
        raise ValueError(f"trace record missing fields: {missing}")
    return make_trace(rec["id"], rec["label"], rec["family"], rec["window_dt"],
                      rec["states"], rec["actions"])


def save_traces(path, traces: list[StateTrace]) -> None:
    text = "".join(trace_to_line(t) + "\n" for t in traces)
    Path(path).write_text(text, encoding="utf-8")


def load_traces(path) -> list[StateTrace]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trace_from_line(line))
    return out


def save_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_dataset(directory, ds: Dataset, name: str = "traces") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_traces(directory / f"{name}.jsonl", ds.traces)
    save_manifest(directory / "manifest.json", ds.manifest)


def load_dataset(directory, name: str = "traces") -> Dataset:
    directory = Path(directory)
    return Dataset(traces=load_traces(directory / f"{name}.jsonl"),
                   manifest=load_manifest(directory / "manifest.json"))
