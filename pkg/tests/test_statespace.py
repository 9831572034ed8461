"""Trace container, validation, manifest and serialization round-trips."""

import hashlib
import json

import numpy as np
import pytest

from ransomtrace.statespace import (ACTIONS, LABEL_BENIGN, LABEL_RANSOMWARE,
                                    N_ACTIONS, N_CHANNELS, Dataset,
                                    build_manifest, ids_digest, load_dataset,
                                    load_traces, make_trace, save_dataset,
                                    save_traces, trace_from_line,
                                    trace_stats, trace_to_line, validate_trace,
                                    validate_dataset)


def _trace(n=6, d=4, id="t0", label=LABEL_BENIGN, family=LABEL_BENIGN, rng=None):
    rng = rng or np.random.default_rng(0)
    states = rng.standard_normal((n, d))
    actions = rng.integers(0, N_ACTIONS, n - 1)
    return make_trace(id, label, family, 0.025, states, actions)


def test_make_trace_valid():
    t = _trace()
    assert t.states.dtype == np.float64
    assert t.actions.dtype == np.int64
    assert validate_trace(t) == []


def test_make_trace_collects_all_problems():
    states = np.array([[0.0, np.nan], [1.0, 2.0]])
    with pytest.raises(ValueError) as err:
        make_trace("bad", "weird", "benign", -1.0, states, np.array([0, 1]))
    msg = str(err.value)
    assert "window_dt" in msg
    assert "non-finite" in msg
    assert "actions must have shape" in msg
    assert "label" in msg


def test_validate_trace_cases():
    good = _trace()
    # one violated invariant at a time
    wrong_actions = good.__class__(good.id, good.label, good.family, good.window_dt,
                                   good.states, good.actions[:-1])
    assert any("actions" in p for p in validate_trace(wrong_actions))

    code_out_of_range = good.__class__(good.id, good.label, good.family,
                                       good.window_dt, good.states,
                                       np.full(good.actions.shape, N_ACTIONS))
    assert any("action codes" in p for p in validate_trace(code_out_of_range))
    assert validate_trace(code_out_of_range, n_actions=None) == []

    too_short = good.__class__(good.id, good.label, good.family, good.window_dt,
                               good.states[:1], good.actions[:0])
    assert any("at least 2 windows" in p for p in validate_trace(too_short))

    mismatch = good.__class__(good.id, LABEL_RANSOMWARE, LABEL_BENIGN,
                              good.window_dt, good.states, good.actions)
    assert any("inconsistent" in p for p in validate_trace(mismatch))


def test_trace_stats_population_variance():
    t = _trace(n=50)
    s = trace_stats(t)
    assert np.allclose(s["var"], t.states.var(axis=0, ddof=0))
    assert np.array_equal(s["min"], t.states.min(axis=0))


def test_serialization_round_trip_is_bit_exact():
    rng = np.random.default_rng(7)
    for i in range(50):
        n = int(rng.integers(2, 30))
        d = int(rng.integers(1, 10))
        # awkward floats: sums that do not round, tiny magnitudes, negatives
        states = rng.standard_normal((n, d)) * 10.0 ** rng.integers(-12, 3)
        states[0, 0] = 0.1 + 0.2
        t = make_trace(f"t{i}", LABEL_RANSOMWARE, "fam", 0.025, states,
                       rng.integers(0, N_ACTIONS, n - 1))
        back = trace_from_line(trace_to_line(t))
        assert back.id == t.id and back.family == t.family
        assert back.window_dt == t.window_dt
        assert np.array_equal(back.states, t.states)
        assert np.array_equal(back.actions, t.actions)


def test_trace_from_line_missing_field():
    rec = json.loads(trace_to_line(_trace()))
    del rec["actions"]
    with pytest.raises(ValueError, match="missing fields"):
        trace_from_line(json.dumps(rec))


def test_save_load_traces(tmp_path):
    traces = [_trace(id=f"t{i}", rng=np.random.default_rng(i)) for i in range(5)]
    p = tmp_path / "traces.jsonl"
    save_traces(p, traces)
    back = load_traces(p)
    assert [t.id for t in back] == [t.id for t in traces]
    assert all(np.array_equal(a.states, b.states) for a, b in zip(back, traces))


def test_manifest_counts_by_family():
    traces = [_trace(id="b0"), _trace(id="b1"),
              _trace(id="r0", label=LABEL_RANSOMWARE, family="fam")]
    m = build_manifest(traces, seed=3)
    assert m["families"] == {"benign": 2, "fam": 1}
    assert m["d"] == N_CHANNELS and m["seed"] == 3
    assert m["action_alphabet_size"] == len(ACTIONS)


def test_validate_dataset_catches_duplicates_and_manifest_drift():
    t = _trace(id="dup")
    ds = Dataset([t, t], build_manifest([t, t], seed=0))
    assert any("duplicate trace id" in p for p in validate_dataset(ds))

    other = _trace(id="x")
    drifted = Dataset([other], {"families": {"nope": 1}, "d": other.d,
                                "action_alphabet_size": N_ACTIONS, "seed": 0})
    assert any("manifest families" in p for p in validate_dataset(drifted))


def test_dataset_round_trip(tmp_path):
    traces = [_trace(id=f"t{i}", rng=np.random.default_rng(i)) for i in range(4)]
    ds = Dataset(traces, build_manifest(traces, seed=1))
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    assert back.manifest == ds.manifest
    assert all(np.array_equal(a.states, b.states)
               for a, b in zip(back.traces, ds.traces))


def test_ids_digest_order_independent():
    ids = [f"trace-{i}" for i in range(20)]
    shuffled = list(reversed(ids))
    assert ids_digest(ids) == ids_digest(shuffled)
    assert ids_digest(ids) != ids_digest(ids[:-1] + ["trace-xx"])

    # independent oracle: sorted ids joined by newlines, sha256
    h = hashlib.sha256()
    for i in sorted(ids):
        h.update(i.encode())
        h.update(b"\n")
    assert ids_digest(ids) == h.hexdigest()
