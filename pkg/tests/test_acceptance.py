"""Acceptance battery.

One test per criterion (criterion 6 is split into its lettered trend checks,
which share a session-scoped benchmark run).  Every check routes through
_check so the log carries one PASS/FAIL line per criterion with the measured
numbers next to the verdict.

The benchmark criteria are ordering/gap checks on a seeded synthetic corpus,
not absolute-value reproductions; the underlying real-world corpus is not
available at desk scale.
"""

import json
import math
import time

import numpy as np
import pytest

from ransomtrace.cli import EXIT_OK, main
from ransomtrace.dynamics import (DampedConfig, Kernel, damped_energy,
                                  evolve_damped, evolve_first_order,
                                  kernel_flow)
from ransomtrace.generator import default_composition, gen_dataset, profiles_by_name
from ransomtrace.model import (TrainConfig, grad, init_params, load_checkpoint,
                               loss, select_threshold)
from ransomtrace.evaluation import latency_rows
from ransomtrace.preprocess import (SplitSpec, _apportion, denoise, fit_stats,
                                    load_stats, normalize, prep_eval_traces,
                                    stratified_split)
from ransomtrace.statespace import (LABEL_BENIGN, LABEL_RANSOMWARE, N_ACTIONS,
                                    make_trace)

BENCH_SCALE = "0.1"


def _check(tag: str, ok: bool, detail: str) -> None:
    print(f"[acceptance] {tag}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{tag}: {detail}"


# --- criterion 1: gradient oracle -------------------------------------------

def _random_trace(n, label, rng):
    family = LABEL_BENIGN if label == LABEL_BENIGN else "fam"
    return make_trace("t", label, family, 0.025,
                      0.3 * rng.standard_normal((n, 8)),
                      rng.integers(0, N_ACTIONS, n - 1))


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    cfg = TrainConfig(blocks=3, width=16, dropout=0.0, epochs=1)
    coord_rng = np.random.default_rng(1)
    worst = 0.0
    checked = 0
    for point in range(5):
        rng = np.random.default_rng(200 + point)
        batch = [_random_trace(16, LABEL_BENIGN, rng) for _ in range(2)]
        batch += [_random_trace(16, LABEL_RANSOMWARE, rng) for _ in range(2)]
        params = init_params(8, N_ACTIONS, cfg.blocks, cfg.width, seed=point)
        for _, arr in params.arrays():
            arr += 0.1 * rng.standard_normal(arr.shape)

        analytic = np.concatenate([a.ravel() for _, a in grad(batch, params,
                                                              cfg).arrays()])
        arrays = list(params.arrays())
        offsets = np.cumsum([0] + [a.size for _, a in arrays])
        for flat in coord_rng.choice(offsets[-1], size=24, replace=False):
            slot = int(np.searchsorted(offsets, flat, side="right")) - 1
            arr = arrays[slot][1]
            local = np.unravel_index(int(flat) - int(offsets[slot]), arr.shape)
            old = arr[local]
            arr[local] = old + 1e-5
            up, _ = loss(batch, params, cfg)
            arr[local] = old - 1e-5
            down, _ = loss(batch, params, cfg)
            arr[local] = old
            fd = (up - down) / 2e-5
            a = analytic[flat]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
            checked += 1
    elapsed = time.perf_counter() - t0
    _check("criterion 1", worst < 1e-4 and checked >= 100 and elapsed < 30.0,
           f"max rel err {worst:.2e} over {checked} coords in {elapsed:.1f}s")


# --- criterion 2: dynamics oracles -------------------------------------------

def test_criterion_2_dynamics_oracles():
    t0 = time.perf_counter()
    lam = 0.5
    wd = math.sqrt(1.0 - lam**2 / 4.0)
    states, _ = evolve_damped(np.array([1.0]), np.array([0.0]), lambda s: s,
                              DampedConfig(lam), dt=1e-3, steps=10_000)
    closed = math.exp(-lam * 5.0) * (math.cos(wd * 10.0)
                                     + (lam / 2.0) / wd * math.sin(wd * 10.0))
    err_a = abs(states[-1, 0] - closed)

    s0, v0 = evolve_damped(np.array([1.0]), np.array([0.0]), lambda s: s,
                           DampedConfig(0.0), dt=1e-3, steps=10_000)
    e = damped_energy(s0, v0, lambda s: s)
    drift = float(np.max(np.abs(e - e[0])))

    errs = []
    for dt in (0.1, 0.05):
        out = evolve_first_order(np.array([1.0]), None, lambda s, a: -s,
                                 dt, int(round(1.0 / dt)))
        errs.append(abs(out[-1, 0] - math.exp(-1.0)))
    order = math.log2(errs[0] / errs[1])
    elapsed = time.perf_counter() - t0
    _check("criterion 2",
           err_a < 1e-3 and drift < 1e-3 and order >= 3.8 and elapsed < 10.0,
           f"oscillator err {err_a:.2e}, energy drift {drift:.2e}, "
           f"RK4 order {order:.2f}, {elapsed:.1f}s")


# --- criterion 3: kernel-flow identities --------------------------------------

def test_criterion_3_kernel_flow_identities():
    ident = kernel_flow(np.arange(16, dtype=np.float64), Kernel.identity())
    exact = bool(np.array_equal(ident, np.ones(16)))

    rng = np.random.default_rng(3)
    kern = Kernel.default()
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(3, 24))
        x, y = rng.standard_normal(d), rng.standard_normal(d)
        a, b = rng.standard_normal(2)
        gap = np.max(np.abs(kernel_flow(a * x + b * y, kern)
                            - a * kernel_flow(x, kern) - b * kernel_flow(y, kern)))
        worst = max(worst, float(gap))
    _check("criterion 3", exact and worst <= 1e-12,
           f"ramp exact {exact}, linearity worst {worst:.2e} over 1000 cases")


# --- criterion 4: preprocessing properties ------------------------------------

def test_criterion_4_preprocessing_properties():
    # normalization endpoint / degenerate / clipping rules, exact
    train = make_trace("a", LABEL_BENIGN, LABEL_BENIGN, 0.025,
                       np.array([[2.0, 5.0], [6.0, 5.0]]), np.zeros(1, int))
    stats = fit_stats([train])
    probe = make_trace("p", LABEL_BENIGN, LABEL_BENIGN, 0.025,
                       np.array([[2.0, 5.0], [6.0, 5.0], [7.0, 5.0], [1.0, 5.0]]),
                       np.zeros(3, int))
    out = normalize(probe, stats).states
    norm_ok = (out[0, 0] == -1.0 and out[1, 0] == 1.0 and out[2, 0] == 1.0
               and out[3, 0] == -1.0 and bool(np.all(out[:, 1] == 0.0)))

    # split partition plus per-family proportionality over fuzzed compositions
    rng = np.random.default_rng(4)
    split_ok, tried = True, 0
    for _ in range(120):
        families = {f"fam{k}": int(rng.integers(3, 60))
                    for k in range(int(rng.integers(1, 6)))}
        traces = []
        for fam, count in families.items():
            for i in range(count):
                traces.append(make_trace(f"{fam}-{i:05d}", LABEL_RANSOMWARE,
                                         fam, 0.025, np.zeros((2, 1)),
                                         np.zeros(1, int)))
        raw = rng.random(3) + 0.05
        ratios = tuple(raw / raw.sum())
        parts = _apportion(sum(families.values()), ratios)
        split_ok &= sum(parts) == sum(families.values())
        splits = stratified_split(traces, SplitSpec(ratios=ratios))
        got = [t.id for t in splits.train + splits.val + splits.test]
        split_ok &= sorted(got) == sorted(t.id for t in traces)
        for fam, count in families.items():
            for part, r in zip((splits.train, splits.val, splits.test), ratios):
                k = sum(t.family == fam for t in part)
                split_ok &= abs(k - count * r) <= 1.0
        tried += 1

    # denoise: window=1 identity and envelope non-widening
    noisy = make_trace("n", LABEL_BENIGN, LABEL_BENIGN, 0.025,
                       np.random.default_rng(5).standard_normal((40, 3)),
                       np.zeros(39, int))
    den_ok = denoise(noisy, window=1) is noisy
    for w in (3, 5, 9):
        sm = denoise(noisy, window=w)
        den_ok &= bool(np.all(sm.states.min(0) >= noisy.states.min(0) - 1e-12))
        den_ok &= bool(np.all(sm.states.max(0) <= noisy.states.max(0) + 1e-12))

    _check("criterion 4", norm_ok and split_ok and den_ok,
           f"normalize exact {norm_ok}, splits ok over {tried} compositions "
           f"{split_ok}, denoise {den_ok}")


# --- criterion 5: threshold oracle --------------------------------------------

def test_criterion_5_threshold_oracle():
    rng = np.random.default_rng(5)
    agree = 0
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        scores = rng.integers(0, 10, n) / 10.0
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]

        order = np.sort(scores)
        best = None
        for tau in (order[:-1] + order[1:]) / 2.0:
            tpr = float(np.mean(scores[labels == 1] > tau))
            fpr = float(np.mean(scores[labels == 0] > tau))
            j = tpr - fpr
            if best is None or j > best[0] or (j == best[0] and tau < best[1]):
                best = (j, float(tau))
        agree += select_threshold(scores, labels).tau == best[1]
    _check("criterion 5", agree == 1000, f"{agree}/1000 fuzz cases agree")


# --- criterion 6: seeded synthetic benchmark ----------------------------------

@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    assert main(["gen", "--out", str(out), "--scale", BENCH_SCALE]) == EXIT_OK
    assert main(["prep", "--out", str(out)]) == EXIT_OK
    assert main(["train", "--out", str(out)]) == EXIT_OK
    assert main(["eval", "--out", str(out)]) == EXIT_OK
    elapsed = time.perf_counter() - t0
    report = json.loads((out / "report" / "report.json").read_text())
    return {"out": out, "report": report, "elapsed": elapsed}


def test_criterion_6_runtime(benchmark):
    _check("criterion 6 runtime", benchmark["elapsed"] < 300.0,
           f"gen+prep+train+eval took {benchmark['elapsed']:.0f}s, budget 300s")


def test_criterion_6a_accuracy_gap(benchmark):
    m = benchmark["report"]["metrics"]
    gap = m["transducer"]["accuracy"] - m["baseline"]["accuracy"]
    _check("criterion 6a", gap >= 0.05,
           f"transducer {m['transducer']['accuracy']:.4f} vs baseline "
           f"{m['baseline']['accuracy']:.4f}, gap {100 * gap:.1f} pts (need >= 5)")


def test_criterion_6b_evasion_gap_ordering(benchmark):
    ev = benchmark["report"]["evasion"]
    _check("criterion 6b", ev["evasive_gap"] > ev["non_evasive_gap"],
           f"detection-rate gap on evasive families {ev['evasive_gap']:.3f} vs "
           f"non-evasive {ev['non_evasive_gap']:.3f}")


def test_criterion_6c_speed_sweep_trend(benchmark):
    acc = {}
    for row in benchmark["report"]["sweep"]:
        acc.setdefault(row["model"], {})[row["speed_mbps"]] = row["accuracy"]
    speeds = sorted(acc["baseline"])
    base_drop = acc["baseline"][speeds[0]] - acc["baseline"][speeds[-1]]
    trans = acc["transducer"]
    trans_range = max(trans.values()) - min(trans.values())
    _check("criterion 6c", base_drop >= 0.05 and trans_range < 0.05,
           f"baseline drop {100 * base_drop:.1f} pts over "
           f"{speeds[0]:g}->{speeds[-1]:g} MB/s (need >= 5); "
           f"transducer range {100 * trans_range:.1f} pts (need < 5)")


def test_criterion_6d_unseen_families(benchmark):
    unseen = benchmark["report"]["unseen"]
    seen = unseen["seen_accuracy"]
    worst = min(unseen["per_family_accuracy"].items(), key=lambda kv: kv[1])
    _check("criterion 6d", worst[1] >= seen - 0.10,
           f"worst unseen family {worst[0]} accuracy {worst[1]:.4f} vs seen "
           f"{seen:.4f} (allowed within 10 pts)")


# --- criterion 7: determinism --------------------------------------------------

def test_criterion_7_two_runs_are_byte_identical(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({
        "generator": {"scale": 0.02},
        "train": {"epochs": 2},
        "eval": {"sweep_per_family": 2},
    }))
    dirs = (tmp_path / "run_a", tmp_path / "run_b")
    for out in dirs:
        for cmd in ("gen", "prep", "train", "eval", "report"):
            assert main([cmd, "--config", str(cfg_path),
                         "--out", str(out)]) == EXIT_OK

    compared = []
    # timing.json is wall clock by design and stays out of the comparison
    for rel in ("data/traces.jsonl", "data/manifest.json", "data/train.jsonl",
                "data/val.jsonl", "data/test.jsonl", "data/norm_stats.json",
                "model.json", "training_log.csv", "report/report.json",
                "report/metrics.csv", "report/latency.csv", "report/sweep.csv",
                "report/families.csv", "report/fig2_detection_rates.csv",
                "report/fig3_latency.csv", "report/fig4_speed_accuracy.csv"):
        same = (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes()
        compared.append((rel, same))
    bad = [rel for rel, same in compared if not same]
    _check("criterion 7", not bad,
           f"{len(compared)} artifacts byte-compared, differing: {bad or 'none'}")


# --- criterion 8: latency ordering under onset shift ---------------------------

def test_criterion_8_onset_shift_never_decreases_latency(benchmark):
    out = benchmark["out"]
    params, thr, _ = load_checkpoint(out / "model.json")
    stats = load_stats(out / "data" / "norm_stats.json")
    base = {r["family"]: r["median_s"] for r in benchmark["report"]["latency"]}

    spec = default_composition(scale=float(BENCH_SCALE), seed=0)
    shifted = gen_dataset(spec, onset_shift=64)
    splits = stratified_split(shifted, SplitSpec())
    test = prep_eval_traces(splits.test, stats,
                            profiles=profiles_by_name(spec.profiles))
    rows = latency_rows(test, params, thr.tau)
    moved = {r["family"]: r["median_s"] for r in rows}

    ok = True
    pairs = []
    for fam in sorted(base):
        b, s = base.get(fam), moved.get(fam)
        ok &= b is not None and s is not None and s >= b
        pairs.append(f"{fam} {b}->{s}")
    _check("criterion 8", ok, "per-family median latency (s): " + "; ".join(pairs))
