"""Synthetic trace generator: statistics, seeding, burst physics, evasion.

The benign background is AR(1) per channel, so its stationary mean, variance
and lag-1 autocorrelation have closed forms to test against.  Episode overlays
only touch the first two channels, which leaves the rest clean for those
checks.
"""

import numpy as np
import pytest

from ransomtrace.generator import (ATTACK_ACTION_P, BENIGN_MEAN,
                                   BENIGN_STATIONARY_SD, DECAY_RATE,
                                   DEFAULT_CORPUS_MB, ENTROPY_CLAMP_MARGIN,
                                   EPISODE_LEVEL_RANGE, EPISODE_P,
                                   HELD_OUT_NET_EGRESS_MIN, PHI, RAMP_RATE,
                                   TRAINING_NET_EGRESS_MAX, TRAINING_PROFILES,
                                   UNSEEN_PROFILES, WINDOW_DT, CompositionSpec,
                                   FamilyProfile, _benign_states,
                                   _burst_envelope, _episode_overlay,
                                   _substreams, _trace_seed, active_span,
                                   default_composition, gen_benign,
                                   gen_dataset, gen_ransomware, gen_speed_set,
                                   gen_unseen_families, profiles_by_name,
                                   scaled_count)
from ransomtrace.statespace import (LABEL_BENIGN, LABEL_RANSOMWARE,
                                    trace_to_line, validate_dataset)

PROFILES = profiles_by_name()


# --- benign background ------------------------------------------------------

def test_benign_background_matches_ar1_closed_form():
    traces = gen_benign(150, (1792, 2176), WINDOW_DT, seed=123)
    ch = 3  # rw_ratio; episodes never touch channels >= 2
    pooled = np.concatenate([t.states[:, ch] for t in traces])
    n = pooled.size

    mean, sd = BENIGN_MEAN[ch], BENIGN_STATIONARY_SD[ch]
    # variance of the pooled mean under AR(1): (sd^2/n) (1+phi)/(1-phi)
    se = sd * np.sqrt((1.0 + PHI) / (1.0 - PHI) / n)
    assert abs(pooled.mean() - mean) < 5.0 * se
    assert abs(pooled.std() - sd) / sd < 0.02

    # lag-1 autocorrelation within traces
    num, den = 0.0, 0.0
    for t in traces:
        x = t.states[:, ch] - mean
        num += float(x[:-1] @ x[1:])
        den += float(x @ x)
    assert abs(num / den - PHI) < 0.01


def test_benign_states_first_window_is_stationary_draw():
    draws = np.array([_benign_states(2, np.random.default_rng(s))[0]
                      for s in range(400)])
    sd = draws.std(axis=0)
    assert np.all(np.abs(sd - BENIGN_STATIONARY_SD) / BENIGN_STATIONARY_SD < 0.2)


def test_benign_length_grid_and_ids():
    traces = gen_benign(12, (1792, 2176), WINDOW_DT, seed=0)
    assert [t.id for t in traces] == [f"benign-{i:05d}" for i in range(12)]
    for t in traces:
        assert 1792 <= t.n_windows <= 2176
        assert (t.n_windows - 1792) % 32 == 0
        assert t.label == LABEL_BENIGN


# --- episode overlay --------------------------------------------------------

def test_episode_overlay_bounds_and_margins():
    hits = 0
    for s in range(400):
        rng = np.random.default_rng(s)
        ov = _episode_overlay(512, rng)
        assert np.all(ov >= 0.0)
        assert np.all(ov <= 3.0 * EPISODE_LEVEL_RANGE[1] + 1e-12)
        assert np.all(ov[:17] == 0.0)
        assert np.all(ov[-16:] == 0.0)
        hits += ov.any()
    # binomial(400, 0.30): 3 sigma is about 0.07
    assert abs(hits / 400 - EPISODE_P) < 0.075


def test_episode_overlay_touches_only_first_two_channels():
    # compare benign traces against the raw AR(1) core rebuilt from the
    # same substreams: any difference must sit in channels 0 and 1
    traces = gen_benign(8, (1792, 2176), WINDOW_DT, seed=99)
    for i, t in enumerate(traces):
        rngs = _substreams(_trace_seed(99, 1, LABEL_BENIGN, i))
        _ = rngs[2].integers(0, 13)  # length draw happens first
        core = _benign_states(t.n_windows, rngs[0])
        assert np.array_equal(t.states[:, 2:], core[:, 2:])
        diff = t.states[:, :2] - core[:, :2]
        assert np.all(diff >= -1e-12)


# --- burst envelope ---------------------------------------------------------

def test_burst_envelope_shape():
    onset, speed = 100, 10.0
    env = _burst_envelope(600, onset, speed, DEFAULT_CORPUS_MB, WINDOW_DT)
    assert np.all(env[:onset] == 0.0)
    assert np.all((env >= 0.0) & (env <= 1.0))

    # fixed-time spin-up: one window climbs dt * RAMP_RATE
    ramp = WINDOW_DT * RAMP_RATE
    assert env[onset + 1] - env[onset] == pytest.approx(ramp)
    full = int(np.ceil(1.0 / ramp))
    assert env[onset + full] == 1.0

    # hold length scales with 1/speed
    hold = DEFAULT_CORPUS_MB / speed / WINDOW_DT
    done = onset + hold
    assert env[int(done) - 1] == 1.0

    # decay hits zero within 1/(dt*DECAY_RATE) windows after done
    fall = int(np.ceil(1.0 / (WINDOW_DT * DECAY_RATE)))
    assert np.all(env[int(np.ceil(done)) + fall + 1:] == 0.0)


def test_burst_spinup_is_speed_independent_but_hold_is_not():
    onset = 50
    slow = _burst_envelope(4000, onset, 1.0, DEFAULT_CORPUS_MB, WINDOW_DT)
    fast = _burst_envelope(4000, onset, 50.0, DEFAULT_CORPUS_MB, WINDOW_DT)
    assert np.array_equal(slow[onset:onset + 4], fast[onset:onset + 4])
    assert np.sum(slow == 1.0) > 20 * np.sum(fast == 1.0)


def test_active_span_widens_for_slower_profiles():
    lockbit = PROFILES["lockbit3"]
    babuk = PROFILES["babuk"]
    lo, hi = active_span(lockbit, 2048)
    assert lo == lockbit.onset_window
    assert hi > lockbit.onset_window + lockbit.onset_jitter
    span_fast = hi - lo
    lo_b, hi_b = active_span(babuk, 1856)
    assert hi_b - lo_b - babuk.onset_jitter > span_fast  # 8 MB/s vs 30 MB/s
    assert hi_b <= 1856


# --- ransomware traces ------------------------------------------------------

def test_ransomware_pre_onset_equals_benign_core():
    for name in ("lockbit3", "conti"):
        profile = PROFILES[name]
        trace = gen_ransomware(profile, 1, 1024, WINDOW_DT, seed=7)[0]
        rngs = _substreams(_trace_seed(7, 1, name, 0))
        core = _benign_states(1024, rngs[0])
        cut = profile.onset_window  # earliest possible onset
        assert np.array_equal(trace.states[:cut], core[:cut])
        assert trace.label == LABEL_RANSOMWARE and trace.family == name


def test_ransomware_burst_elevates_crypto_channel():
    profile = PROFILES["lockbit3"]
    traces = gen_ransomware(profile, 6, 1024, WINDOW_DT, seed=3)
    for t in traces:
        lo, hi = active_span(profile, 1024)
        pre = t.states[:lo, 5].mean()
        post = t.states[lo:hi, 5].max()
        assert post > pre + 0.3


def test_entropy_obfuscated_family_is_clamped():
    profile = PROFILES["blackcat"]
    assert profile.evasion == "entropy_obfuscated"
    bound = BENIGN_MEAN[0] + ENTROPY_CLAMP_MARGIN
    for t in gen_ransomware(profile, 20, 1024, WINDOW_DT, seed=5):
        assert t.states[:, 0].max() <= bound + 1e-12


def test_memory_resident_family_keeps_file_channels_benign():
    profile = PROFILES["hive"]
    assert profile.evasion == "memory_resident"
    for i, t in enumerate(gen_ransomware(profile, 6, 1024, WINDOW_DT, seed=11)):
        rngs = _substreams(_trace_seed(11, 1, "hive", i))
        core = _benign_states(1024, rngs[0])
        assert np.array_equal(t.states[:, :5], core[:, :5])
        # detection evidence must come from the last three channels
        assert t.states[:, 5].max() > core[:, 5].max() + 0.2


def test_delayed_family_onset_in_second_half():
    profile = PROFILES["babuk"]
    assert profile.evasion == "delayed"
    assert profile.onset_window >= 1856 / 2
    with pytest.raises(ValueError, match="delayed evasion"):
        gen_ransomware(profile, 1, 4500, WINDOW_DT, seed=0)


def test_onset_shift_moves_divergence_point_by_exactly_that_many_windows():
    profile = PROFILES["lockbit3"]
    base = gen_ransomware(profile, 1, 1024, WINDOW_DT, seed=21)[0]
    shifted = gen_ransomware(profile, 1, 1024, WINDOW_DT, seed=21,
                             onset_shift=64)[0]
    rngs = _substreams(_trace_seed(21, 1, "lockbit3", 0))
    core = _benign_states(1024, rngs[0])

    def first_divergence(t):
        return int(np.argmax(np.any(t.states != core, axis=1)))

    assert first_divergence(shifted) == first_divergence(base) + 64


def test_onset_shift_past_trace_end_rejected():
    profile = PROFILES["lockbit3"]
    with pytest.raises(ValueError, match="onset can reach"):
        gen_ransomware(profile, 1, 160, WINDOW_DT, seed=0, onset_shift=64)


# --- seeding and determinism ------------------------------------------------

def test_per_trace_seeding_makes_traces_independent_of_batching():
    profile = PROFILES["conti"]
    batch = gen_ransomware(profile, 3, 512, WINDOW_DT, seed=13)
    single = gen_ransomware(profile, 1, 512, WINDOW_DT, seed=13, start_index=2)[0]
    assert trace_to_line(batch[2]) == trace_to_line(single)

    benign_batch = gen_benign(3, (1792, 1856), WINDOW_DT, seed=13)
    benign_single = gen_benign(1, (1792, 1856), WINDOW_DT, seed=13, start_index=1)[0]
    assert trace_to_line(benign_batch[1]) == trace_to_line(benign_single)


def test_gen_dataset_deterministic_and_seed_sensitive():
    spec = default_composition(scale=0.02, seed=0)
    a = gen_dataset(spec)
    b = gen_dataset(spec)
    assert [trace_to_line(x) for x in a.traces] == [trace_to_line(x) for x in b.traces]
    assert a.manifest == b.manifest

    c = gen_dataset(default_composition(scale=0.02, seed=1))
    assert trace_to_line(a.traces[0]) != trace_to_line(c.traces[0])


def test_gen_dataset_validates_clean():
    ds = gen_dataset(default_composition(scale=0.02, seed=4))
    assert validate_dataset(ds) == []
    fams = ds.manifest["families"]
    assert set(fams) == {p.name for p in TRAINING_PROFILES} | {LABEL_BENIGN}
    # Table I composition at scale 0.02, round half up
    assert fams["lockbit3"] == 15
    assert fams["benign"] == 50


def test_scaled_count_rounds_half_up():
    assert scaled_count(750, 0.1) == 75
    assert scaled_count(5, 0.1) == 1
    assert scaled_count(2500, 0.001) == 3
    with pytest.raises(ValueError):
        scaled_count(4, 0.1)


def test_composition_spec_validation():
    with pytest.raises(ValueError):
        CompositionSpec(profiles=TRAINING_PROFILES, counts={}, lengths={},
                        benign_count=10, benign_length_range=(64, 128),
                        window_dt=WINDOW_DT, scale=1.0, seed=0)


# --- held-out families and speed sweeps -------------------------------------

def test_unseen_profiles_have_novel_net_egress():
    for p in TRAINING_PROFILES:
        assert p.channel_amplitudes[7] <= TRAINING_NET_EGRESS_MAX
    for p in UNSEEN_PROFILES:
        assert p.channel_amplitudes[7] >= HELD_OUT_NET_EGRESS_MIN


def test_gen_unseen_families_guards_names():
    spec = default_composition(scale=0.05, seed=0)
    with pytest.raises(ValueError, match="training family"):
        gen_unseen_families(["lockbit3"], spec, seed=0)
    with pytest.raises(ValueError, match="no unseen profile"):
        gen_unseen_families(["notafamily"], spec, seed=0)

    ds = gen_unseen_families(["royal"], spec, seed=0)
    assert validate_dataset(ds) == []
    assert all(t.family == "royal" for t in ds.traces)
    assert all(t.id.startswith("royal-u") for t in ds.traces)


def test_gen_speed_set_ids_and_composition():
    spec = default_composition(scale=0.05, seed=0)
    traces = gen_speed_set(spec, speed=25.0, per_family=2, seed=0)
    n_fam = len(spec.profiles)
    assert len(traces) == 2 * n_fam * 2  # ransomware plus matched benign
    assert sum(t.label == LABEL_BENIGN for t in traces) == 2 * n_fam
    assert all("s25-" in t.id for t in traces)

    main_ids = {t.id for t in gen_dataset(spec).traces}
    assert main_ids.isdisjoint({t.id for t in traces})

    again = gen_speed_set(spec, speed=25.0, per_family=2, seed=0)
    assert [trace_to_line(t) for t in again] == [trace_to_line(t) for t in traces]

    other_speed = gen_speed_set(spec, speed=1.0, per_family=2, seed=0)
    assert {t.id for t in other_speed}.isdisjoint({t.id for t in traces})


def test_gen_speed_set_speed_actually_controls_hold_length():
    spec = default_composition(scale=0.05, seed=0)

    def crypto_windows(traces):
        total = 0
        for t in traces:
            if t.label != LABEL_RANSOMWARE or t.family != "lockbit3":
                continue
            total += int(np.sum(t.states[:, 5] > BENIGN_MEAN[5] + 0.3))
        return total

    slow = crypto_windows(gen_speed_set(spec, 1.0, 4, seed=0))
    fast = crypto_windows(gen_speed_set(spec, 50.0, 4, seed=0))
    assert slow > 5 * fast


def test_family_profile_validation():
    amps = np.zeros(8)
    with pytest.raises(ValueError, match="reserved"):
        FamilyProfile("benign", onset_window=10, channel_amplitudes=amps,
                      enc_speed=1.0)
    with pytest.raises(ValueError, match="enc_speed"):
        FamilyProfile("x", onset_window=10, channel_amplitudes=amps,
                      enc_speed=0.0)
    with pytest.raises(ValueError, match="evasion"):
        FamilyProfile("x", onset_window=10, channel_amplitudes=amps,
                      enc_speed=1.0, evasion="wat")
    with pytest.raises(ValueError, match="speed_jitter"):
        FamilyProfile("x", onset_window=10, channel_amplitudes=amps,
                      enc_speed=1.0, speed_jitter=1.0)


def test_action_distributions_are_probabilities():
    for p in (ATTACK_ACTION_P,):
        assert p.sum() == pytest.approx(1.0)
        assert np.all(p >= 0)
