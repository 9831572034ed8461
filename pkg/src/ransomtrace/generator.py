"""Seeded synthetic generator for encrypted-behavior traces.

Benign processes are stationary AR(1) noise around per-channel baselines with
a fixed action-code distribution.  Ransomware traces reuse the exact benign
process (same derived random stream) and add a post-onset burst:

* offsets ramp toward per-family channel amplitudes over a fixed spin-up
  time, hold while the configured corpus is being encrypted
  (``corpus_mb / enc_speed`` seconds), then decay back to baseline;
* action codes inside the burst shift toward crypto/file-io symbols;
* evasion modes reshape the burst: ``delayed`` pushes the onset past half the
  trace, ``entropy_obfuscated`` clamps the entropy channel near its benign
  ceiling and damps the write/crypto amplitudes, ``memory_resident`` leaves
  file-system channels untouched and raises memory/crypto channels only.

A share of benign traces additionally carries short high-entropy episodes
(archiving and compression workloads) that never touch the write/crypto
channels.

Fast strains therefore produce short bursts and slow strains long ones while
the onset transition stays abrupt at every speed, which is what separates
window-averaging detectors from transition-residual scoring.

Determinism: every trace draws from
``SeedSequence([seed, domain, crc32(family), index])`` with three spawned
substreams (states, actions, profile jitter), so regeneration is independent
of iteration order.  Profile jitter consumes draws in a fixed order: onset,
speed factor, magnitude factor, direction perturbation.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from scipy.signal import lfilter

from .statespace import (
    Dataset,
    LABEL_BENIGN,
    LABEL_RANSOMWARE,
    N_CHANNELS,
    StateTrace,
    build_manifest,
)

__all__ = [
    "CompositionSpec",
    "EVASION_MODES",
    "FamilyProfile",
    "MEAN_SHIFT_FLOOR",
    "TRAINING_PROFILES",
    "UNSEEN_PROFILES",
    "WINDOW_DT",
    "active_span",
    "default_composition",
    "family_code",
    "gen_benign",
    "gen_dataset",
    "gen_ransomware",
    "gen_speed_set",
    "gen_unseen_families",
    "profiles_by_name",
    "scaled_count",
]

# Benign AR(1) model: x[t] = mean + PHI*(x[t-1] - mean) + innovation noise,
# started from the stationary distribution.
PHI = 0.85
BENIGN_MEAN = np.array([0.45, 0.30, 0.12, 0.55, 0.08, 0.05, 0.02, 0.10])
BENIGN_STATIONARY_SD = np.array([0.040, 0.030, 0.030, 0.050, 0.020, 0.015, 0.010, 0.030])
INNOVATION_SD = BENIGN_STATIONARY_SD * math.sqrt(1.0 - PHI * PHI)

# Action-code distributions (idle, file_io, crypto, net, mem).
BENIGN_ACTION_P = np.array([0.55, 0.25, 0.02, 0.10, 0.08])
ATTACK_ACTION_P = np.array([0.10, 0.35, 0.40, 0.05, 0.10])
MEMORY_ACTION_P = np.array([0.15, 0.10, 0.40, 0.05, 0.30])

WINDOW_DT = 0.025          # seconds per window
RAMP_RATE = 10.0           # envelope fraction per second while spinning up
DECAY_RATE = 8.0           # envelope fraction shed per second once done
DEFAULT_CORPUS_MB = 5.0    # data encrypted per attack; burst = corpus/speed

# Benign high-entropy episodes (compression, backup archiving): short bursts
# on the entropy/uniformity channels only, the classic false-positive source
# for single-channel entropy heuristics.  Kept shorter than an encryption
# hold so sustained elevation stays an attack tell.
EPISODE_P = 0.30                  # fraction of benign traces with episodes
EPISODE_COUNT_RANGE = (1, 3)
EPISODE_DURATION_RANGE = (4, 16)  # windows
EPISODE_LEVEL_RANGE = (0.18, 0.32)
EPISODE_EDGE = 2                  # windows of linear rise/fall
EPISODE_UNIFORMITY_FRACTION = 0.5
ENTROPY_CLAMP_MARGIN = 0.10
OBFUSCATION_FACTOR = 0.75  # write/crypto amplitude damping when obfuscated
ACTION_ENV_FLOOR = 0.05    # envelope above this flips the action distribution

EVASION_MODES = ("none", "delayed", "entropy_obfuscated", "memory_resident")

# Held-out axes separating unseen families from every training family; the
# mean-shift separation floor is checked over the active burst span.
TRAINING_NET_EGRESS_MAX = 0.15
HELD_OUT_NET_EGRESS_MIN = 0.30
HELD_OUT_ONSET_RANGE = (192, 320)
MEAN_SHIFT_FLOOR = 0.15

_DOMAIN_GEN = 1
_DOMAIN_UNSEEN = 2
_DOMAIN_SWEEP = 3

_BENIGN_LENGTH_STEP = 32


def family_code(name: str) -> int:
    """Stable integer key for a family name (seed-material only)."""
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class FamilyProfile:
    """Generation parameters for one ransomware family.

    ``onset_window`` is the earliest encryption onset; each trace draws its
    onset uniformly from ``[onset_window, onset_window + onset_jitter]``.
    ``channel_amplitudes`` are the raw-channel offsets reached at full burst.
    The jitter fields give per-trace variability: magnitude scaling, random
    direction perturbation (polymorphic strains use large values), and speed
    scaling.  ``periodicity`` optionally superimposes ``(channel, period_s,
    amplitude)`` oscillations on the burst.  ``denoise`` / ``norm_range`` are
    preprocessing tags consumed only by table-faithful mode.
    """

    name: str
    onset_window: int
    channel_amplitudes: np.ndarray
    enc_speed: float
    evasion: str = "none"
    onset_jitter: int = 0
    corpus_mb: float = DEFAULT_CORPUS_MB
    dir_jitter: float = 0.0
    mag_jitter: float = 0.0
    speed_jitter: float = 0.0
    periodicity: tuple[tuple[int, float, float], ...] = ()
    denoise: bool = True
    norm_range: tuple[float, float] | None = None

    def __post_init__(self):
        amps = np.asarray(self.channel_amplitudes, dtype=np.float64)
        object.__setattr__(self, "channel_amplitudes", amps)
        if not self.name:
            raise ValueError("profile name must be non-empty")
        if self.name == LABEL_BENIGN:
            raise ValueError("'benign' is reserved")
        if self.onset_window < 1:
            raise ValueError(f"onset_window must be >= 1, got {self.onset_window}")
        if self.onset_jitter < 0:
            raise ValueError("onset_jitter must be >= 0")
        if amps.shape != (N_CHANNELS,) or not np.all(np.isfinite(amps)):
            raise ValueError(f"channel_amplitudes must be finite with shape ({N_CHANNELS},)")
        if not (np.isfinite(self.enc_speed) and self.enc_speed > 0):
            raise ValueError(f"enc_speed must be > 0, got {self.enc_speed}")
        if self.evasion not in EVASION_MODES:
            raise ValueError(f"unknown evasion mode {self.evasion!r}")
        if self.corpus_mb <= 0:
            raise ValueError("corpus_mb must be > 0")
        for j in ("dir_jitter", "mag_jitter", "speed_jitter"):
            if getattr(self, j) < 0:
                raise ValueError(f"{j} must be >= 0")
        if not 0 <= self.speed_jitter < 1:
            raise ValueError("speed_jitter must lie in [0, 1)")
        for ch, period, amp in self.periodicity:
            if not 0 <= ch < N_CHANNELS:
                raise ValueError(f"periodicity channel {ch} out of range")
            if period <= 0:
                raise ValueError("periodicity period must be > 0")
            if not np.isfinite(amp):
                raise ValueError("periodicity amplitude must be finite")


TRAINING_PROFILES = (
    FamilyProfile("lockbit3", onset_window=48, onset_jitter=48,
                  channel_amplitudes=np.array([0.45, 0.20, 0.90, -0.25, 0.55, 0.80, 0.15, 0.10]),
                  enc_speed=30.0, evasion="none",
                  dir_jitter=0.10, mag_jitter=0.15, speed_jitter=0.20),
    FamilyProfile("blackcat", onset_window=64, onset_jitter=64,
                  channel_amplitudes=np.array([0.40, 0.15, 0.35, -0.15, 0.30, 0.40, 0.20, 0.08]),
                  enc_speed=20.0, evasion="entropy_obfuscated",
                  dir_jitter=0.45, mag_jitter=0.25, speed_jitter=0.25),
    FamilyProfile("hive", onset_window=64, onset_jitter=80,
                  channel_amplitudes=np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.50, 0.45, 0.12]),
                  enc_speed=15.0, evasion="memory_resident",
                  dir_jitter=0.45, mag_jitter=0.25, speed_jitter=0.25),
    FamilyProfile("conti", onset_window=80, onset_jitter=80,
                  channel_amplitudes=np.array([0.40, 0.25, 0.70, -0.20, 0.45, 0.60, 0.10, 0.15]),
                  enc_speed=12.0, evasion="none",
                  dir_jitter=0.12, mag_jitter=0.15, speed_jitter=0.20,
                  periodicity=((2, 1.0, 0.08),), denoise=False, norm_range=(0.0, 1.0)),
    FamilyProfile("babuk", onset_window=1020, onset_jitter=278,
                  channel_amplitudes=np.array([0.12, 0.10, 0.45, -0.15, 0.35, 0.40, 0.08, 0.05]),
                  enc_speed=8.0, evasion="delayed",
                  dir_jitter=0.40, mag_jitter=0.25, speed_jitter=0.20,
                  corpus_mb=16.0, denoise=False, norm_range=(0.0, 1.0)),
)

UNSEEN_PROFILES = (
    FamilyProfile("royal", onset_window=192, onset_jitter=128,
                  channel_amplitudes=np.array([0.30, 0.35, 0.65, -0.10, 0.25, 0.35, 0.10, 0.45]),
                  enc_speed=25.0, evasion="none",
                  dir_jitter=0.20, mag_jitter=0.20, speed_jitter=0.25),
    FamilyProfile("quantum", onset_window=208, onset_jitter=112,
                  channel_amplitudes=np.array([0.25, 0.50, 0.30, 0.20, 0.60, 0.20, 0.05, 0.35]),
                  enc_speed=18.0, evasion="none",
                  dir_jitter=0.20, mag_jitter=0.20, speed_jitter=0.25),
    FamilyProfile("play", onset_window=224, onset_jitter=96,
                  channel_amplitudes=np.array([0.55, 0.30, 0.50, -0.35, 0.40, 0.30, 0.35, 0.30]),
                  enc_speed=35.0, evasion="none",
                  dir_jitter=0.20, mag_jitter=0.20, speed_jitter=0.25),
)

_TABLE_COUNTS = {"lockbit3": 750, "blackcat": 620, "hive": 580, "conti": 500, "babuk": 450}
_TABLE_LENGTHS = {"lockbit3": 2048, "blackcat": 1984, "hive": 2112, "conti": 1920, "babuk": 1856}
_TABLE_BENIGN_COUNT = 2500
_BENIGN_LENGTH_RANGE = (1792, 2176)

UNSEEN_COUNT_BASE = 120
UNSEEN_LENGTH = 2000


@dataclass(frozen=True)
class CompositionSpec:
    """What to generate: family profiles, counts and lengths at scale 1.0."""

    profiles: tuple[FamilyProfile, ...]
    counts: Mapping[str, int]
    lengths: Mapping[str, int]
    benign_count: int
    benign_length_range: tuple[int, int] = _BENIGN_LENGTH_RANGE
    scale: float = 1.0
    seed: int = 0
    window_dt: float = WINDOW_DT

    def __post_init__(self):
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate family names: {names}")
        if set(self.counts) != set(names) or set(self.lengths) != set(names):
            raise ValueError("counts/lengths keys must match profile names")
        for name, n in self.counts.items():
            if n < 1:
                raise ValueError(f"count for {name} must be >= 1")
        for name, ln in self.lengths.items():
            if ln < 64:
                raise ValueError(f"length for {name} must be >= 64, got {ln}")
        lo, hi = self.benign_length_range
        if lo < 64 or hi < lo:
            raise ValueError(f"bad benign length range {self.benign_length_range}")
        if self.benign_count < 1:
            raise ValueError("benign_count must be >= 1")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.window_dt <= 0:
            raise ValueError("window_dt must be > 0")


def default_composition(scale: float = 1.0, seed: int = 0) -> CompositionSpec:
    return CompositionSpec(profiles=TRAINING_PROFILES, counts=dict(_TABLE_COUNTS),
                           lengths=dict(_TABLE_LENGTHS), benign_count=_TABLE_BENIGN_COUNT,
                           scale=scale, seed=seed)


def profiles_by_name(profiles=TRAINING_PROFILES) -> dict[str, FamilyProfile]:
    return {p.name: p for p in profiles}


def scaled_count(count: int, scale: float) -> int:
    """Round-half-up count scaling; scaled counts must stay >= 1."""
    n = int(math.floor(count * scale + 0.5))
    if n < 1:
        raise ValueError(f"scaled count {count} * {scale} fell below 1")
    return n


def active_span(profile: FamilyProfile, length: int,
                window_dt: float = WINDOW_DT) -> tuple[int, int]:
    """Window range covering every possible burst of this profile.

    Spans the onset jitter plus the hold phase at the slowest jittered speed;
    used by separation diagnostics and tests.
    """
    slow = profile.enc_speed * (1.0 - profile.speed_jitter)
    burst_windows = int(math.ceil(profile.corpus_mb / slow / window_dt))
    hi = min(length, profile.onset_window + profile.onset_jitter + burst_windows)
    return profile.onset_window, hi


# --- low-level draws --------------------------------------------------------

def _substreams(seed_seq: np.random.SeedSequence):
    states, actions, jitter = seed_seq.spawn(3)
    return (np.random.default_rng(states), np.random.default_rng(actions),
            np.random.default_rng(jitter))


def _trace_seed(seed: int, domain: int, family: str, index: int,
                extra: int | None = None) -> np.random.SeedSequence:
    key = [int(seed), int(domain), family_code(family), int(index)]
    if extra is not None:
        key.insert(3, int(extra))
    return np.random.SeedSequence(key)


def _benign_states(length: int, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal((length, N_CHANNELS))
    z0 = BENIGN_STATIONARY_SD * eps[0]
    if length == 1:
        return BENIGN_MEAN + z0[None, :]
    x_in = INNOVATION_SD * eps[1:]
    y, _ = lfilter([1.0], [1.0, -PHI], x_in, axis=0, zi=(PHI * z0)[None, :])
    return BENIGN_MEAN + np.vstack([z0[None, :], y])


def _draw_actions(u: np.ndarray, p: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p)
    return np.minimum(np.searchsorted(cdf, u, side="right"), p.size - 1).astype(np.int64)


def _episode_overlay(length: int, rng: np.random.Generator) -> np.ndarray:
    """Additive entropy-channel series from benign high-entropy episodes.

    Draw order per trace is fixed (coin, count, then start/duration/level per
    episode) so the stream stays reproducible.
    """
    overlay = np.zeros(length)
    if rng.random() >= EPISODE_P:
        return overlay
    count = int(rng.integers(EPISODE_COUNT_RANGE[0], EPISODE_COUNT_RANGE[1] + 1))
    lo_d, hi_d = EPISODE_DURATION_RANGE
    idx = np.arange(length, dtype=np.float64)
    for _ in range(count):
        duration = int(rng.integers(lo_d, hi_d + 1))
        latest = length - duration - 16
        start = int(rng.integers(16, max(latest, 17)))
        level = rng.uniform(*EPISODE_LEVEL_RANGE)
        env = np.clip(np.minimum((idx - start) / EPISODE_EDGE,
                                 (start + duration - idx) / EPISODE_EDGE), 0.0, 1.0)
        overlay += level * env
    return overlay


def _one_benign(length: int, window_dt: float, rngs, trace_id: str) -> StateTrace:
    rng_s, rng_a, rng_j = rngs
    states = _benign_states(length, rng_s)
    overlay = _episode_overlay(length, rng_j)
    states[:, 0] += overlay
    states[:, 1] += EPISODE_UNIFORMITY_FRACTION * overlay
    actions = _draw_actions(rng_a.random(length - 1), BENIGN_ACTION_P)
    return StateTrace(trace_id, LABEL_BENIGN, LABEL_BENIGN, window_dt, states, actions)


def _burst_envelope(length: int, onset: int, speed: float, corpus_mb: float,
                    window_dt: float) -> np.ndarray:
    idx = np.arange(length, dtype=np.float64)
    # spin-up is a fixed time cost; only the hold scales with 1/speed
    ramp_per_window = window_dt * RAMP_RATE
    done = onset + corpus_mb / speed / window_dt
    up = np.clip((idx - onset) * ramp_per_window, 0.0, 1.0)
    peak = min((done - onset) * ramp_per_window, 1.0)
    down = peak - (idx - done) * window_dt * DECAY_RATE
    env = np.where(idx <= done, up, np.clip(down, 0.0, 1.0))
    env[idx < onset] = 0.0
    return env


def _one_ransomware(profile: FamilyProfile, length: int, window_dt: float, seed_seq,
                    trace_id: str, onset_shift: int = 0) -> StateTrace:
    if profile.evasion == "delayed" and profile.onset_window < length / 2:
        raise ValueError(f"{profile.name}: delayed evasion needs onset >= half the "
                         f"trace, got {profile.onset_window} of {length}")
    max_onset = profile.onset_window + profile.onset_jitter + onset_shift
    if max_onset > length - 2:
        raise ValueError(f"{profile.name}: onset can reach {max_onset}, past usable "
                         f"range of a {length}-window trace")

    rng_s, rng_a, rng_j = _substreams(seed_seq)
    states = _benign_states(length, rng_s)
    u = rng_a.random(length - 1)

    # Fixed jitter draw order; see module docstring.
    onset = int(profile.onset_window + rng_j.integers(0, profile.onset_jitter + 1)
                + onset_shift)
    speed = profile.enc_speed * (1.0 + profile.speed_jitter * rng_j.uniform(-1.0, 1.0))
    mag = 1.0 + profile.mag_jitter * rng_j.uniform(-1.0, 1.0)
    direction = rng_j.standard_normal(N_CHANNELS)

    amps = profile.channel_amplitudes * mag
    rms = float(np.sqrt(np.mean(profile.channel_amplitudes**2)))
    amps = amps + profile.dir_jitter * rms * direction
    if profile.evasion == "entropy_obfuscated":
        amps[0] = 0.0
        amps[2] *= OBFUSCATION_FACTOR
        amps[5] *= OBFUSCATION_FACTOR
    elif profile.evasion == "memory_resident":
        amps[:5] = 0.0  # file-system facing channels stay benign

    env = _burst_envelope(length, onset, speed, profile.corpus_mb, window_dt)
    states = states + env[:, None] * amps[None, :]
    for ch, period, amp in profile.periodicity:
        t = (np.arange(length) - onset) * window_dt
        states[:, ch] += amp * np.sin(2.0 * np.pi * t / period) * env
    if profile.evasion == "entropy_obfuscated":
        states[:, 0] = np.minimum(states[:, 0], BENIGN_MEAN[0] + ENTROPY_CLAMP_MARGIN)

    action_p = MEMORY_ACTION_P if profile.evasion == "memory_resident" else ATTACK_ACTION_P
    burst = env[:-1] > ACTION_ENV_FLOOR
    actions = np.where(burst, _draw_actions(u, action_p), _draw_actions(u, BENIGN_ACTION_P))
    return StateTrace(trace_id, LABEL_RANSOMWARE, profile.name, window_dt, states, actions)


# --- public generation ------------------------------------------------------

def gen_benign(count: int, length_range: tuple[int, int], window_dt: float,
               seed: int, start_index: int = 0, id_prefix: str = "",
               domain: int = _DOMAIN_GEN, extra: int | None = None) -> list[StateTrace]:
    """Generate benign traces with lengths drawn from length_range (step 32)."""
    lo, hi = length_range
    options = np.arange(lo, hi + 1, _BENIGN_LENGTH_STEP)
    out = []
    for i in range(start_index, start_index + count):
        rngs = _substreams(_trace_seed(seed, domain, LABEL_BENIGN, i, extra))
        length = int(options[rngs[2].integers(0, len(options))])
        out.append(_one_benign(length, window_dt, rngs,
                               f"{LABEL_BENIGN}-{id_prefix}{i:05d}"))
    return out


def gen_ransomware(profile: FamilyProfile, count: int, length: int, window_dt: float,
                   seed: int, start_index: int = 0, id_prefix: str = "",
                   onset_shift: int = 0, domain: int = _DOMAIN_GEN,
                   extra: int | None = None) -> list[StateTrace]:
    return [
        _one_ransomware(profile, length, window_dt,
                        _trace_seed(seed, domain, profile.name, i, extra),
                        f"{profile.name}-{id_prefix}{i:05d}", onset_shift)
        for i in range(start_index, start_index + count)
    ]


def gen_dataset(spec: CompositionSpec, onset_shift: int = 0) -> Dataset:
    """Generate the full labeled dataset described by spec (scale applied)."""
    traces: list[StateTrace] = []
    for profile in spec.profiles:
        n = scaled_count(spec.counts[profile.name], spec.scale)
        traces.extend(gen_ransomware(profile, n, spec.lengths[profile.name],
                                     spec.window_dt, spec.seed, onset_shift=onset_shift))
    traces.extend(gen_benign(scaled_count(spec.benign_count, spec.scale),
                             spec.benign_length_range, spec.window_dt, spec.seed))
    return Dataset(traces, build_manifest(traces, spec.seed))


def gen_unseen_families(names, spec: CompositionSpec, seed: int) -> Dataset:
    """Generate held-out families (ransomware only) for generalization tests."""
    known = profiles_by_name(UNSEEN_PROFILES)
    training = {p.name for p in spec.profiles}
    traces: list[StateTrace] = []
    for name in names:
        if name in training:
            raise ValueError(f"{name!r} is a training family, not an unseen one")
        if name not in known:
            raise ValueError(f"no unseen profile named {name!r}; have {sorted(known)}")
        profile = known[name]
        n = scaled_count(UNSEEN_COUNT_BASE, spec.scale)
        traces.extend(gen_ransomware(profile, n, UNSEEN_LENGTH, spec.window_dt, seed,
                                     id_prefix="u", domain=_DOMAIN_UNSEEN))
    return Dataset(traces, build_manifest(traces, seed))


def gen_speed_set(spec: CompositionSpec, speed: float, per_family: int,
                  seed: int) -> list[StateTrace]:
    """Speed-controlled test set: every training family at exactly ``speed``
    (speed jitter disabled) plus an equal number of fresh benign traces."""
    tag = f"s{speed:g}-".replace(".", "_")
    speed_key = int(round(speed * 1000))
    traces: list[StateTrace] = []
    for profile in spec.profiles:
        controlled = replace(profile, enc_speed=float(speed), speed_jitter=0.0)
        traces.extend(gen_ransomware(controlled, per_family, spec.lengths[profile.name],
                                     spec.window_dt, seed, id_prefix=tag,
                                     domain=_DOMAIN_SWEEP, extra=speed_key))
    traces.extend(gen_benign(per_family * len(spec.profiles), spec.benign_length_range,
                             spec.window_dt, seed, id_prefix=tag,
                             domain=_DOMAIN_SWEEP, extra=speed_key))
    return traces
