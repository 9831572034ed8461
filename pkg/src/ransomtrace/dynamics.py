"""Numerical core for state-evolution experiments.

Three discretizations, kept deliberately small and exactly specified:

* :func:`kernel_flow` -- discrete divergence of a zero-padded 1-d convolution
  across the state's component index.  Linear in the state by construction.
* :func:`evolve_first_order` -- classic RK4 for ``ds/dt = field(s, a)`` with
  the action signal held constant within each step (zero-order hold).
* :func:`evolve_damped` -- semi-implicit (symplectic) Euler for the damped
  second-order system ``s'' + damping * s' + h(s) = 0``:
  ``v <- v - dt*(damping*v + h(s)); s <- s + dt*v``.

Stability of the damped scheme for linear positive-definite ``h`` requires
``dt < 2 / (damping + 2*omega_max)`` where ``omega_max`` is the square root of
the largest eigenvalue of the ``h`` matrix.  Monotone decay of the discrete
energy ``0.5*||v||^2 + 0.5*s.h(s)`` additionally requires
``dt <= 2*damping / (omega_max**2 + damping**2)``; below the spectral bound
alone the energy can overshoot transiently when damping is small.  Both
bounds are exposed as helpers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DampedConfig",
    "DivergenceError",
    "Kernel",
    "damped_energy",
    "energy_monotone_bound",
    "evolve_damped",
    "evolve_first_order",
    "kernel_flow",
    "stability_bound",
    "trajectory_loss",
]


class DivergenceError(RuntimeError):
    """Raised when an evolution or a training run produces non-finite values."""


@dataclass(frozen=True)
class Kernel:
    """Odd-length 1-d convolution kernel over the state component index."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("kernel must be a non-empty 1-d array")
        if w.size % 2 == 0:
            raise ValueError(f"kernel length must be odd, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")

    @classmethod
    def identity(cls) -> "Kernel":
        return cls(np.array([1.0]))

    @classmethod
    def default(cls) -> "Kernel":
        # Mild 3-tap smoother; any odd length is accepted.
        return cls(np.array([0.25, 0.5, 0.25]))


@dataclass(frozen=True)
class DampedConfig:
    """Damping coefficient for :func:`evolve_damped` (>= 0)."""

    damping: float

    def __post_init__(self):
        if not np.isfinite(self.damping) or self.damping < 0:
            raise ValueError(f"damping must be finite and >= 0, got {self.damping}")


def stability_bound(damping: float, omega_max: float) -> float:
    """Spectral stability step bound dt < 2 / (damping + 2*omega_max)."""
    return 2.0 / (damping + 2.0 * omega_max)


def energy_monotone_bound(damping: float, omega_max: float) -> float:
    """Step bound below which the discrete energy decays monotonically."""
    return min(stability_bound(damping, omega_max),
               2.0 * damping / (omega_max**2 + damping**2))


def kernel_flow(state: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Discrete divergence of the zero-padded convolution of state with kernel.

    With ``c`` the same-length convolution, the output is the central
    difference ``(c[j+1] - c[j-1]) / 2`` in the interior and the one-sided
    differences ``c[1] - c[0]`` / ``c[d-1] - c[d-2]`` at the ends.
    """
    s = np.asarray(state, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError(f"state must be 1-d with d >= 2, got shape {s.shape}")
    if kernel.weights.size > s.size:
        raise ValueError(f"kernel ({kernel.weights.size} taps) longer than "
                         f"state ({s.size})")
    c = np.convolve(s, kernel.weights, mode="same")
    out = np.empty_like(c)
    out[1:-1] = (c[2:] - c[:-2]) / 2.0
    out[0] = c[1] - c[0]
    out[-1] = c[-1] - c[-2]
    return out


def evolve_first_order(initial: np.ndarray, action_signal, field, dt: float,
                       steps: int) -> np.ndarray:
    """Integrate ds/dt = field(s, a) with RK4; returns shape (steps+1, d).

    ``action_signal`` may be None (the field is called with ``a=None``) or a
    sequence indexed per step; its last entry is held beyond its end.  Raises
    :class:`DivergenceError` on the first non-finite state.
    """
    if dt <= 0 or steps < 0:
        raise ValueError("dt must be > 0 and steps >= 0")
    s = np.array(initial, dtype=np.float64)
    out = np.empty((steps + 1, s.size))
    out[0] = s
    for i in range(steps):
        if action_signal is None:
            a = None
        else:
            a = action_signal[min(i, len(action_signal) - 1)]
        k1 = np.asarray(field(s, a), dtype=np.float64)
        k2 = np.asarray(field(s + 0.5 * dt * k1, a), dtype=np.float64)
        k3 = np.asarray(field(s + 0.5 * dt * k2, a), dtype=np.float64)
        k4 = np.asarray(field(s + dt * k3, a), dtype=np.float64)
        s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(s)):
            raise DivergenceError(f"first-order evolution diverged at step {i + 1}")
        out[i + 1] = s
    return out


def evolve_damped(initial: np.ndarray, velocity: np.ndarray, h, config: DampedConfig,
                  dt: float, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Semi-implicit Euler for s'' + damping*s' + h(s) = 0.

    Returns (states, velocities), each of shape (steps+1, d).
    """
    if dt <= 0 or steps < 0:
        raise ValueError("dt must be > 0 and steps >= 0")
    s = np.array(initial, dtype=np.float64)
    v = np.array(velocity, dtype=np.float64)
    if s.shape != v.shape:
        raise ValueError(f"state/velocity shape mismatch: {s.shape} vs {v.shape}")
    states = np.empty((steps + 1, s.size))
    vels = np.empty_like(states)
    states[0], vels[0] = s, v
    lam = config.damping
    for i in range(steps):
        v = v - dt * (lam * v + np.asarray(h(s), dtype=np.float64))
        s = s + dt * v
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(v))):
            raise DivergenceError(f"damped evolution diverged at step {i + 1}")
        states[i + 1], vels[i + 1] = s, v
    return states, vels


def damped_energy(states: np.ndarray, velocities: np.ndarray, h) -> np.ndarray:
    """Discrete energy 0.5*||v||^2 + 0.5*s.h(s) along a trajectory (linear h)."""
    states = np.atleast_2d(states)
    velocities = np.atleast_2d(velocities)
    e = np.empty(states.shape[0])
    for i, (s, v) in enumerate(zip(states, velocities)):
        e[i] = 0.5 * float(v @ v) + 0.5 * float(s @ np.asarray(h(s)))
    return e


def trajectory_loss(reference: np.ndarray, estimate: np.ndarray, dt: float) -> float:
    """Trapezoidal-rule integral of ||reference(t) - estimate(t)||^2 over time."""
    r = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if r.shape != e.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {e.shape}")
    if r.ndim == 1:
        r = r[:, None]
        e = e[:, None]
    if dt <= 0:
        raise ValueError("dt must be > 0")
    g = np.sum((r - e) ** 2, axis=1)
    if g.size < 2:
        return 0.0
    return float(np.trapezoid(g, dx=dt))
