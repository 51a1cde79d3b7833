"""Canonical discrete Dubins-car model.

States are ``(chi, y, phi)`` with ``phi`` kept unwrapped; controls are
``(v, omega)`` held constant over each ``dt`` interval.  Action sequences are
``(H, 2)`` arrays and trajectories carry ``H + 1`` states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class State(NamedTuple):
    chi: float
    y: float
    phi: float


class Control(NamedTuple):
    v: float
    omega: float


@dataclass(frozen=True)
class Trajectory:
    """``H + 1`` states produced by rolling out ``H`` controls."""

    states: np.ndarray  # (H + 1, 3)
    dt: float

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 3 or len(states) < 1:
            raise ValueError(f"trajectory states must be (H+1, 3), got {states.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, k) -> State:
        return State(*self.states[k])

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def as_actions(u, horizon: int | None = None) -> np.ndarray:
    """Validate and return an action sequence as a float ``(H, 2)`` array."""
    arr = np.asarray(u, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"action sequence must be (H, 2), got {arr.shape}")
    if horizon is not None and len(arr) != horizon:
        raise ValueError(f"action sequence has length {len(arr)}, expected {horizon}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("action sequence contains non-finite values")
    return arr


def step(s, u, dt: float) -> State:
    chi, y, phi = s
    v, omega = u
    return State(chi + dt * v * np.cos(phi), y + dt * v * np.sin(phi), phi + dt * omega)


def rollout(x0, u, dt: float) -> Trajectory:
    u = as_actions(u)
    states = np.empty((len(u) + 1, 3))
    states[0] = x0
    for k in range(len(u)):
        states[k + 1] = step(states[k], u[k], dt)
    return Trajectory(states, dt)


def rollout_batch(x0, u: np.ndarray, dt: float) -> np.ndarray:
    """Roll out ``K`` action sequences ``(K, H, 2)`` from one start state.

    Returns states of shape ``(K, H + 1, 3)``; row ``k`` matches
    ``rollout(x0, u[k], dt).states`` bit for bit.
    """
    u = np.asarray(u, dtype=float)
    K, H, _ = u.shape
    states = np.empty((K, H + 1, 3))
    states[:, 0] = x0
    for k in range(H):
        phi = states[:, k, 2]
        v = u[:, k, 0]
        states[:, k + 1, 0] = states[:, k, 0] + dt * v * np.cos(phi)
        states[:, k + 1, 1] = states[:, k, 1] + dt * v * np.sin(phi)
        states[:, k + 1, 2] = phi + dt * u[:, k, 1]
    return states


def wrap_angle(a):
    """Wrap angles to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if np.ndim(w) else float(w)
