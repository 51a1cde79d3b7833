"""Self-supervised regression targets from recorded episodes.

Logs are aligned to the image timestamps, windows are cut around anchor
images, the canonical model is rolled out from each window's first realized
state, and the largest position deviation becomes the target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .dynamics import Trajectory, as_actions, rollout


class InsufficientOverlap(ValueError):
    pass


@dataclass
class EpisodeLog:
    """Raw streams recorded while driving; each stream has its own clock."""

    state_times: np.ndarray
    states: np.ndarray  # (N, 3)
    control_times: np.ndarray
    controls: np.ndarray  # (M, 2)
    obs_times: np.ndarray
    observations: np.ndarray  # (K, 3, h, w)
    goal: tuple = (np.nan, np.nan)
    episode_id: str = "ep0"
    outcome: str = ""
    stuck_time: float | None = None

    def __post_init__(self):
        for name in ("state_times", "control_times", "obs_times"):
            t = np.asarray(getattr(self, name), dtype=float)
            if t.size == 0:
                raise ValueError(f"{name} is empty")
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            setattr(self, name, t)
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 3)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 2)
        self.observations = np.asarray(self.observations, dtype=np.float32)
        if len(self.states) != len(self.state_times) or \
                len(self.controls) != len(self.control_times) or \
                len(self.observations) != len(self.obs_times):
            raise ValueError("stream lengths do not match their timestamps")

    def save(self, path) -> None:
        tensorio.save_npz(
            path, state_times=self.state_times, states=self.states,
            control_times=self.control_times, controls=self.controls,
            obs_times=self.obs_times, observations=self.observations,
            goal=np.asarray(self.goal, float),
            meta=np.array(json.dumps({"episode_id": self.episode_id, "outcome": self.outcome,
                                      "stuck_time": self.stuck_time})))

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls(z["state_times"], z["states"], z["control_times"], z["controls"],
                       z["obs_times"], z["observations"], tuple(z["goal"]), **meta)


@dataclass
class AlignedStream:
    times: np.ndarray
    states: np.ndarray  # (T, 3)
    controls: np.ndarray  # (T, 2)
    observations: np.ndarray  # (T, 3, h, w)
    episode_id: str = "ep0"

    def __len__(self):
        return len(self.times)


@dataclass
class ImageHistory:
    images: np.ndarray  # (m + 1, 3, h, w), newest first
    spacing_steps: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError("image history must be (m+1, C, h, w)")


@dataclass
class ErrorSample:
    history: ImageHistory
    actions: np.ndarray  # (H, 2)
    tau: float
    start_state: np.ndarray
    episode_id: str = "ep0"
    anchor_time: float = 0.0
    round: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise ValueError(f"tau must be finite and >= 0, got {self.tau}")


@dataclass
class Dataset:
    """Labeled corpus held as stacked arrays for fast batching."""

    images: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 3, 32, 32), np.float32))
    actions: np.ndarray = field(default_factory=lambda: np.zeros((0, 20, 2)))
    taus: np.ndarray = field(default_factory=lambda: np.zeros(0))
    start_states: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    provenance: list = field(default_factory=list)  # dicts: episode_id, anchor_time, round

    @property
    def N(self) -> int:
        return len(self.taus)

    def __len__(self):
        return self.N

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        if not samples:
            return cls()
        return cls(
            np.stack([s.history.images for s in samples]).astype(np.float32),
            np.stack([s.actions for s in samples]).astype(float),
            np.array([s.tau for s in samples], float),
            np.stack([s.start_state for s in samples]).astype(float),
            [{"episode_id": s.episode_id, "anchor_time": float(s.anchor_time),
              "round": int(s.round)} for s in samples],
        )

    def merge(self, other: "Dataset") -> "Dataset":
        if self.N == 0:
            return other
        if other.N == 0:
            return self
        return Dataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.taus, other.taus]),
            np.concatenate([self.start_states, other.start_states]),
            self.provenance + other.provenance,
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, int)
        return Dataset(self.images[idx], self.actions[idx], self.taus[idx],
                       self.start_states[idx], [self.provenance[i] for i in idx])

    # on-disk layout: manifest.jsonl + obs/<n>.metn image histories
    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / "obs").mkdir(parents=True, exist_ok=True)
        with open(directory / "manifest.jsonl", "w") as fh:
            for i in range(self.N):
                ref = f"obs/{i:06d}.metn"
                tensorio.save_tensor(directory / ref, self.images[i])
                rec = dict(self.provenance[i])
                rec.update(tau=float(self.taus[i]),
                           start_state=[float(v) for v in self.start_states[i]],
                           actions=self.actions[i].tolist(), observations=ref)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        images, actions, taus, starts, prov = [], [], [], [], []
        with open(directory / "manifest.jsonl") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                images.append(tensorio.load_tensor(directory / rec.pop("observations")))
                actions.append(rec.pop("actions"))
                taus.append(rec.pop("tau"))
                starts.append(rec.pop("start_state"))
                prov.append(rec)
        if not taus:
            return cls()
        return cls(np.stack(images), np.asarray(actions, float), np.asarray(taus, float),
                   np.asarray(starts, float), prov)


# ---------------------------------------------------------------- labels

def model_error(realized, u, dt: float, heading_weight: float = 0.0) -> float:
    """Largest planar deviation between the realized trajectory and the
    canonical rollout of ``u`` from the realized start state.

    ``heading_weight`` (m/rad) adds the wrapped heading difference to the
    norm; the default 0 keeps the metric purely positional.
    """
    states = realized.states if isinstance(realized, Trajectory) else np.asarray(realized, float)
    u = as_actions(u)
    if len(states) != len(u) + 1:
        raise ValueError(f"realized trajectory has {len(states)} states, expected {len(u) + 1}")
    canon = rollout(states[0], u, dt).states
    diff = states[:, :2] - canon[:, :2]
    sq = diff[:, 0] ** 2 + diff[:, 1] ** 2
    if heading_weight:
        dphi = np.angle(np.exp(1j * (states[:, 2] - canon[:, 2])))
        sq = sq + (heading_weight * dphi) ** 2
    return float(np.sqrt(sq.max()))


def align(log: EpisodeLog, image_rate: float | None = None) -> AlignedStream:
    """Resample states and controls at the image timestamps.

    Positions are interpolated linearly, headings along the shortest arc,
    and controls are held from the most recent command.  ``image_rate``
    (Hz) sub-samples the images first; ``None`` keeps every image.
    """
    t_img = log.obs_times
    obs = log.observations
    if image_rate is not None and len(t_img) > 1:
        native = 1.0 / np.median(np.diff(t_img))
        k = max(1, int(round(native / image_rate)))
        t_img, obs = t_img[::k], obs[::k]
    ts, tc = log.state_times, log.control_times
    lo = max(ts[0], tc[0])
    hi = ts[-1]
    eps = 1e-9
    if np.any(t_img < lo - eps) or np.any(t_img > hi + eps):
        raise InsufficientOverlap("image timestamps fall outside the state/control span")

    states = np.empty((len(t_img), 3))
    states[:, 0] = np.interp(t_img, ts, log.states[:, 0])
    states[:, 1] = np.interp(t_img, ts, log.states[:, 1])
    # successive headings joined along the shortest arc, then interpolated;
    # removing whole turns keeps an already continuous heading bit-exact
    phi = log.states[:, 2]
    turns = np.round(np.diff(phi) / (2 * np.pi))
    cont = phi - 2 * np.pi * np.concatenate([[0.0], np.cumsum(turns)])
    states[:, 2] = np.interp(t_img, ts, cont)

    held = np.searchsorted(tc, t_img + eps, side="right") - 1
    controls = log.controls[np.clip(held, 0, None)]
    return AlignedStream(t_img.copy(), states, controls, obs, log.episode_id)


@dataclass(frozen=True)
class LabelConfig:
    horizon: int = 20
    history_images: int = 2  # m + 1
    spacing_steps: int = 10  # n
    stride: int = 10
    dt: float = 0.1
    tau_cap: float = 5.0
    heading_weight: float = 0.0


def extract_samples(stream: AlignedStream, cfg: LabelConfig = LabelConfig(),
                    round_index: int = 0) -> list[ErrorSample]:
    H, n, m = cfg.horizon, cfg.spacing_steps, cfg.history_images - 1
    first = m * n
    n_valid = len(stream) - first - H
    if n_valid <= 0:
        return []
    if len(stream) > 1:
        spacing = np.median(np.diff(stream.times))
        if abs(spacing - cfg.dt) > 0.01 * cfg.dt:
            raise ValueError(f"stream spacing {spacing:.4f}s does not match dt={cfg.dt}")
    samples = []
    for k in range(n_valid // cfg.stride):
        t = first + k * cfg.stride
        actions = stream.controls[t:t + H]
        window = stream.states[t:t + H + 1]
        tau = min(model_error(window, actions, cfg.dt, cfg.heading_weight), cfg.tau_cap)
        history = ImageHistory(stream.observations[t - np.arange(m + 1) * n], n)
        samples.append(ErrorSample(history, actions.copy(), tau, window[0].copy(),
                                   stream.episode_id, float(stream.times[t]), round_index))
    return samples


def label_logs(logs, cfg: LabelConfig = LabelConfig(), round_index: int = 0,
               image_rate: float | None = None) -> Dataset:
    samples = []
    for log in logs:
        samples.extend(extract_samples(align(log, image_rate), cfg, round_index))
    return Dataset.from_samples(samples)
