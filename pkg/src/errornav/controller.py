"""Goal/traversability rewards and the sampling-based MPPI navigation loop."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import as_actions, rollout, rollout_batch
from .labeling import EpisodeLog
from .network import ArchConfig, predict_many
from .terrain import ObservationConfig, OutOfBounds, SimState, realized_step, render_observation

GOAL_EPS = 1e-9


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta_bias: float = 0.1
    sigma: float = 10.0
    v_max: float = 0.8
    horizon: int = 20
    dt: float = 0.1
    exponent_cap: float = 50.0
    verbatim_penalty: bool = False  # -exp(.) - 1 instead of -(exp(.) - 1)

    def __post_init__(self):
        if not (self.v_max > 0 and self.horizon >= 1 and self.dt > 0 and self.sigma > 0):
            raise ValueError("reward config needs v_max > 0, horizon >= 1, dt > 0, sigma > 0")

    @property
    def eta(self) -> float:
        return 1.0 / (self.v_max * self.horizon * self.dt)


@dataclass(frozen=True)
class MPPIConfig:
    num_samples: int = 128
    sampling_cov: tuple = ((0.25, 0.0), (0.0, 0.25))
    smoothing: float = 0.5
    reward_weight: float = 50.0
    omega_max: float = 1.5
    seed: int = 0

    def __post_init__(self):
        cov = np.asarray(self.sampling_cov, float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise ValueError("sampling_cov must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("sampling_cov must be positive semi-definite")
        if self.num_samples < 1 or not 0 <= self.smoothing <= 1:
            raise ValueError("num_samples >= 1 and smoothing in [0, 1] required")
        object.__setattr__(self, "sampling_cov", tuple(map(tuple, cov.tolist())))

    @property
    def noise_factor(self) -> np.ndarray:
        """Symmetric square root of the sampling covariance (valid when singular)."""
        w, V = np.linalg.eigh(np.asarray(self.sampling_cov))
        return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


# ---------------------------------------------------------------- rewards

def goal_reward_from_positions(pos: np.ndarray, goal, alpha: float = 1.0) -> np.ndarray:
    """Progress toward ``goal`` along ``(..., H+1, 2)`` positions.

    Once a position lands on the goal the direction is undefined and all
    later summands are zero.
    """
    to_goal = np.asarray(goal, float) - pos[..., :-1, :]
    dist = np.hypot(to_goal[..., 0], to_goal[..., 1])
    live = np.cumsum(dist <= GOAL_EPS, axis=-1) == 0
    safe = np.where(live, dist, 1.0)
    step = pos[..., 1:, :] - pos[..., :-1, :]
    proj = (step[..., 0] * to_goal[..., 0] + step[..., 1] * to_goal[..., 1]) / safe
    return alpha * np.sum(np.where(live, proj, 0.0), axis=-1)


def goal_reward(x0, u, goal, cfg: RewardConfig = RewardConfig()) -> float:
    traj = rollout(x0, as_actions(u), cfg.dt)
    return float(goal_reward_from_positions(traj.positions, goal, cfg.alpha))


def normalize_goal_reward(r, cfg: RewardConfig):
    return np.clip(cfg.eta * np.asarray(r, float), 0.0, 1.0)


def normalized_goal_reward(x0, u, goal, cfg: RewardConfig = RewardConfig()) -> float:
    return float(normalize_goal_reward(goal_reward(x0, u, goal, cfg), cfg))


def traversability_reward(tau_hat, cfg: RewardConfig = RewardConfig()):
    """Zero below the bias, exponential penalty above it (continuous at the bias)."""
    z = cfg.eta * np.asarray(tau_hat, float) - cfg.beta_bias
    e = np.exp(np.minimum(cfg.sigma * z, cfg.exponent_cap))
    pen = -e - 1.0 if cfg.verbatim_penalty else -(e - 1.0)
    out = np.where(z <= 0, 0.0, pen)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- predictors

class ZeroPredictor:
    """Predicts no model error for anything."""

    def __call__(self, history, action_batch):
        return np.zeros(len(action_batch))


class ConstantPredictor:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, history, action_batch):
        return np.full(len(action_batch), self.value)


class NetworkPredictor:
    """Frozen regressor; scoring runs in float32 unless ``dtype`` says otherwise."""

    def __init__(self, params: dict, arch: ArchConfig, dtype=np.float32):
        self.params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
        self.arch = arch

    def __call__(self, history, action_batch):
        return predict_many(self.params, history, action_batch, self.arch).astype(float)


def total_reward(x0, history, u, goal, predictor, cfg: RewardConfig = RewardConfig()) -> float:
    u = as_actions(u)
    tau_hat = predictor(history, u[None])[0]
    return normalized_goal_reward(x0, u, goal, cfg) + traversability_reward(tau_hat, cfg)


def score_sequences(x0, history, seqs, goal, predictor, cfg: RewardConfig):
    """Total reward and predicted model error for ``(K, H, 2)`` sequences."""
    states = rollout_batch(x0, seqs, cfg.dt)
    rg = normalize_goal_reward(goal_reward_from_positions(states[..., :2], goal, cfg.alpha), cfg)
    tau_hat = np.asarray(predictor(history, seqs), float)
    return rg + traversability_reward(tau_hat, cfg), tau_hat


# ---------------------------------------------------------------- MPPI

@dataclass
class StepDiagnostics:
    rewards: np.ndarray  # (K,)
    weights: np.ndarray  # (K,)
    plan: np.ndarray  # (H, 2) reward-weighted average before shifting
    plan_tau_hat: float
    executed: tuple
    samples: np.ndarray | None = None  # (K, H, 2) when requested


def sample_sequences(nominal, cfg: MPPIConfig, v_max: float, rng) -> np.ndarray:
    nominal = np.asarray(nominal, float)
    H = len(nominal)
    eps = rng.standard_normal((cfg.num_samples, H, 2)) @ cfg.noise_factor.T
    b = cfg.smoothing
    seqs = np.empty((cfg.num_samples, H, 2))
    prev = np.broadcast_to(nominal[0], (cfg.num_samples, 2))
    for t in range(H):
        prev = b * (nominal[t] + eps[:, t]) + (1.0 - b) * prev
        seqs[:, t] = prev
    seqs[..., 0] = np.clip(seqs[..., 0], 0.0, v_max)
    seqs[..., 1] = np.clip(seqs[..., 1], -cfg.omega_max, cfg.omega_max)
    return seqs


def softmax_weights(rewards, gamma: float) -> np.ndarray:
    r = np.asarray(rewards, float)
    w = np.exp(gamma * (r - r.max()))
    return w / w.sum()


def mppi_step(nominal, x0, history, goal, predictor, reward_cfg: RewardConfig,
              mppi_cfg: MPPIConfig, rng, keep_samples: bool = False):
    """One sample/score/average cycle.

    Returns ``(executed, next_nominal, diagnostics)`` where ``next_nominal``
    is the averaged plan shifted left one step with its last action repeated.
    """
    nominal = as_actions(nominal, reward_cfg.horizon)
    seqs = sample_sequences(nominal, mppi_cfg, reward_cfg.v_max, rng)
    rewards, tau_hat = score_sequences(x0, history, seqs, goal, predictor, reward_cfg)
    w = softmax_weights(rewards, mppi_cfg.reward_weight)
    # averaging offsets from one sample keeps identical samples exact
    plan = seqs[0] + np.tensordot(w, seqs - seqs[0], axes=1)
    executed = (float(plan[0, 0]), float(plan[0, 1]))
    shifted = np.concatenate([plan[1:], plan[-1:]])
    plan_tau = float(np.asarray(predictor(history, plan[None]))[0])
    diag = StepDiagnostics(rewards, w, plan, plan_tau, executed, seqs if keep_samples else None)
    return executed, shifted, diag


# ---------------------------------------------------------------- navigation

class Outcome(str, enum.Enum):
    REACHED = "ReachedGoal"
    COLLISION = "Collision"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class NavConfig:
    goal_tolerance: float = 0.5
    max_steps: int = 600  # 60 s at dt = 0.1
    history_images: int = 2  # m + 1
    spacing_steps: int = 10  # n
    collision_tail_steps: int = 20  # keep commanding while pinned so windows get labels
    observation: ObservationConfig = ObservationConfig()
    odometry_noise_std: float = 0.0
    keep_samples: bool = False


@dataclass
class NavResult:
    outcome: Outcome
    log: EpisodeLog
    steps: int
    diagnostics: list = field(default_factory=list)
    sim: SimState | None = None


def initial_nominal(robot, goal, reward_cfg: RewardConfig, mppi_cfg: MPPIConfig) -> np.ndarray:
    """Constant arc that turns toward the goal within about one second.

    With the goal behind the robot no sample makes positive progress, the
    clipped goal reward is zero everywhere and the weights are uniform, so
    the starting nominal must already point the search the right way.
    """
    bearing = np.arctan2(goal[1] - robot[1], goal[0] - robot[0]) - robot[2]
    err = float(np.angle(np.exp(1j * bearing)))
    omega = float(np.clip(err, -mppi_cfg.omega_max, mppi_cfg.omega_max))
    v = 0.5 * reward_cfg.v_max if abs(err) < np.pi / 2 else 0.1 * reward_cfg.v_max
    return np.tile([v, omega], (reward_cfg.horizon, 1))


class HistoryBuffer:
    """Ring of recent observations returning ``m+1`` images ``n`` steps apart.

    Before enough frames exist the oldest available frame is repeated.
    """

    def __init__(self, history_images: int, spacing: int):
        self.m1, self.n = history_images, spacing
        self.frames = deque(maxlen=(history_images - 1) * spacing + 1)

    def push(self, img) -> None:
        self.frames.append(img)

    def stack(self) -> np.ndarray:
        last = len(self.frames) - 1
        idx = [max(last - k * self.n, 0) for k in range(self.m1)]
        return np.stack([self.frames[i] for i in idx])


def navigate(start, goal, tmap, predictor, reward_cfg: RewardConfig = RewardConfig(),
             mppi_cfg: MPPIConfig = MPPIConfig(), nav_cfg: NavConfig = NavConfig(),
             sim: SimState | None = None, rng=None, episode_id: str = "ep0",
             t0: float = 0.0) -> NavResult:
    """Drive toward ``goal`` with MPPI until reached, stuck, or out of steps.

    ``sim`` lets a caller continue an existing simulation (its robot pose is
    used instead of ``start``); otherwise a fresh one is seeded from
    ``mppi_cfg.seed``.  Every stream in the returned log is sampled at the
    control rate.
    """
    if sim is None:
        sim = SimState.start(start, mppi_cfg.seed + 1)
    rng = rng if rng is not None else np.random.default_rng(mppi_cfg.seed)
    dt = reward_cfg.dt
    goal = (float(goal[0]), float(goal[1]))
    buf = HistoryBuffer(nav_cfg.history_images, nav_cfg.spacing_steps)
    nominal = initial_nominal(sim.robot, goal, reward_cfg, mppi_cfg)
    times, states, controls, images, diags = [], [], [], [], []
    outcome = Outcome.TIMEOUT
    stuck_time = None
    tail_left = None

    def measured():
        s = np.asarray(sim.robot, float)
        if nav_cfg.odometry_noise_std > 0:
            s = s + sim.rng.normal(0, nav_cfg.odometry_noise_std, 3) * (1, 1, 0)
        return s

    k = 0
    while True:
        img = render_observation(sim.robot, tmap, nav_cfg.observation)
        buf.push(img)
        here = np.asarray(sim.robot[:2])
        if tail_left is None and np.hypot(*(here - goal)) <= nav_cfg.goal_tolerance:
            outcome = Outcome.REACHED
            break
        if tail_left == 0 or (tail_left is None and k >= nav_cfg.max_steps):
            break
        executed, nominal, diag = mppi_step(nominal, tuple(sim.robot), buf.stack(), goal,
                                            predictor, reward_cfg, mppi_cfg, rng,
                                            nav_cfg.keep_samples)
        times.append(t0 + k * dt)
        states.append(measured())
        controls.append(executed)
        images.append(img)
        diags.append(diag)
        try:
            realized_step(sim, executed, tmap, dt)
        except OutOfBounds:
            sim.stuck = True
        k += 1
        if tail_left is not None:
            tail_left -= 1
        elif sim.stuck:
            outcome = Outcome.COLLISION
            stuck_time = t0 + k * dt
            tail_left = nav_cfg.collision_tail_steps
    # final record: the robot stops
    times.append(t0 + k * dt)
    states.append(measured())
    controls.append((0.0, 0.0))
    images.append(img)
    log = EpisodeLog(np.array(times), np.array(states), np.array(times), np.array(controls),
                     np.array(times), np.array(images), goal, episode_id, outcome.value,
                     stuck_time)
    return NavResult(outcome, log, k, diags, sim)

