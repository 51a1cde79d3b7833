"""On-policy collect/retrain campaign and waypoint evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .controller import (MPPIConfig, NavConfig, NavResult, NetworkPredictor, Outcome,
                         RewardConfig, navigate)
from .dynamics import wrap_angle
from .labeling import Dataset, EpisodeLog, LabelConfig, label_logs
from .network import ArchConfig, init_params
from .terrain import (ObservationConfig, OutOfBounds, SimState, TerrainMap, generate_map,
                      realized_step, relocate, render_observation, sample_goal)
from .training import TrainConfig, save_checkpoint, train

log = logging.getLogger(__name__)


class CampaignError(RuntimeError):
    pass


@dataclass(frozen=True)
class MapSpec:
    seed: int = 0
    width: int = 208  # cells
    height: int = 96
    resolution: float = 0.25
    densities: tuple = (("TallGrass", 0.15), ("Shrub", 0.06), ("Slip", 0.08))
    blob_size: float = 1.0

    def build(self) -> TerrainMap:
        return generate_map(self.seed, self.width, self.height, self.resolution,
                            dict(self.densities), self.blob_size)


@dataclass(frozen=True)
class BootstrapPolicy:
    """Scripted wander: random speed/turn segments with periodic charges at
    the nearest visible obstacle."""

    segment_s: tuple = (1.0, 3.0)
    v_range: tuple = (0.3, 0.8)
    omega_std: float = 0.6
    charge_prob: float = 0.35
    charge_range: float = 4.0
    charge_fov_deg: float = 120.0


@dataclass(frozen=True)
class CampaignConfig:
    map: MapSpec = MapSpec()
    train_region: tuple = (1.0, 25.0, 1.0, 23.0)  # xmin, xmax, ymin, ymax
    bootstrap: BootstrapPolicy = BootstrapPolicy()
    bootstrap_minutes: float = 15.0
    rounds: int = 5
    minutes_per_round: float = 3.0
    goal_annulus: tuple = (3.0, 8.0)
    goal_timeout_s: float = 60.0
    reset_clearance: float = 1.0
    label: LabelConfig = LabelConfig(stride=2)
    train: TrainConfig = TrainConfig()
    arch: ArchConfig = ArchConfig()
    reward: RewardConfig = RewardConfig()
    mppi: MPPIConfig = MPPIConfig()
    nav: NavConfig = NavConfig()
    paired_rounds: bool = True  # common random numbers across on-policy rounds
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.minutes_per_round <= 0 or self.bootstrap_minutes <= 0:
            raise ValueError("collection durations must be positive")
        lo, hi = self.goal_annulus
        if not 0 <= lo <= hi:
            raise ValueError("goal_annulus must satisfy 0 <= min <= max")
        obs, a = self.nav.observation, self.arch
        checks = {
            "arch.obs_height/obs_width vs nav.observation": (obs.height, obs.width) == (a.obs_height, a.obs_width),
            "arch.history_len vs nav.history_images": a.history_len == self.nav.history_images,
            "label.history_images vs nav.history_images": self.label.history_images == self.nav.history_images,
            "label.spacing_steps vs nav.spacing_steps": self.label.spacing_steps == self.nav.spacing_steps,
            "arch.horizon vs reward.horizon": a.horizon == self.reward.horizon,
            "label.horizon vs reward.horizon": self.label.horizon == self.reward.horizon,
            "label.dt vs reward.dt": self.label.dt == self.reward.dt,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError("inconsistent settings: " + "; ".join(bad))

    @property
    def dt(self) -> float:
        return self.reward.dt

    def steps_for(self, minutes: float) -> int:
        return int(round(minutes * 60.0 / self.dt))


@dataclass
class RoundReport:
    round: int
    minutes: float
    goals_attempted: int
    goals_reached: int
    collisions: int
    timeouts: int
    dataset_size: int
    best_val_loss: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class CampaignResult:
    reports: list
    params: dict
    dataset: Dataset
    tmap: TerrainMap
    cfg: CampaignConfig
    checkpoint: Path | None = None
    logs: list = field(default_factory=list)  # per round, list of EpisodeLog


# ---------------------------------------------------------------- bootstrap

def _start_pose(tmap, cfg: CampaignConfig, rng):
    xmin, xmax, ymin, ymax = cfg.train_region
    pos = relocate(tmap, ((xmin + xmax) / 2, (ymin + ymax) / 2), cfg.reset_clearance)
    return (pos[0], pos[1], float(rng.uniform(-np.pi, np.pi)))


def _nearest_obstacle_bearing(tmap, robot, policy: BootstrapPolicy):
    rows, cols = np.nonzero(tmap.rigid_mask)
    cx, cy = tmap.cell_center(rows, cols)
    dx, dy = cx - robot[0], cy - robot[1]
    d = np.hypot(dx, dy)
    bearing = wrap_angle(np.arctan2(dy, dx) - robot[2])
    ok = (d < policy.charge_range) & (np.abs(bearing) < np.radians(policy.charge_fov_deg) / 2)
    if not ok.any():
        return None
    k = np.flatnonzero(ok)[np.argmin(d[ok])]
    return float(np.arctan2(dy[k], dx[k]))


def bootstrap_collect(tmap: TerrainMap, cfg: CampaignConfig, seed: int | None = None):
    """Drive the scripted policy for ``cfg.bootstrap_minutes`` and return the logs.

    A collision ends the episode after a short tail of continued commands;
    the robot is then relocated and a fresh episode begins.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 17])
    pol = cfg.bootstrap
    dt = cfg.dt
    total = cfg.steps_for(cfg.bootstrap_minutes)
    sim = SimState.start(_start_pose(tmap, cfg, rng), [seed, 18])
    xmin, xmax, ymin, ymax = cfg.train_region
    center = np.array([(xmin + xmax) / 2, (ymin + ymax) / 2])
    logs = []
    k = 0
    episode = 0

    while k < total:
        times, states, controls, images = [], [], [], []
        seg_left, v, omega, mode = 0, 0.0, 0.0, "wander"
        tail = None
        outcome = "Timeout"
        stuck_time = None
        while k < total and tail != 0:
            r = sim.robot
            if seg_left <= 0:
                seg_left = int(rng.uniform(*pol.segment_s) / dt)
                v = rng.uniform(*pol.v_range)
                omega = float(np.clip(rng.normal(0.0, pol.omega_std), -cfg.mppi.omega_max,
                                      cfg.mppi.omega_max))
                mode = "charge" if rng.random() < pol.charge_prob else "wander"
            heading_target = None
            if not (xmin <= r.chi <= xmax and ymin <= r.y <= ymax):
                heading_target = float(np.arctan2(center[1] - r.y, center[0] - r.chi))
            elif mode == "charge":
                heading_target = _nearest_obstacle_bearing(tmap, r, pol)
            if heading_target is not None:
                err = wrap_angle(heading_target - r.phi)
                cmd = (v, float(np.clip(2.0 * err, -cfg.mppi.omega_max, cfg.mppi.omega_max)))
            else:
                cmd = (v, omega)
            times.append(k * dt)
            states.append(np.asarray(r, float))
            controls.append(cmd)
            images.append(render_observation(r, tmap, cfg.nav.observation))
            try:
                realized_step(sim, cmd, tmap, dt)
            except OutOfBounds:
                sim.stuck = True
            k += 1
            seg_left -= 1
            if tail is not None:
                tail -= 1
            elif sim.stuck:
                outcome, stuck_time, tail = "Collision", k * dt, cfg.nav.collision_tail_steps
        times.append(k * dt)
        states.append(np.asarray(sim.robot, float))
        controls.append((0.0, 0.0))
        images.append(render_observation(sim.robot, tmap, cfg.nav.observation))
        logs.append(EpisodeLog(np.array(times), np.array(states), np.array(times),
                               np.array(controls), np.array(times), np.array(images),
                               episode_id=f"r0-boot{episode:03d}", outcome=outcome,
                               stuck_time=stuck_time))
        episode += 1
        if sim.stuck:
            pos = relocate(tmap, sim.robot[:2], cfg.reset_clearance)
            sim.reset((pos[0], pos[1], float(rng.uniform(-np.pi, np.pi))))
        # the step after the final record starts a new episode on a new clock tick
        k += 1
    return logs


# ---------------------------------------------------------------- campaign

def collect_on_policy(tmap, params, cfg: CampaignConfig, round_index: int, sim: SimState,
                      rng) -> tuple[list, RoundReport]:
    """Navigate to random goals for one round's worth of simulated time."""
    predictor = NetworkPredictor(params, cfg.arch)
    budget = cfg.steps_for(cfg.minutes_per_round)
    timeout = int(round(cfg.goal_timeout_s / cfg.dt))
    used = 0
    logs = []
    attempted = reached = collisions = timeouts = 0
    while used < budget:
        goal = sample_goal(tmap, sim.robot, rng, *cfg.goal_annulus, region=cfg.train_region)
        nav = replace(cfg.nav, max_steps=min(timeout, budget - used))
        mppi = replace(cfg.mppi, seed=int(rng.integers(2**31)))
        res = navigate(sim.robot, goal, tmap, predictor, cfg.reward, mppi, nav, sim=sim,
                       episode_id=f"r{round_index}-ep{attempted:03d}", t0=used * cfg.dt)
        used += res.steps + 1
        logs.append(res.log)
        if res.outcome is Outcome.TIMEOUT and nav.max_steps < timeout:
            break  # cut short by the round budget, not a goal timeout
        attempted += 1
        if res.outcome is Outcome.REACHED:
            reached += 1
        elif res.outcome is Outcome.COLLISION:
            collisions += 1
            pos = relocate(tmap, sim.robot[:2], cfg.reset_clearance)
            sim.reset((pos[0], pos[1], sim.robot.phi))
        else:
            timeouts += 1
    report = RoundReport(round_index, used * cfg.dt / 60.0, attempted, reached, collisions,
                         timeouts, 0, float("nan"))
    return logs, report


def _write_round(out_dir, k, logs, dataset, params, cfg, report, meta):
    if out_dir is None:
        return None
    rdir = Path(out_dir) / "rounds" / str(k)
    (rdir / "logs").mkdir(parents=True, exist_ok=True)
    for lg in logs:
        lg.save(rdir / "logs" / f"{lg.episode_id}.npz")
    dataset.save(rdir / "dataset")
    ckpt = rdir / "checkpoint"
    save_checkpoint(ckpt, params, cfg.arch, meta)
    (rdir / "report.json").write_text(report.to_json())
    return ckpt


def run_campaign(cfg: CampaignConfig, out_dir=None, tmap: TerrainMap | None = None,
                 keep_logs: bool = False) -> CampaignResult:
    """Bootstrap, train from scratch, then alternate on-policy rounds and
    warm-started retraining.  Returns one report per on-policy round."""
    tmap = tmap if tmap is not None else cfg.map.build()
    rng = np.random.default_rng([cfg.seed, 29])
    boot_logs = bootstrap_collect(tmap, cfg)
    dataset = label_logs(boot_logs, cfg.label, round_index=0)
    if dataset.N == 0:
        raise CampaignError("bootstrap collection produced no labeled samples")
    tcfg = replace(cfg.train, seed=cfg.seed)
    res = train(init_params(cfg.arch, cfg.seed), dataset, tcfg, cfg.arch)
    params = res.params
    log.info("bootstrap: %d samples, best val %.4f", dataset.N, res.best_val_loss)
    boot_report = RoundReport(0, cfg.bootstrap_minutes, 0, 0,
                              sum(lg.outcome == "Collision" for lg in boot_logs), 0,
                              dataset.N, res.best_val_loss)
    ckpt = _write_round(out_dir, 0, boot_logs, dataset, params, cfg, boot_report,
                        {"round": 0, "val_losses": res.val_losses})
    all_logs = [boot_logs] if keep_logs else []

    start = _start_pose(tmap, cfg, rng)
    sim = SimState.start(start, [cfg.seed, 31])
    reports = []
    for k in range(1, cfg.rounds + 1):
        if cfg.paired_rounds:
            # same start, goal stream and noise every round: rounds differ only by the model
            sim = SimState.start(start, [cfg.seed, 31])
            rng = np.random.default_rng([cfg.seed, 37])
        logs, report = collect_on_policy(tmap, params, cfg, k, sim, rng)
        new = label_logs(logs, cfg.label, round_index=k)
        if new.N == 0:
            raise CampaignError(f"round {k} produced no labeled samples "
                                f"({len(logs)} episodes, {report.minutes:.2f} min)")
        dataset = dataset.merge(new)
        res = train(params, dataset, replace(tcfg, seed=cfg.seed + k), cfg.arch)
        params = res.params
        report.dataset_size = dataset.N
        report.best_val_loss = res.best_val_loss
        reports.append(report)
        log.info("round %d: %s", k, report)
        ckpt = _write_round(out_dir, k, logs, new, params, cfg, report,
                            {"round": k, "val_losses": res.val_losses})
        if keep_logs:
            all_logs.append(logs)
    return CampaignResult(reports, params, dataset, tmap, cfg, ckpt, all_logs)


def extend_campaign(params, dataset: Dataset, extra_logs, cfg: CampaignConfig,
                    round_index: int):
    """One augmentation round: label ``extra_logs``, merge, warm-start retrain."""
    new = label_logs(extra_logs, cfg.label, round_index=round_index)
    merged = dataset.merge(new)
    res = train(params, merged, replace(cfg.train, seed=cfg.seed + round_index), cfg.arch)
    return res.params, merged, res


# ---------------------------------------------------------------- evaluation

@dataclass
class WaypointResult:
    success: bool
    trajectory: np.ndarray  # (T, 3) realized states after the start
    legs: list  # Outcome per waypoint, None for legs never attempted
    logs: list
    results: list = field(default_factory=list)


def evaluate_waypoints(predictor, tmap: TerrainMap, start, waypoints,
                       reward_cfg: RewardConfig = RewardConfig(),
                       mppi_cfg: MPPIConfig = MPPIConfig(), nav_cfg: NavConfig = NavConfig(),
                       timeout_s: float = 60.0, episode_prefix: str = "eval") -> WaypointResult:
    """Visit ``waypoints`` in order with a frozen predictor; stop at the first failure."""
    if len(waypoints) == 0:
        raise ValueError("waypoints must be non-empty")
    sim = SimState.start(start, mppi_cfg.seed + 1)
    nav_cfg = replace(nav_cfg, max_steps=int(round(timeout_s / reward_cfg.dt)))
    legs = [None] * len(waypoints)
    traj, logs, results = [], [], []
    t0 = 0.0
    for i, wp in enumerate(waypoints):
        res: NavResult = navigate(sim.robot, wp, tmap, predictor, reward_cfg,
                                  replace(mppi_cfg, seed=mppi_cfg.seed + 7 * i), nav_cfg,
                                  sim=sim, episode_id=f"{episode_prefix}-leg{i}", t0=t0)
        legs[i] = res.outcome
        logs.append(res.log)
        results.append(res)
        traj.append(res.log.states[1:])
        t0 += (res.steps + 1) * reward_cfg.dt
        if res.outcome is not Outcome.REACHED:
            break
    trajectory = np.concatenate(traj) if traj else np.zeros((0, 3))
    success = all(o is Outcome.REACHED for o in legs)
    return WaypointResult(success, trajectory, legs, logs, results)


# paper-style five waypoint course, metres relative to the start pose
REFERENCE_COURSE = ((-3.6, 15.4), (10.3, 14.2), (25.7, 14.0), (23.7, 3.89), (34.7, -4.9))


def course_length(start, waypoints) -> float:
    pts = np.vstack([np.asarray(start, float)[:2], np.asarray(waypoints, float)])
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def scaled_course(tmap: TerrainMap, start_xy, scale: float = 0.6, clearance: float = 0.75):
    """The reference course scaled about ``start_xy`` with each waypoint moved
    to the nearest cell at least ``clearance`` metres from rigid terrain."""
    pts = []
    for dx, dy in REFERENCE_COURSE:
        pts.append(relocate(tmap, (start_xy[0] + scale * dx, start_xy[1] + scale * dy),
                            clearance))
    return pts


@dataclass(frozen=True)
class CourseSpec:
    """Evaluation course.  An empty ``waypoints`` means the reference course
    scaled by ``scale`` about the start position."""

    start: tuple = (28.5, 8.0, 0.0)
    waypoints: tuple = ()
    scale: float = 0.6
    clearance: float = 0.75
    timeout_s: float = 60.0

    def __post_init__(self):
        if len(self.start) != 3:
            raise ValueError("start must be (x, y, heading)")
        if self.scale <= 0 or self.timeout_s <= 0:
            raise ValueError("scale and timeout_s must be positive")

    def resolve(self, tmap: TerrainMap) -> tuple:
        """Start pose moved clear of rigid terrain, and the waypoint list."""
        x, y = relocate(tmap, self.start[:2], self.clearance)
        start = (float(x), float(y), float(self.start[2]))
        if self.waypoints:
            return start, [tuple(map(float, w)) for w in self.waypoints]
        return start, scaled_course(tmap, start[:2], self.scale, self.clearance)
