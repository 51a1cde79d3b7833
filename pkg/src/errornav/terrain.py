"""Grid terrain world whose realized motion deviates from the canonical model.

Each cell carries a terrain class.  Deformable classes scale the commanded
forward speed (``drag``) and perturb the turn rate with Gaussian heading
noise; rigid classes stop the robot in place and latch it as stuck.  The
renderer produces a forward-facing trapezoidal view with one fixed colour
per class.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dynamics import State, step

FORMAT_NAME = "errornav-terrain"
FORMAT_VERSION = 1
OUT_OF_MAP_COLOR = (0.0, 0.0, 0.0)


class OutOfBounds(RuntimeError):
    pass


class NoValidGoal(RuntimeError):
    pass


@dataclass(frozen=True)
class TerrainClass:
    tag: str
    drag: float = 1.0
    rigid: bool = False
    heading_noise_std: float = 0.0
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not 0.0 <= self.drag <= 1.0:
            raise ValueError(f"{self.tag}: drag must lie in [0, 1]")
        if self.heading_noise_std < 0:
            raise ValueError(f"{self.tag}: heading_noise_std must be >= 0")
        if self.tag == "Free" and (self.drag != 1.0 or self.rigid):
            raise ValueError("Free terrain must have drag 1 and not be rigid")
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))


FREE = TerrainClass("Free", color=(0.80, 0.72, 0.52))
TALL_GRASS = TerrainClass("TallGrass", drag=0.6, color=(0.35, 0.70, 0.20))
SHRUB = TerrainClass("Shrub", drag=0.0, rigid=True, color=(0.05, 0.30, 0.08))
TREE = TerrainClass("Tree", drag=0.0, rigid=True, color=(0.40, 0.22, 0.08))
SLIP = TerrainClass("Slip", heading_noise_std=0.15, color=(0.80, 0.90, 1.00))
DEFAULT_CLASSES = (FREE, TALL_GRASS, SHRUB, TREE, SLIP)


@dataclass(frozen=True, eq=False)
class TerrainMap:
    """Row-major grid of class indices; row ``i`` spans ``y`` from
    ``origin[1] + i * resolution``, column ``j`` spans ``x`` likewise."""

    grid: np.ndarray  # (height, width) uint8 indices into ``classes``
    resolution: float
    origin: tuple = (0.0, 0.0)
    classes: tuple = DEFAULT_CLASSES

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=np.uint8)
        if grid.ndim != 2:
            raise ValueError("terrain grid must be 2-D")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if grid.size and grid.max() >= len(self.classes):
            raise ValueError("grid references an undefined terrain class")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def extent(self):
        """``(xmin, xmax, ymin, ymax)`` in world coordinates."""
        x0, y0 = self.origin
        return x0, x0 + self.width * self.resolution, y0, y0 + self.height * self.resolution

    def class_index(self, tag: str) -> int:
        for i, c in enumerate(self.classes):
            if c.tag == tag:
                return i
        raise KeyError(tag)

    def cell_of(self, x, y):
        col = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(int)
        row = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(int)
        return row, col

    def cell_center(self, row, col):
        return (self.origin[0] + (np.asarray(col) + 0.5) * self.resolution,
                self.origin[1] + (np.asarray(row) + 0.5) * self.resolution)

    def in_bounds(self, x, y) -> bool:
        row, col = self.cell_of(x, y)
        return bool(0 <= row < self.height and 0 <= col < self.width)

    def class_at(self, x, y) -> TerrainClass:
        row, col = self.cell_of(x, y)
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise OutOfBounds(f"({x:.3f}, {y:.3f}) lies outside the map")
        return self.classes[self.grid[row, col]]

    @property
    def rigid_mask(self) -> np.ndarray:
        return _rigid_mask(self)

    @property
    def palette(self) -> np.ndarray:
        """``(n_classes + 1, 3)`` colours; the last row is the out-of-map colour."""
        return np.array([c.color for c in self.classes] + [OUT_OF_MAP_COLOR])

    def fraction(self, tag: str) -> float:
        return float(np.mean(self.grid == self.class_index(tag)))

    # ------------------------------------------------------------ file IO

    def to_json(self) -> str:
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "width": self.width,
            "height": self.height,
            "resolution": self.resolution,
            "origin": list(self.origin),
            "classes": [
                {"tag": c.tag, "drag": c.drag, "rigid": c.rigid,
                 "heading_noise_std": c.heading_noise_std, "color": list(c.color)}
                for c in self.classes
            ],
            "grid_encoding": "base64-u8-rowmajor",
            "grid": base64.b64encode(self.grid.tobytes()).decode("ascii"),
        }
        return json.dumps(header, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TerrainMap":
        d = json.loads(text)
        if d.get("format") != FORMAT_NAME:
            raise ValueError("not a terrain map file")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported terrain map version {d.get('version')}")
        classes = tuple(TerrainClass(c["tag"], c["drag"], c["rigid"], c["heading_noise_std"],
                                     tuple(c["color"])) for c in d["classes"])
        raw = base64.b64decode(d["grid"])
        if len(raw) != d["width"] * d["height"]:
            raise ValueError("grid length does not match width * height")
        grid = np.frombuffer(raw, dtype=np.uint8).reshape(d["height"], d["width"])
        return cls(grid, d["resolution"], tuple(d["origin"]), classes)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TerrainMap":
        return cls.from_json(Path(path).read_text())


@lru_cache(maxsize=16)
def _rigid_mask(tmap: TerrainMap) -> np.ndarray:
    lut = np.array([c.rigid for c in tmap.classes])
    return lut[tmap.grid]


@lru_cache(maxsize=16)
def _clearance(tmap: TerrainMap) -> np.ndarray:
    """Distance (m) from each cell centre to the nearest rigid cell centre."""
    rigid = _rigid_mask(tmap)
    if not rigid.any():
        return np.full(rigid.shape, np.inf)
    return ndimage.distance_transform_edt(~rigid) * tmap.resolution


def uniform_map(width: int, height: int, resolution: float = 0.25, tag: str = "Free",
                origin=(0.0, 0.0), classes=DEFAULT_CLASSES) -> TerrainMap:
    idx = [c.tag for c in classes].index(tag)
    return TerrainMap(np.full((height, width), idx, np.uint8), resolution, origin, classes)


def generate_map(seed: int, width: int = 100, height: int = 100, resolution: float = 0.25,
                 densities: dict | None = None, blob_size: float = 1.5, border: bool = True,
                 classes=DEFAULT_CLASSES) -> TerrainMap:
    """Procedural map with blob-shaped patches covering the requested fractions.

    ``densities`` maps class tags to fractions of the interior (sum <= 1, the
    remainder is Free).  Each class gets a smoothed noise field and claims the
    highest-valued still-free cells, so fractions are met to within one cell.
    ``blob_size`` is the smoothing length in metres.  With ``border`` the
    outermost ring of cells is Tree.
    """
    densities = dict(densities or {})
    tags = [c.tag for c in classes]
    for tag, frac in densities.items():
        if tag not in tags or tag == "Free":
            raise ValueError(f"unknown or non-assignable terrain class {tag!r}")
        if frac < 0:
            raise ValueError(f"density for {tag} must be non-negative")
    if sum(densities.values()) > 1.0 + 1e-12:
        raise ValueError("terrain densities must sum to at most 1")

    rng = np.random.default_rng(seed)
    grid = np.full((height, width), tags.index("Free"), np.uint8)
    inner = (slice(1, -1), slice(1, -1)) if border else (slice(None), slice(None))
    free = np.zeros((height, width), bool)
    free[inner] = True
    n_inner = int(free.sum())
    sigma = max(blob_size / resolution, 1e-6)
    for tag in sorted(densities, key=tags.index):
        noise = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma,
                                        mode="wrap")
        want = int(round(densities[tag] * n_inner))
        if want == 0:
            continue
        cand = np.flatnonzero(free)
        order = np.argsort(-noise.reshape(-1)[cand], kind="stable")
        chosen = cand[order[:want]]
        grid.reshape(-1)[chosen] = tags.index(tag)
        free.reshape(-1)[chosen] = False
    if border:
        edge = np.ones((height, width), bool)
        edge[1:-1, 1:-1] = False
        grid[edge] = tags.index("Tree")
    return TerrainMap(grid, resolution, (0.0, 0.0), classes)


# ---------------------------------------------------------------- simulation

@dataclass
class SimState:
    robot: State
    rng: np.random.Generator
    stuck: bool = False
    clock: int = 0
    contact: tuple | None = field(default=None)  # rigid cell that pinned the robot

    @classmethod
    def start(cls, robot, seed) -> "SimState":
        return cls(State(*map(float, robot)), np.random.default_rng(seed))

    def reset(self, robot) -> None:
        self.robot = State(*map(float, robot))
        self.stuck = False
        self.contact = None


def realized_step(sim: SimState, u, tmap: TerrainMap, dt: float) -> SimState:
    """Advance the simulated robot one step under command ``u`` (in place)."""
    sim.clock += 1
    if sim.stuck:
        return sim
    cls = tmap.class_at(sim.robot.chi, sim.robot.y)
    v, omega = u
    eps = sim.rng.normal(0.0, cls.heading_noise_std) if cls.heading_noise_std > 0 else 0.0
    nxt = step(sim.robot, (cls.drag * v, omega + eps), dt)
    row, col = tmap.cell_of(nxt.chi, nxt.y)
    if not (0 <= row < tmap.height and 0 <= col < tmap.width):
        raise OutOfBounds(f"robot left the map at ({nxt.chi:.3f}, {nxt.y:.3f})")
    if tmap.classes[tmap.grid[row, col]].rigid:
        sim.stuck = True
        sim.contact = (int(row), int(col))
    else:
        sim.robot = State(float(nxt.chi), float(nxt.y), float(nxt.phi))
    return sim


def relocate(tmap: TerrainMap, position, min_clearance: float = 1.0):
    """Centre of the nearest Free cell at least ``min_clearance`` from rigid terrain.

    Falls back to any non-rigid cell, then to the best-cleared cell, so a
    position is always returned.
    """
    clear = _clearance(tmap)
    free_idx = tmap.class_index("Free") if "Free" in [c.tag for c in tmap.classes] else None
    ok = clear >= min_clearance
    cands = ok & (tmap.grid == free_idx) if free_idx is not None else ok
    if not cands.any():
        cands = ok & ~tmap.rigid_mask
    if not cands.any():
        cands = clear == clear.max()
    rows, cols = np.nonzero(cands)
    cx, cy = tmap.cell_center(rows, cols)
    d2 = (cx - position[0]) ** 2 + (cy - position[1]) ** 2
    k = int(np.argmin(d2))  # ties broken by row-major order
    return float(cx[k]), float(cy[k])


def sample_goal(tmap: TerrainMap, robot, rng: np.random.Generator, min_dist: float,
                max_dist: float, region=None):
    """Uniformly pick a non-rigid cell centre at distance ``[min_dist, max_dist]``.

    ``region`` optionally restricts goals to ``(xmin, xmax, ymin, ymax)``.
    """
    rows, cols = np.nonzero(~tmap.rigid_mask)
    cx, cy = tmap.cell_center(rows, cols)
    d = np.hypot(cx - robot[0], cy - robot[1])
    ok = (d >= min_dist) & (d <= max_dist)
    if region is not None:
        xmin, xmax, ymin, ymax = region
        ok &= (cx >= xmin) & (cx <= xmax) & (cy >= ymin) & (cy <= ymax)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        raise NoValidGoal(f"no traversable cell between {min_dist} and {max_dist} m")
    k = idx[rng.integers(idx.size)]
    return float(cx[k]), float(cy[k])


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class ObservationConfig:
    height: int = 32
    width: int = 32
    fov_deg: float = 90.0
    range_m: float = 4.0
    near_m: float = 0.1
    pose_precision: float = 1e-6


@lru_cache(maxsize=8)
def _view_grid(cfg: ObservationConfig):
    """Forward and lateral offsets (robot frame) of every pixel centre.

    Row 0 is nearest; column 0 is the leftmost (positive lateral) ray.
    """
    fwd = cfg.near_m + (np.arange(cfg.height) + 0.5) * (cfg.range_m - cfg.near_m) / cfg.height
    frac = 1.0 - 2.0 * (np.arange(cfg.width) + 0.5) / cfg.width
    lat = fwd[:, None] * np.tan(np.radians(cfg.fov_deg) / 2) * frac[None, :]
    return np.broadcast_to(fwd[:, None], lat.shape).copy(), lat


def pixel_range(cfg: ObservationConfig = ObservationConfig()) -> np.ndarray:
    """Forward distance (m) seen by each image row."""
    return _view_grid(cfg)[0][:, 0].copy()


def render_observation(robot, tmap: TerrainMap, cfg: ObservationConfig = ObservationConfig()):
    """Deterministic ego view as a ``(3, height, width)`` float32 image in [0, 1]."""
    q = cfg.pose_precision
    x, y, phi = (np.round(np.asarray(robot[:3], float) / q) * q) if q > 0 else robot[:3]
    fwd, lat = _view_grid(cfg)
    c, s = np.cos(phi), np.sin(phi)
    wx = x + fwd * c - lat * s
    wy = y + fwd * s + lat * c
    row, col = tmap.cell_of(wx, wy)
    inside = (row >= 0) & (row < tmap.height) & (col >= 0) & (col < tmap.width)
    idx = np.full(row.shape, len(tmap.classes))
    idx[inside] = tmap.grid[row[inside], col[inside]]
    img = tmap.palette[idx]  # (h, w, 3)
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def with_classes(tmap: TerrainMap, **overrides) -> TerrainMap:
    """Copy of ``tmap`` with class parameters replaced, e.g. ``Slip={"heading_noise_std": 0}``."""
    classes = tuple(replace(c, **overrides.get(c.tag, {})) for c in tmap.classes)
    return TerrainMap(tmap.grid, tmap.resolution, tmap.origin, classes)
