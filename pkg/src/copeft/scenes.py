"""Synthetic multi-agent BEV world generator and dataset persistence.

Scenes hold axis-aligned boxes plus per-agent point observations rasterized
onto a metric grid: channel 0 carries point counts, channel 1 the nearest
point range normalised by the sensor range. Two shipped presets differ in
noise, clutter, object size, and density, which is the controlled stand-in
for a train/deploy distribution shift.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

DATASET_MAGIC = "COPEFT-DS"
DATASET_VERSION = 1
_MAX_REJECTION_ATTEMPTS = 10_000


@dataclass(frozen=True)
class DomainConfig:
    """World, sensor, and nuisance parameters for one data distribution."""

    x_min: float = -16.0
    x_max: float = 16.0
    y_min: float = -32.0
    y_max: float = 32.0
    cell_m: float = 1.0
    object_rate: float = 10.0       # Poisson mean of the box count
    size_mean_w: float = 2.0
    size_std_w: float = 0.3
    size_mean_l: float = 4.5
    size_std_l: float = 0.5
    n_agents: int = 3
    placement: str = "ego_origin_others_uniform"
    sensor_range: float = 40.0
    points_per_edge: int = 6
    noise_std: float = 0.05
    miss_slope: float = 0.012       # P(miss) = min(1, slope * distance)
    clutter_rate: float = 0.001     # Bernoulli clutter points per cell
    seed: int = 0

    def __post_init__(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min or self.cell_m <= 0:
            raise ConfigError("world extent must be positive")
        for name in ("object_rate", "size_std_w", "size_std_l", "noise_std",
                     "miss_slope", "clutter_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.n_agents < 1:
            raise ConfigError("need at least one agent")
        if self.placement != "ego_origin_others_uniform":
            raise ConfigError(f"unknown placement rule '{self.placement}'")
        for span in (self.x_max - self.x_min, self.y_max - self.y_min):
            cells = span / self.cell_m
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigError(f"cell size {self.cell_m} does not divide extent {span}")

    @property
    def grid_h(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_m))

    @property
    def grid_w(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_m))


DOMAIN_A = DomainConfig()
DOMAIN_B = replace(
    DOMAIN_A,
    noise_std=0.25,
    clutter_rate=0.01,
    size_mean_w=DOMAIN_A.size_mean_w * 1.25,
    size_mean_l=DOMAIN_A.size_mean_l * 1.25,
    object_rate=DOMAIN_A.object_rate * 1.5,
)

PRESETS = {"domain_a": DOMAIN_A, "domain_b": DOMAIN_B}


@dataclass
class SceneSample:
    """Ground truth plus per-agent rasterized observations."""

    boxes: np.ndarray   # [K, 4] cx, cy, w, l in metres
    agents: np.ndarray  # [N, 2] x, y
    grids: np.ndarray   # [N, 2, H0, W0]


def _boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    return (abs(a[0] - b[0]) < (a[2] + b[2]) / 2
            and abs(a[1] - b[1]) < (a[3] + b[3]) / 2)


def sample_scene(cfg: DomainConfig, rng: np.random.Generator) -> SceneSample:
    """Draw one scene: boxes by rejection sampling, agents, observations."""
    count = int(rng.poisson(cfg.object_rate))
    boxes: list[np.ndarray] = []
    attempts = 0
    while len(boxes) < count:
        attempts += 1
        if attempts > _MAX_REJECTION_ATTEMPTS:
            raise ConfigError(
                f"rejection sampling exceeded {_MAX_REJECTION_ATTEMPTS} attempts; "
                "object density too high for the extent")
        w = max(0.5, rng.normal(cfg.size_mean_w, cfg.size_std_w))
        l = max(0.5, rng.normal(cfg.size_mean_l, cfg.size_std_l))
        if w >= cfg.x_max - cfg.x_min or l >= cfg.y_max - cfg.y_min:
            continue
        cx = rng.uniform(cfg.x_min + w / 2, cfg.x_max - w / 2)
        cy = rng.uniform(cfg.y_min + l / 2, cfg.y_max - l / 2)
        cand = np.array([cx, cy, w, l])
        if any(_boxes_overlap(cand, other) for other in boxes):
            continue
        boxes.append(cand)
    box_arr = np.array(boxes).reshape(-1, 4)

    agents = np.zeros((cfg.n_agents, 2))
    for i in range(1, cfg.n_agents):
        agents[i, 0] = rng.uniform(cfg.x_min, cfg.x_max)
        agents[i, 1] = rng.uniform(cfg.y_min, cfg.y_max)

    scene = SceneSample(box_arr, agents, np.empty(0))
    grids = [render_observation(scene, i, cfg, rng) for i in range(cfg.n_agents)]
    scene.grids = np.stack(grids)
    return scene


def _perimeter_points(box: np.ndarray, per_edge: int) -> np.ndarray:
    cx, cy, w, l = box
    t = (np.arange(per_edge) + 0.5) / per_edge
    xs = cx - w / 2 + t * w
    ys = cy - l / 2 + t * l
    top = np.column_stack([xs, np.full(per_edge, cy + l / 2)])
    bottom = np.column_stack([xs, np.full(per_edge, cy - l / 2)])
    left = np.column_stack([np.full(per_edge, cx - w / 2), ys])
    right = np.column_stack([np.full(per_edge, cx + w / 2), ys])
    return np.concatenate([top, bottom, left, right])


def render_observation(scene: SceneSample, agent_index: int, cfg: DomainConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """Rasterize what one agent sees into a [2, H0, W0] grid.

    Boxes beyond the sensor range contribute nothing; others are missed with
    probability `miss_slope * distance` (clamped to 1). Surviving boxes emit
    noisy perimeter points, and every cell may spawn one clutter point.
    """
    if agent_index >= scene.agents.shape[0]:
        raise ConfigError(f"agent index {agent_index} out of range")
    pos = scene.agents[agent_index]
    points: list[np.ndarray] = []
    for box in scene.boxes:
        dist = math.hypot(box[0] - pos[0], box[1] - pos[1])
        if dist > cfg.sensor_range:
            continue
        if rng.random() < min(1.0, cfg.miss_slope * dist):
            continue
        pts = _perimeter_points(box, cfg.points_per_edge)
        pts = pts + rng.normal(0.0, cfg.noise_std, pts.shape)
        points.append(pts)

    h, w = cfg.grid_h, cfg.grid_w
    hits = rng.random((h, w)) < cfg.clutter_rate
    if hits.any():
        cells = np.argwhere(hits)  # row-major order
        offsets = rng.random((len(cells), 2))
        cx = cfg.x_min + (cells[:, 1] + offsets[:, 0]) * cfg.cell_m
        cy = cfg.y_min + (cells[:, 0] + offsets[:, 1]) * cfg.cell_m
        points.append(np.column_stack([cx, cy]))

    counts = np.zeros((h, w))
    ranges = np.full((h, w), np.inf)
    if points:
        pts = np.concatenate(points)
        j = np.floor((pts[:, 0] - cfg.x_min) / cfg.cell_m).astype(int)
        i = np.floor((pts[:, 1] - cfg.y_min) / cfg.cell_m).astype(int)
        ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
        i, j, pts = i[ok], j[ok], pts[ok]
        np.add.at(counts, (i, j), 1.0)
        d = np.hypot(pts[:, 0] - pos[0], pts[:, 1] - pos[1])
        np.minimum.at(ranges, (i, j), d)
    ranges = np.where(counts > 0, ranges / cfg.sensor_range, 0.0)
    return np.stack([counts, ranges])


def generate_dataset(cfg: DomainConfig, count: int) -> list[SceneSample]:
    """Deterministic list of scenes; sample i uses the stream (cfg.seed, i)."""
    return [sample_scene(cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, i])))
            for i in range(count)]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_fmt(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    if isinstance(value, np.ndarray):
        return "[" + ",".join(_fmt(v) for v in value.tolist()) + "]"
    raise TypeError(f"cannot serialize {type(value)}")


def write_dataset(samples: list[SceneSample], cfg: DomainConfig, path) -> None:
    """JSON-lines container: one header line, then one frame per line.

    All floats are decimal-serialized with 17 significant digits, which
    round-trips float64 exactly.
    """
    path = Path(path)
    with path.open("w") as fh:
        header = {"magic": DATASET_MAGIC, "version": DATASET_VERSION,
                  "cfg": asdict(cfg), "count": len(samples)}
        fh.write(_fmt(header) + "\n")
        for sample in samples:
            frame = {
                "boxes": sample.boxes,
                "agents": sample.agents,
                "grids": [{"shape": list(grid.shape), "data": grid.ravel()}
                          for grid in sample.grids],
            }
            fh.write(_fmt(frame) + "\n")


def read_dataset(path) -> tuple[list[SceneSample], DomainConfig]:
    """Load a dataset written by `write_dataset`, validating the container."""
    path = Path(path)
    with path.open("r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("empty dataset file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"malformed header: {e}", line=1) from e
    if not isinstance(header, dict) or header.get("magic") != DATASET_MAGIC:
        raise DataFormatError(
            f"bad magic {header.get('magic')!r}, expected {DATASET_MAGIC!r}", line=1)
    if header.get("version") != DATASET_VERSION:
        raise DataFormatError(
            f"unsupported version {header.get('version')!r}", line=1)
    try:
        cfg = DomainConfig(**header["cfg"])
    except (TypeError, KeyError, ConfigError) as e:
        raise DataFormatError(f"bad domain config: {e}", line=1) from e
    count = header.get("count")
    if not isinstance(count, int) or count < 0:
        raise DataFormatError(f"bad frame count {count!r}", line=1)
    if len(lines) - 1 < count:
        raise DataFormatError(
            f"truncated: header promises {count} frames, file has {len(lines) - 1}",
            line=len(lines) + 1)

    samples = []
    for lineno in range(2, count + 2):
        try:
            frame = json.loads(lines[lineno - 1])
            boxes = np.asarray(frame["boxes"], dtype=np.float64).reshape(-1, 4)
            agents = np.asarray(frame["agents"], dtype=np.float64).reshape(-1, 2)
            grids = []
            for g in frame["grids"]:
                shape = tuple(g["shape"])
                data = np.asarray(g["data"], dtype=np.float64)
                if data.size != int(np.prod(shape)):
                    raise ValueError(f"grid data length {data.size} != shape {shape}")
                grids.append(data.reshape(shape))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise DataFormatError(f"malformed frame: {e}", line=lineno) from e
        samples.append(SceneSample(boxes, agents, np.stack(grids)))
    return samples, cfg
