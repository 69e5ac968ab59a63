"""Synthetic multi-frame radar point clouds with ground-truth boxes.

The simulator reproduces three radar pathologies at toy scale: sparse returns
whose count falls with range, reflection origins re-drawn every frame from
the sensor-facing box edges, and sensitivity falling off away from boresight.
Ego frame convention: x along boresight, y to the left, azimuth = atan2(y, x).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CLASSES = ("vehicle", "large_vehicle", "bike", "pedestrian")
VEHICLE, LARGE_VEHICLE, BIKE, PEDESTRIAN = range(4)

# (width range, length range) in meters
SIZE_BOUNDS = {
    VEHICLE: ((1.6, 2.2), (3.5, 5.5)),
    LARGE_VEHICLE: ((2.2, 3.0), (6.0, 14.0)),
    BIKE: ((0.5, 1.0), (1.5, 2.5)),
    PEDESTRIAN: ((0.4, 0.8), (0.4, 0.8)),
}


class CapacityError(RuntimeError):
    """Objects could not be placed without overlap."""


class DatasetError(ValueError):
    """Malformed or invalid dataset file."""

    def __init__(self, message: str, path: str | Path | None = None, record: int | None = None):
        where = f"{path}:{record}: " if path is not None and record is not None else ""
        super().__init__(where + message)
        self.path = path
        self.record = record


@dataclass
class SimConfig:
    n_frames: int = 4
    frame_period: float = 0.1
    fov: float = math.pi / 2
    max_range: float = 64.0
    min_object_range: float = 5.0
    n_objects: tuple[int, int] = (1, 5)
    class_probs: tuple[float, ...] = (0.4, 0.15, 0.2, 0.25)
    stationary_prob: float = 0.4
    speed_ranges: tuple[tuple[float, float], ...] = ((3.0, 15.0), (3.0, 12.0), (2.0, 6.0), (0.5, 2.0))
    accel_noise: float = 0.5
    ego_speed: tuple[float, float] = (2.0, 12.0)
    ego_yaw_rate: tuple[float, float] = (0.02, 0.2)  # magnitude; sign drawn at random
    doppler_noise: float = 0.1
    amplitude_a0: float = 1.0
    amplitude_r0: float = 20.0
    boresight_power: float = 2.0
    amplitude_log_sigma: float = 0.3
    point_rates: tuple[float, ...] = (4.0, 8.0, 1.5, 1.0)
    rate_ref_range: float = 20.0
    dropout_azimuth: float = 0.3
    dropout_range: float = 0.2
    clutter_rate: float = 10.0
    clutter_amplitude: float = 0.5
    max_retries: int = 200

    def digest(self) -> str:
        doc = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def noiseless(self) -> "SimConfig":
        """Copy with every stochastic measurement effect disabled."""
        return dataclasses.replace(
            self, doppler_noise=0.0, amplitude_log_sigma=0.0, dropout_azimuth=0.0,
            dropout_range=0.0, clutter_rate=0.0, accel_noise=0.0,
        )


@dataclass
class SceneObject:
    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]  # (width, length)
    yaw: float
    velocity: tuple[float, float]
    dynamics: str  # "stationary" | "moving"


@dataclass
class EgoState:
    position: tuple[float, float]
    heading: float
    speed: float
    yaw_rate: float


@dataclass
class Scene:
    config: SimConfig
    seed: int
    objects: list[SceneObject]
    # per-frame world-frame trajectories, shapes (T, n, 2), (T, n, 2), (T, n)
    positions: np.ndarray
    velocities: np.ndarray
    yaws: np.ndarray
    ego: list[EgoState]
    timestamps: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)


@dataclass
class PointCloudFrame:
    timestamp: float
    points: np.ndarray  # (K, 4): range, azimuth, doppler, amplitude
    gt_boxes: np.ndarray  # (B, 8): cx, cy, w, l, yaw, class, vx, vy in the ego frame
    owners: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloudFrame):
            return NotImplemented
        return (self.timestamp == other.timestamp
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.gt_boxes, other.gt_boxes))


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


def _ego_trajectory(speed: float, yaw_rate: float, times: np.ndarray) -> list[EgoState]:
    states = []
    for t in times:
        heading = yaw_rate * t
        if abs(yaw_rate) < 1e-12:
            x, y = speed * t, 0.0
        else:
            x = speed / yaw_rate * math.sin(heading)
            y = speed / yaw_rate * (1.0 - math.cos(heading))
        states.append(EgoState((x, y), heading, speed, yaw_rate))
    return states


def generate_scene(config: SimConfig, seed: int) -> Scene:
    """Draw objects and an ego trajectory; deterministic in ``(config, seed)``."""
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    cfg = config
    n_obj = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1)) if cfg.n_objects[1] > 0 else 0
    probs = np.asarray(cfg.class_probs, dtype=float)
    probs = probs / probs.sum()

    objects: list[SceneObject] = []
    radii: list[float] = []
    half_fov = 0.9 * cfg.fov / 2
    for _ in range(n_obj):
        cls = int(rng.choice(len(probs), p=probs))
        (w0, w1), (l0, l1) = SIZE_BOUNDS[cls]
        w = float(rng.uniform(w0, w1))
        length = float(rng.uniform(l0, l1))
        radius = 0.5 * math.hypot(w, length)
        for _attempt in range(cfg.max_retries):
            r = float(rng.uniform(cfg.min_object_range, cfg.max_range - radius - 1.0))
            az = float(rng.uniform(-half_fov, half_fov))
            c = (r * math.cos(az), r * math.sin(az))
            if all(math.dist(c, o.center) > radius + ro + 0.5 for o, ro in zip(objects, radii)):
                break
        else:
            raise CapacityError(
                f"could not place object {len(objects) + 1} of {n_obj} after {cfg.max_retries} retries"
            )
        moving = rng.random() >= cfg.stationary_prob
        if moving:
            lo, hi = cfg.speed_ranges[cls]
            speed = float(rng.uniform(lo, hi))
            heading = float(rng.uniform(-np.pi, np.pi))
            vel = (speed * math.cos(heading), speed * math.sin(heading))
            yaw = heading
        else:
            vel = (0.0, 0.0)
            yaw = float(rng.uniform(-np.pi, np.pi))
        objects.append(SceneObject(cls, c, (w, length), yaw, vel, "moving" if moving else "stationary"))
        radii.append(radius)

    T = cfg.n_frames
    dt = cfg.frame_period
    times = np.arange(T) * dt
    pos = np.zeros((T, n_obj, 2))
    vel = np.zeros((T, n_obj, 2))
    yaws = np.zeros((T, n_obj))
    for i, o in enumerate(objects):
        pos[0, i] = o.center
        vel[0, i] = o.velocity
        yaws[0, i] = o.yaw
    for t in range(1, T):
        for i, o in enumerate(objects):
            v = vel[t - 1, i].copy()
            if o.dynamics == "moving" and cfg.accel_noise > 0:
                v = v + rng.normal(0.0, cfg.accel_noise, size=2) * dt
            pos[t, i] = pos[t - 1, i] + vel[t - 1, i] * dt
            vel[t, i] = v
            yaws[t, i] = math.atan2(v[1], v[0]) if o.dynamics == "moving" else yaws[t - 1, i]

    ego_speed = float(rng.uniform(*cfg.ego_speed))
    yaw_rate = float(rng.uniform(*cfg.ego_yaw_rate)) * (1.0 if rng.random() < 0.5 else -1.0)
    ego = _ego_trajectory(ego_speed, yaw_rate, times)
    return Scene(cfg, int(seed), objects, pos, vel, yaws, ego, times)


def world_to_ego(ego: EgoState, xy: np.ndarray) -> np.ndarray:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    d = np.asarray(xy, dtype=float) - np.asarray(ego.position)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def rotate_to_ego(ego: EgoState, vec: np.ndarray) -> np.ndarray:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    v = np.asarray(vec, dtype=float)
    return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], axis=-1)


def ego_velocity(ego: EgoState) -> np.ndarray:
    """Ego velocity expressed in its own frame (always along +x)."""
    return np.array([ego.speed, 0.0])


def _facing_edges(center: np.ndarray, yaw: float, w: float, length: float):
    """Sensor-facing edges as (start, end) pairs in the ego frame."""
    u = np.array([math.cos(yaw), math.sin(yaw)])
    v = np.array([-u[1], u[0]])
    hl, hw = length / 2, w / 2
    edges = [
        (u, center + hl * u - hw * v, center + hl * u + hw * v),
        (-u, center - hl * u - hw * v, center - hl * u + hw * v),
        (v, center + hw * v - hl * u, center + hw * v + hl * u),
        (-v, center - hw * v - hl * u, center - hw * v + hl * u),
    ]
    out = []
    for normal, a, b in edges:
        mid = 0.5 * (a + b)
        if float(normal @ (-mid)) > 0:
            out.append((a, b))
    return out


def amplitude_law(cfg: SimConfig, rng_range: np.ndarray, azimuth: np.ndarray, a0: float | None = None):
    a0 = cfg.amplitude_a0 if a0 is None else a0
    return a0 * np.cos(azimuth) ** cfg.boresight_power * (cfg.amplitude_r0 / rng_range) ** 2


def render_frame(scene: Scene, frame_index: int, seed: int) -> PointCloudFrame:
    """Sample one radar frame of ``scene``."""
    cfg = scene.config
    if not 0 <= frame_index < scene.n_frames:
        raise IndexError(f"frame_index {frame_index} outside [0, {scene.n_frames})")
    rng = np.random.default_rng([int(seed), int(frame_index), 0xF7A3E])
    ego = scene.ego[frame_index]
    v_ego = ego_velocity(ego)
    half = cfg.fov / 2

    points: list[np.ndarray] = []
    owners: list[np.ndarray] = []
    boxes = []
    for i, obj in enumerate(scene.objects):
        c = world_to_ego(ego, scene.positions[frame_index, i])
        yaw = float(_wrap(scene.yaws[frame_index, i] - ego.heading))
        v_obj = rotate_to_ego(ego, scene.velocities[frame_index, i])
        rc = float(np.hypot(*c))
        azc = math.atan2(c[1], c[0])
        if rc > cfg.max_range or abs(azc) > half:
            continue
        w, length = obj.size
        boxes.append([c[0], c[1], w, length, yaw, obj.class_id, v_obj[0], v_obj[1]])

        lam = cfg.point_rates[obj.class_id] * cfg.rate_ref_range / max(rc, 1e-6)
        k = int(rng.poisson(lam))
        edges = _facing_edges(c, yaw, w, length)
        if k == 0 or not edges:
            continue
        lengths = np.array([np.linalg.norm(b - a) for a, b in edges])
        pick = rng.choice(len(edges), size=k, p=lengths / lengths.sum())
        frac = rng.random(k)
        starts = np.array([edges[j][0] for j in pick])
        ends = np.array([edges[j][1] for j in pick])
        xy = starts + frac[:, None] * (ends - starts)
        r = np.hypot(xy[:, 0], xy[:, 1])
        az = np.arctan2(xy[:, 1], xy[:, 0])
        unit = xy / r[:, None]
        doppler = unit @ (v_obj - v_ego)
        if cfg.doppler_noise > 0:
            doppler = doppler + rng.normal(0.0, cfg.doppler_noise, size=k)
        amp = amplitude_law(cfg, r, az)
        if cfg.amplitude_log_sigma > 0:
            amp = amp * rng.lognormal(0.0, cfg.amplitude_log_sigma, size=k)
        p_drop = np.clip(cfg.dropout_azimuth * np.abs(az) / half + cfg.dropout_range * r / cfg.max_range, 0, 1)
        keep = (rng.random(k) >= p_drop) & (r <= cfg.max_range) & (np.abs(az) <= half)
        points.append(np.stack([r, az, doppler, amp], axis=1)[keep])
        owners.append(np.full(int(keep.sum()), i))

    n_clutter = int(rng.poisson(cfg.clutter_rate)) if cfg.clutter_rate > 0 else 0
    if n_clutter:
        r = rng.uniform(1.0, cfg.max_range, size=n_clutter)
        az = rng.uniform(-half, half, size=n_clutter)
        unit = np.stack([np.cos(az), np.sin(az)], axis=1)
        doppler = unit @ (-v_ego) + rng.normal(0.0, max(cfg.doppler_noise, 0.5), size=n_clutter)
        amp = amplitude_law(cfg, r, az, cfg.clutter_amplitude)
        amp = amp * rng.lognormal(0.0, max(cfg.amplitude_log_sigma, 0.5), size=n_clutter)
        points.append(np.stack([r, az, doppler, amp], axis=1))
        owners.append(np.full(n_clutter, -1))

    pts = np.concatenate(points) if points else np.zeros((0, 4))
    own = np.concatenate(owners) if owners else np.zeros(0, dtype=int)
    gt = np.asarray(boxes, dtype=float).reshape(-1, 8)
    return PointCloudFrame(float(scene.timestamps[frame_index]), pts, gt, own)


def render_sequence(scene: Scene, seed: int | None = None) -> list[PointCloudFrame]:
    seed = scene.seed if seed is None else seed
    return [render_frame(scene, t, seed) for t in range(scene.n_frames)]


# -- dataset files ----------------------------------------------------------

_MAGIC = "#radarsim/1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_sequence(frames: Sequence[PointCloudFrame], path: str | Path, *, seed: int,
                   digest: str, max_range: float, fov: float) -> None:
    lines = [f"{_MAGIC} seed={seed} digest={digest} max_range={_fmt(max_range)} fov={_fmt(fov)} "
             f"frames={len(frames)}"]
    for fr in frames:
        lines.append(f"F {_fmt(fr.timestamp)} {len(fr.points)} {len(fr.gt_boxes)}")
        lines.extend("P " + " ".join(_fmt(v) for v in p) for p in fr.points)
        lines.extend("B " + " ".join(_fmt(v) for v in b) for b in fr.gt_boxes)
    Path(path).write_text("\n".join(lines) + "\n")


def write_dataset(scenes: Sequence[Scene], path: str | Path) -> list[Path]:
    """Render every scene with its own seed and write one file per sequence."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        f = root / f"seq_{i:05d}.txt"
        cfg = scene.config
        write_sequence(render_sequence(scene), f, seed=scene.seed, digest=cfg.digest(),
                       max_range=cfg.max_range, fov=cfg.fov)
        files.append(f)
    return files


def read_sequence(path: str | Path) -> list[PointCloudFrame]:
    """Parse one sequence file; an empty file yields no frames."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not text.strip():
        return []
    header = lines[0].split()
    if not header or header[0] != _MAGIC:
        raise DatasetError("missing '#radarsim/1' header", path, 1)
    try:
        meta = dict(tok.split("=", 1) for tok in header[1:])
        max_range = float(meta["max_range"])
        fov = float(meta["fov"])
        n_frames = int(meta["frames"])
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"bad header ({exc})", path, 1) from None

    frames: list[PointCloudFrame] = []
    i = 1
    n = len(lines)

    def parse(lineno: int, tag: str, count: int) -> list[float]:
        toks = lines[lineno].split()
        if not toks or toks[0] != tag or len(toks) != count + 1:
            raise DatasetError(f"expected '{tag}' record with {count} values", path, lineno + 1)
        try:
            return [float(t) for t in toks[1:]]
        except ValueError:
            raise DatasetError("non-numeric value", path, lineno + 1) from None

    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        ts, n_pts, n_box = parse(i, "F", 3)
        i += 1
        pts = []
        for _ in range(int(n_pts)):
            if i >= n:
                raise DatasetError("truncated point records", path, i + 1)
            p = parse(i, "P", 4)
            if not (0.0 <= p[0] <= max_range):
                raise DatasetError(f"point range {p[0]} outside [0, {max_range}]", path, i + 1)
            if abs(p[1]) > fov / 2 + 1e-12 or p[3] <= 0:
                raise DatasetError("point azimuth outside field of view or non-positive amplitude",
                                   path, i + 1)
            pts.append(p)
            i += 1
        boxes = []
        for _ in range(int(n_box)):
            if i >= n:
                raise DatasetError("truncated box records", path, i + 1)
            boxes.append(parse(i, "B", 8))
            i += 1
        if frames and ts < frames[-1].timestamp:
            raise DatasetError("frame timestamps not increasing", path, i)
        frames.append(PointCloudFrame(ts, np.asarray(pts, dtype=float).reshape(-1, 4),
                                      np.asarray(boxes, dtype=float).reshape(-1, 8)))
    if len(frames) != n_frames:
        raise DatasetError(f"header declares {n_frames} frames, found {len(frames)}", path, 1)
    return frames


def read_dataset(path: str | Path) -> list[list[PointCloudFrame]]:
    """Read a dataset directory (``seq_*.txt``) or a single sequence file."""
    path = Path(path)
    if path.is_dir():
        return [read_sequence(f) for f in sorted(path.glob("seq_*.txt"))]
    frames = read_sequence(path)
    return [frames] if frames else []
