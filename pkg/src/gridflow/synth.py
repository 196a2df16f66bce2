"""Seeded synthetic scenes with exact flow and odometry ground truth.

A scenario is an ego trajectory driving through a static world of walls
and blobs, plus rigid objects moving at constant velocity. Rendering
expresses all world points in each ego frame, optionally perturbed by
Gaussian position noise; rasterizing those clouds yields frame pairs
whose true flow, relative transform, moving-object mask and footprint
boxes are known in closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError
from .grid_map import GridConfig, PointCloud
from .rigid_motion import RigidTransform2D, motion_flow, pose_compose, pose_relative
from .warp import Direction, FlowField

EGO_STEP_LIMIT_M = 2.5
EGO_TURN_LIMIT_DEG = 5.0
OBJECT_STEP_LIMIT_M = 3.5
OBJECT_TURN_LIMIT_DEG = 10.0


def _world_to_frame(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Express world xyz points in the frame of an SE(2) pose (z unchanged)."""
    out = points.copy()
    c, s = math.cos(-pose[2]), math.sin(-pose[2])
    dx = points[:, 0] - pose[0]
    dy = points[:, 1] - pose[1]
    out[:, 0] = c * dx - s * dy
    out[:, 1] = s * dx + c * dy
    return out


def _frame_to_world(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    out = points.copy()
    c, s = math.cos(pose[2]), math.sin(pose[2])
    out[:, 0] = c * points[:, 0] - s * points[:, 1] + pose[0]
    out[:, 1] = s * points[:, 0] + c * points[:, 1] + pose[1]
    return out


@dataclass(frozen=True)
class SynthConfig:
    """Ranges and counts used by the scenario generator.

    Motion ranges are validated against the per-frame limits: ego steps up
    to 2.5 m and 5 degrees, object steps up to 3.5 m and 10 degrees.
    """

    frames: int = 2
    ego_step_range_m: tuple[float, float] = (0.4, 0.8)
    ego_turn_range_deg: tuple[float, float] = (-2.0, 2.0)
    n_objects: int = 1
    object_step_range_m: tuple[float, float] = (0.2, 0.5)
    object_turn_range_deg: tuple[float, float] = (-1.0, 1.0)
    object_size_range_m: tuple[float, float] = (1.6, 3.6)
    n_walls: int = 10
    n_blobs: int = 6
    world_extent_m: float = 12.0
    wall_point_spacing_m: float = 0.07
    noise_sigma_m: float = 0.02
    sensor_height_m: float = 1.6

    def __post_init__(self):
        if self.frames < 2:
            raise ValidationError("a scenario needs at least 2 frames")
        lo, hi = self.ego_step_range_m
        if not (0.0 <= lo <= hi <= EGO_STEP_LIMIT_M):
            raise ValidationError(f"ego step range must lie in [0, {EGO_STEP_LIMIT_M}] m")
        lo, hi = self.ego_turn_range_deg
        if not (-EGO_TURN_LIMIT_DEG <= lo <= hi <= EGO_TURN_LIMIT_DEG):
            raise ValidationError(f"ego turn range must lie in +-{EGO_TURN_LIMIT_DEG} deg")
        lo, hi = self.object_step_range_m
        if not (0.0 <= lo <= hi <= OBJECT_STEP_LIMIT_M):
            raise ValidationError(f"object step range must lie in [0, {OBJECT_STEP_LIMIT_M}] m")
        lo, hi = self.object_turn_range_deg
        if not (-OBJECT_TURN_LIMIT_DEG <= lo <= hi <= OBJECT_TURN_LIMIT_DEG):
            raise ValidationError(f"object turn range must lie in +-{OBJECT_TURN_LIMIT_DEG} deg")
        if self.noise_sigma_m < 0:
            raise ValidationError("noise_sigma_m must be >= 0")


@dataclass
class SynthObject:
    """Rigid object: points and footprint in the object frame, world pose per frame."""

    points: np.ndarray  # (M, 3) object-frame xyz
    intensity: np.ndarray  # (M,)
    poses: np.ndarray  # (F, 3) world pose per frame
    footprint: np.ndarray  # (x0, y0, x1, y1) object-frame box, meters


@dataclass
class Scenario:
    """Ego trajectory, static background and moving objects with ground truth."""

    seed: int
    frames: int
    ego_poses: np.ndarray  # (F, 3) world poses, first is identity
    background: np.ndarray  # (N, 3) world xyz
    background_intensity: np.ndarray
    objects: list[SynthObject]
    sensor_height_m: float
    noise_sigma_m: float

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "frames": self.frames,
            "ego_poses": self.ego_poses.tolist(),
            "background": self.background.tolist(),
            "background_intensity": self.background_intensity.tolist(),
            "objects": [
                {
                    "points": o.points.tolist(),
                    "intensity": o.intensity.tolist(),
                    "poses": o.poses.tolist(),
                    "footprint": o.footprint.tolist(),
                }
                for o in self.objects
            ],
            "sensor_height_m": self.sensor_height_m,
            "noise_sigma_m": self.noise_sigma_m,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Scenario":
        return cls(
            seed=int(data["seed"]),
            frames=int(data["frames"]),
            ego_poses=np.asarray(data["ego_poses"], dtype=np.float64),
            background=np.asarray(data["background"], dtype=np.float64),
            background_intensity=np.asarray(data["background_intensity"], dtype=np.float64),
            objects=[
                SynthObject(
                    points=np.asarray(o["points"], dtype=np.float64),
                    intensity=np.asarray(o["intensity"], dtype=np.float64),
                    poses=np.asarray(o["poses"], dtype=np.float64),
                    footprint=np.asarray(o["footprint"], dtype=np.float64),
                )
                for o in data["objects"]
            ],
            sensor_height_m=float(data["sensor_height_m"]),
            noise_sigma_m=float(data["noise_sigma_m"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class GroundTruth:
    """Exact references for one frame pair."""

    flow: FlowField  # direction 2<-1, cell units
    transform: RigidTransform2D  # 2<-1 map in centered cell coordinates
    moving_mask: np.ndarray  # bool, cells covered by an object footprint in frame 1
    boxes_frame1: list  # per object: (x0, y0, x1, y1) in cell-index coords or None
    boxes_frame2: list


def _wall_texture(rng, arc: np.ndarray) -> np.ndarray:
    period = rng.uniform(0.5, 2.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    return 0.2 + 0.6 * (0.5 + 0.5 * np.sin(2.0 * math.pi * arc / period + phase))


def _make_background(rng, cfg: SynthConfig):
    points = []
    intensity = []
    half = cfg.world_extent_m / 2.0
    for _ in range(cfg.n_walls):
        radius = rng.uniform(0.55 * half, 0.95 * half)
        bearing = rng.uniform(0.0, 2.0 * math.pi)
        center = radius * np.array([math.cos(bearing), math.sin(bearing)])
        direction = rng.uniform(0.0, 2.0 * math.pi)
        length = rng.uniform(1.5, 5.0)
        height = rng.uniform(0.8, 2.4)
        n = max(2, int(length / cfg.wall_point_spacing_m))
        arc = np.linspace(-length / 2.0, length / 2.0, n)
        base = center[None, :] + arc[:, None] * np.array(
            [math.cos(direction), math.sin(direction)]
        )
        tex = _wall_texture(rng, arc + length / 2.0)
        for reps in range(2):
            z = rng.uniform(0.1, height, n)
            points.append(np.column_stack([base, z]))
            intensity.append(np.clip(tex + rng.normal(0.0, 0.03, n), 0.0, 1.0))
    for _ in range(cfg.n_blobs):
        radius = rng.uniform(0.5 * half, 0.9 * half)
        bearing = rng.uniform(0.0, 2.0 * math.pi)
        center = radius * np.array([math.cos(bearing), math.sin(bearing)])
        n = rng.integers(30, 80)
        xy = center[None, :] + rng.normal(0.0, 0.35, (n, 2))
        z = rng.uniform(0.05, 1.2, n)
        base_i = rng.uniform(0.25, 0.75)
        points.append(np.column_stack([xy, z]))
        intensity.append(np.clip(base_i + rng.normal(0.0, 0.08, n), 0.0, 1.0))
    if points:
        return np.vstack(points), np.concatenate(intensity)
    return np.zeros((0, 3)), np.zeros(0)


def _make_object_shape(rng, cfg: SynthConfig):
    length = rng.uniform(*cfg.object_size_range_m)
    width = max(1.0, 0.5 * length)
    spacing = 0.06
    xs = np.arange(-length / 2.0, length / 2.0 + spacing / 2.0, spacing)
    ys = np.arange(-width / 2.0, width / 2.0 + spacing / 2.0, spacing)
    perim = np.concatenate(
        [
            np.column_stack([xs, np.full_like(xs, -width / 2.0)]),
            np.column_stack([xs, np.full_like(xs, width / 2.0)]),
            np.column_stack([np.full_like(ys, -length / 2.0), ys]),
            np.column_stack([np.full_like(ys, length / 2.0), ys]),
        ]
    )
    arc = np.arange(perim.shape[0], dtype=np.float64) * spacing
    tex = _wall_texture(rng, arc)
    z = rng.uniform(0.25, 1.4, perim.shape[0])
    roof_x = np.arange(-length / 2.0 + 0.2, length / 2.0 - 0.1, 0.3)
    roof_y = np.arange(-width / 2.0 + 0.2, width / 2.0 - 0.1, 0.3)
    gx, gy = np.meshgrid(roof_x, roof_y)
    roof = np.column_stack([gx.ravel(), gy.ravel()])
    roof_z = rng.uniform(1.2, 1.5, roof.shape[0])
    roof_i = rng.uniform(0.3, 0.8, roof.shape[0])
    points = np.vstack(
        [np.column_stack([perim, z]), np.column_stack([roof, roof_z])]
    )
    intensity = np.concatenate([np.clip(tex, 0.0, 1.0), roof_i])
    footprint = np.array([-length / 2.0, -width / 2.0, length / 2.0, width / 2.0])
    return points, intensity, footprint


def generate_scenario(seed: int, cfg: SynthConfig = SynthConfig()) -> Scenario:
    """Deterministically build a scenario from a seed and a config."""
    rng = np.random.default_rng(seed)

    ego = np.zeros((cfg.frames, 3))
    for k in range(1, cfg.frames):
        step = np.array(
            [
                rng.uniform(*cfg.ego_step_range_m),
                0.0,
                math.radians(rng.uniform(*cfg.ego_turn_range_deg)),
            ]
        )
        assert step[0] <= EGO_STEP_LIMIT_M and abs(math.degrees(step[2])) <= EGO_TURN_LIMIT_DEG
        ego[k] = pose_compose(ego[k - 1], step)

    background, bg_intensity = _make_background(rng, cfg)

    objects = []
    half = cfg.world_extent_m / 2.0
    for _ in range(cfg.n_objects):
        points, intensity, footprint = _make_object_shape(rng, cfg)
        # objects drive the open corridor, clear of the peripheral walls
        start = np.array(
            [
                rng.uniform(0.1 * half, 0.42 * half),
                rng.uniform(-0.3 * half, 0.3 * half),
                rng.uniform(0.0, 2.0 * math.pi),
            ]
        )
        step = np.array(
            [
                rng.uniform(*cfg.object_step_range_m),
                0.0,
                math.radians(rng.uniform(*cfg.object_turn_range_deg)),
            ]
        )
        poses = np.zeros((cfg.frames, 3))
        poses[0] = start
        for k in range(1, cfg.frames):
            poses[k] = pose_compose(poses[k - 1], step)
        objects.append(
            SynthObject(points=points, intensity=intensity, poses=poses, footprint=footprint)
        )

    return Scenario(
        seed=seed,
        frames=cfg.frames,
        ego_poses=ego,
        background=background,
        background_intensity=bg_intensity,
        objects=objects,
        sensor_height_m=cfg.sensor_height_m,
        noise_sigma_m=cfg.noise_sigma_m,
    )


def render_frames(scenario: Scenario, noise_sigma_m: float | None = None) -> list[PointCloud]:
    """World points expressed in every ego frame, with optional position noise.

    Noise draws come from a generator seeded by the scenario seed, so
    rendering is deterministic; ``noise_sigma_m=0`` gives the exact
    inverse-pose transform of the world points.
    """
    sigma = scenario.noise_sigma_m if noise_sigma_m is None else float(noise_sigma_m)
    rng = np.random.default_rng(np.random.SeedSequence((scenario.seed, 0xC10D)))
    origin = (0.0, 0.0, scenario.sensor_height_m)
    clouds = []
    for k in range(scenario.frames):
        world = [scenario.background]
        intensity = [scenario.background_intensity]
        for obj in scenario.objects:
            world.append(_frame_to_world(obj.points, obj.poses[k]))
            intensity.append(obj.intensity)
        world = np.vstack(world)
        intensity = np.concatenate(intensity)
        local = _world_to_frame(world, scenario.ego_poses[k])
        if sigma > 0.0:
            local = local + rng.normal(0.0, sigma, local.shape)
        clouds.append(PointCloud(xyz=local, intensity=intensity, sensor_origin=origin))
    return clouds


def true_relative_transform(
    scenario: Scenario, pair_index: int, cfg: GridConfig
) -> RigidTransform2D:
    """The 2<-1 coordinate map between consecutive frames, in cell units."""
    if not 0 <= pair_index < scenario.frames - 1:
        raise ValidationError("pair_index out of range")
    e1 = scenario.ego_poses[pair_index]
    e2 = scenario.ego_poses[pair_index + 1]
    rel = pose_relative(e2, e1)  # frame-1 origin expressed in frame 2
    theta = e1[2] - e2[2]
    t_cells = rel[:2] / cfg.cell_size_m
    return RigidTransform2D(theta, t_cells, Direction.FORWARD)


def ground_truth_flow(scenario: Scenario, pair_index: int, cfg: GridConfig) -> GroundTruth:
    """Exact flow, transform, moving mask and boxes for one frame pair.

    Static cells carry the rigid-transform flow; cells whose centers fall
    inside an object's frame-1 footprint carry that object's rigid motion
    composed with the ego motion.
    """
    transform = true_relative_transform(scenario, pair_index, cfg)
    rows, cols = cfg.rows, cfg.cols
    flow = motion_flow(transform, rows, cols).d.copy()
    moving = np.zeros((rows, cols), dtype=bool)

    e1 = scenario.ego_poses[pair_index]
    e2 = scenario.ego_poses[pair_index + 1]
    # cell centers in frame-1 meters (extent centered on the ego)
    half_x = (cols - 1) / 2.0
    half_y = (rows - 1) / 2.0
    jj, ii = np.mgrid[0:rows, 0:cols]
    px = (ii - half_x) * cfg.cell_size_m
    py = (jj - half_y) * cfg.cell_size_m
    p1 = np.column_stack([px.ravel(), py.ravel(), np.zeros(px.size)])

    boxes1, boxes2 = [], []
    for obj in scenario.objects:
        o1 = obj.poses[pair_index]
        o2 = obj.poses[pair_index + 1]
        world = _frame_to_world(p1, e1)
        in_obj = _world_to_frame(world, o1)
        x0, y0, x1, y1 = obj.footprint
        # half a cell diagonal of slack so cells holding boundary
        # measurements count as object cells
        slack = 0.5 * math.sqrt(2.0) * cfg.cell_size_m
        inside = (
            (in_obj[:, 0] >= x0 - slack) & (in_obj[:, 0] <= x1 + slack)
            & (in_obj[:, 1] >= y0 - slack) & (in_obj[:, 1] <= y1 + slack)
        ).reshape(rows, cols)
        if inside.any():
            # frame-1 point -> object frame -> frame-2 world -> frame-2 ego
            moved_world = _frame_to_world(in_obj, o2)
            p2 = _world_to_frame(moved_world, e2)
            disp = ((p2[:, :2] - p1[:, :2]) / cfg.cell_size_m).reshape(rows, cols, 2)
            flow[inside] = disp[inside]
            moving |= inside
        boxes1.append(_footprint_box_cells(obj, pair_index, e1, cfg))
        boxes2.append(_footprint_box_cells(obj, pair_index + 1, e2, cfg))

    return GroundTruth(
        flow=FlowField(flow, Direction.FORWARD),
        transform=transform,
        moving_mask=moving,
        boxes_frame1=boxes1,
        boxes_frame2=boxes2,
    )


def _footprint_box_cells(obj: SynthObject, frame: int, ego_pose, cfg: GridConfig):
    """Axis-aligned footprint bounds in cell-index coordinates, or None if
    fully outside the extent."""
    x0, y0, x1, y1 = obj.footprint
    corners = np.array([[x0, y0, 0], [x0, y1, 0], [x1, y0, 0], [x1, y1, 0]], dtype=float)
    world = _frame_to_world(corners, obj.poses[frame])
    local = _world_to_frame(world, ego_pose)
    cx = local[:, 0] / cfg.cell_size_m + (cfg.cols - 1) / 2.0
    cy = local[:, 1] / cfg.cell_size_m + (cfg.rows - 1) / 2.0
    box = np.array([cx.min(), cy.min(), cx.max(), cy.max()])
    if box[2] < 0 or box[3] < 0 or box[0] > cfg.cols - 1 or box[1] > cfg.rows - 1:
        return None
    return box
