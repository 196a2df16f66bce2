"""Odometry chaining, relative-pose error metrics, flow error and box IoU.

Odometry metrics follow the fixed-length relative-pose protocol: for
every start frame and every evaluation length, the first subsequence
whose reference path reaches that length contributes the rotation and
translation error between the estimated and reference relative poses,
normalized by the length. Rotation error is reported in rad/m, the
translation error as a fraction of distance traveled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError
from .grid_map import GridMap
from .rigid_motion import RigidTransform2D, pose_compose, pose_relative
from .validation import check_finite, check_same_shape
from .warp import Direction, FlowField

DESK_EVAL_LENGTHS_M = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0)
KITTI_EVAL_LENGTHS_M = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass
class Trajectory:
    """Absolute SE(2) poses (x_m, y_m, theta) per frame; pose 0 is identity."""

    poses: np.ndarray

    def __post_init__(self):
        poses = check_finite(self.poses, "poses").reshape(-1, 3)
        self.poses = poses

    def __len__(self) -> int:
        return self.poses.shape[0]

    def path_length(self) -> float:
        steps = np.diff(self.poses[:, :2], axis=0)
        return float(np.sum(np.hypot(steps[:, 0], steps[:, 1])))


def chain(transforms: list[RigidTransform2D], cell_size_m: float) -> Trajectory:
    """Compose per-pair transforms into an absolute metric trajectory.

    All transforms must carry the same direction tag. A 2<-1 transform is
    the map of point coordinates between ego frames, so its inverse is the
    ego-pose increment; 1<-2 transforms are the increments directly.
    """
    directions = {t.direction for t in transforms}
    if len(directions) > 1:
        raise ValidationError("transforms have mixed direction tags")
    poses = [np.zeros(3)]
    for t in transforms:
        rel = t.inverse() if t.direction is Direction.FORWARD else t
        step = np.array([rel.t[0] * cell_size_m, rel.t[1] * cell_size_m, rel.theta])
        poses.append(pose_compose(poses[-1], step))
    return Trajectory(np.array(poses))


@dataclass
class OdometryMetrics:
    """Average rotation (rad/m) and translation (fraction) errors."""

    are_rad_per_m: float
    ate_fraction: float
    n_samples: int
    per_length: dict = field(default_factory=dict)
    empty: bool = False

    @property
    def are_mdeg_per_m(self) -> float:
        """Rotation error in the conventional 1e-3 deg/m display unit."""
        return math.degrees(self.are_rad_per_m) * 1000.0

    @property
    def ate_percent(self) -> float:
        return 100.0 * self.ate_fraction

    def to_dict(self) -> dict:
        return {
            "are_rad_per_m": self.are_rad_per_m,
            "are_mdeg_per_m": self.are_mdeg_per_m,
            "ate_fraction": self.ate_fraction,
            "ate_percent": self.ate_percent,
            "n_samples": self.n_samples,
            "empty": self.empty,
            "per_length": {str(k): v for k, v in self.per_length.items()},
        }


def _wrap_angle(theta: float) -> float:
    return math.remainder(theta, 2.0 * math.pi)


def are_ate(
    est: Trajectory, ref: Trajectory, lengths: tuple[float, ...] = DESK_EVAL_LENGTHS_M
) -> OdometryMetrics:
    """Relative-pose errors over all start frames and evaluation lengths.

    Trajectories shorter than every evaluation length yield an empty
    report rather than an error.
    """
    if len(est) != len(ref):
        raise ValidationError("trajectories must have equal length")
    if len(ref) < 2:
        raise ValidationError("trajectories need at least 2 poses")
    steps = np.diff(ref.poses[:, :2], axis=0)
    dist = np.concatenate([[0.0], np.cumsum(np.hypot(steps[:, 0], steps[:, 1]))])

    are_sum = 0.0
    ate_sum = 0.0
    count = 0
    per_length: dict[float, dict] = {}
    for length in lengths:
        ends = np.searchsorted(dist, dist + length, side="left")
        l_are = l_ate = 0.0
        l_count = 0
        for i, j in enumerate(ends):
            if j >= len(ref) or j <= i:
                continue
            rel_ref = pose_relative(ref.poses[i], ref.poses[j])
            rel_est = pose_relative(est.poses[i], est.poses[j])
            r_err = abs(_wrap_angle(rel_ref[2] - rel_est[2]))
            t_err = float(np.hypot(*(rel_ref[:2] - rel_est[:2])))
            l_are += r_err / length
            l_ate += t_err / length
            l_count += 1
        if l_count:
            per_length[length] = {
                "are_rad_per_m": l_are / l_count,
                "ate_fraction": l_ate / l_count,
                "count": l_count,
            }
            are_sum += l_are
            ate_sum += l_ate
            count += l_count
    if count == 0:
        return OdometryMetrics(0.0, 0.0, 0, {}, empty=True)
    return OdometryMetrics(are_sum / count, ate_sum / count, count, per_length)


@dataclass
class FlowErrorStats:
    """Endpoint-error statistics over the valid cells."""

    mean: float
    median: float
    max: float
    count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def endpoint_error(est: FlowField, gt: FlowField, valid: np.ndarray) -> FlowErrorStats:
    """Per-cell Euclidean error between estimated and reference flow."""
    if est.direction != gt.direction:
        raise ValidationError("flow directions do not match")
    check_same_shape(est.d, gt.d, "estimated flow", "reference flow")
    check_same_shape(est.d[..., 0], valid, "flow", "valid set")
    diff = est.d - gt.d
    err = np.hypot(diff[..., 0], diff[..., 1])[np.asarray(valid, bool)]
    if err.size == 0:
        return FlowErrorStats(0.0, 0.0, 0.0, 0)
    return FlowErrorStats(float(err.mean()), float(np.median(err)), float(err.max()), err.size)


def box_iou(a, b) -> float:
    """Intersection over union of two axis-aligned (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass
class IouStats:
    """Per-object and mean IoU of flow-predicted boxes."""

    per_object: list
    mean: float
    evaluated: int
    skipped: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def object_prediction_iou(
    flow: FlowField,
    boxes_frame1: list,
    boxes_frame2: list,
    gridmap1: GridMap,
) -> IouStats:
    """Translate each frame-1 box by its mean measured flow; IoU vs frame 2.

    The mean is taken over cells inside the frame-1 box that hold at least
    one reflection. Objects without measured cells (or without a box in
    either frame) are skipped and tallied.
    """
    if len(boxes_frame1) != len(boxes_frame2):
        raise ValidationError("box lists must pair objects by index")
    occupied = gridmap1.occupancy()
    check_same_shape(flow.d[..., 0], occupied, "flow", "grid map")
    rows, cols = flow.shape
    per_object = []
    ious = []
    skipped = 0
    for idx, (b1, b2) in enumerate(zip(boxes_frame1, boxes_frame2)):
        if b1 is None or b2 is None:
            per_object.append({"object": idx, "iou": None, "skipped": True})
            skipped += 1
            continue
        x0, y0, x1, y1 = b1
        ix0, ix1 = max(0, math.ceil(x0)), min(cols - 1, math.floor(x1))
        iy0, iy1 = max(0, math.ceil(y0)), min(rows - 1, math.floor(y1))
        measured = np.zeros((rows, cols), dtype=bool)
        if ix0 <= ix1 and iy0 <= iy1:
            measured[iy0 : iy1 + 1, ix0 : ix1 + 1] = occupied[iy0 : iy1 + 1, ix0 : ix1 + 1]
        if not measured.any():
            per_object.append({"object": idx, "iou": None, "skipped": True})
            skipped += 1
            continue
        mean_u = float(flow.d[..., 0][measured].mean())
        mean_v = float(flow.d[..., 1][measured].mean())
        predicted = np.asarray(b1, float) + np.array([mean_u, mean_v, mean_u, mean_v])
        iou = box_iou(predicted, b2)
        per_object.append({"object": idx, "iou": iou, "skipped": False})
        ious.append(iou)
    mean = float(np.mean(ious)) if ious else 0.0
    return IouStats(per_object=per_object, mean=mean, evaluated=len(ious), skipped=skipped)


@dataclass
class MetricReport:
    """Aggregate of the metric families computed by a run."""

    odometry: OdometryMetrics | None = None
    flow: FlowErrorStats | None = None
    tracking: IouStats | None = None

    def to_dict(self) -> dict:
        return {
            "odometry": self.odometry.to_dict() if self.odometry else None,
            "flow": self.flow.to_dict() if self.flow else None,
            "tracking": self.tracking.to_dict() if self.tracking else None,
        }

    def format_table(self) -> str:
        rows = []
        if self.odometry:
            o = self.odometry
            rows.append(("ARE [1e-3 deg/m]", f"{o.are_mdeg_per_m:.3f}"))
            rows.append(("ATE [%]", f"{o.ate_percent:.3f}"))
            rows.append(("pose samples", str(o.n_samples)))
        if self.flow:
            rows.append(("EPE mean [cells]", f"{self.flow.mean:.4f}"))
            rows.append(("EPE median [cells]", f"{self.flow.median:.4f}"))
            rows.append(("EPE max [cells]", f"{self.flow.max:.4f}"))
        if self.tracking:
            rows.append(("IoU mean", f"{self.tracking.mean:.4f}"))
            rows.append(("IoU objects", str(self.tracking.evaluated)))
            rows.append(("IoU skipped", str(self.tracking.skipped)))
        if not rows:
            return "(no metrics)"
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)
