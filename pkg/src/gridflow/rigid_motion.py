"""Closed-form rigid ego-motion from flow correspondences.

A planar rigid transform maps centered grid coordinates between two
frames. It is estimated by weighted least squares in closed form, made
robust by iterative reweighting where the weight of a cell is the motion
mask derived from its residual. Coordinates are in cell units about the
grid center; metric conversion happens at the evaluation boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import sobel

from .exceptions import EstimationError, ValidationError
from .validation import check_finite
from .warp import Direction, FlowField


def _fsum(values: np.ndarray) -> float:
    """Exactly rounded sum; independent of operand order."""
    return math.fsum(values.ravel().tolist())


@dataclass(frozen=True)
class RigidTransform2D:
    """Rotation by ``theta`` about the grid center plus translation ``t`` (cells)."""

    theta: float = 0.0
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        theta = float(self.theta)
        if not math.isfinite(theta):
            raise ValidationError("theta must be finite")
        # wrap into (-pi, pi]
        theta = math.remainder(theta, 2.0 * math.pi)
        if theta == -math.pi:
            theta = math.pi
        t = np.asarray(self.t, dtype=np.float64).reshape(2)
        check_finite(t, "t")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, direction: Direction = Direction.FORWARD) -> "RigidTransform2D":
        return cls(0.0, np.zeros(2), direction)

    @property
    def rotation_matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 2)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.t

    def inverse(self) -> "RigidTransform2D":
        return RigidTransform2D(
            -self.theta, -(self.rotation_matrix.T @ self.t), self.direction.flipped
        )

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """``self`` applied after ``other``; keeps the tag of ``self``."""
        return RigidTransform2D(
            self.theta + other.theta,
            self.rotation_matrix @ other.t + self.t,
            self.direction,
        )


@dataclass(frozen=True)
class WeightedCorrespondences:
    """Paired source/target coordinates (cells) with weights in [0, 1]."""

    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        source = check_finite(self.source, "source").reshape(-1, 2)
        target = check_finite(self.target, "target").reshape(-1, 2)
        weights = check_finite(self.weights, "weights").reshape(-1)
        if not (source.shape[0] == target.shape[0] == weights.shape[0]):
            raise ValidationError("source, target and weights must have equal length")
        if weights.size and (weights.min() < 0.0 or weights.max() > 1.0):
            raise ValidationError("weights must lie in [0, 1]")
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_flow(cls, flow: FlowField, valid: np.ndarray) -> "WeightedCorrespondences":
        """Correspondences x -> x + d(x) over the valid set, unit weights."""
        source = centered_coords(*flow.shape)[valid]
        target = source + flow.d[valid]
        return cls(source, target, np.ones(source.shape[0]), flow.direction)

    def __len__(self) -> int:
        return self.weights.shape[0]


def centered_coords(rows: int, cols: int) -> np.ndarray:
    """(rows, cols, 2) cell-center coordinates about the grid center."""
    y, x = np.mgrid[0:rows, 0:cols].astype(np.float64)
    return np.stack([x - (cols - 1) / 2.0, y - (rows - 1) / 2.0], axis=-1)


def pose_compose(pose, step) -> np.ndarray:
    """SE(2) pose composition; poses are (x, y, theta) triples."""
    x, y, th = pose
    dx, dy, dth = step
    c, s = math.cos(th), math.sin(th)
    return np.array([x + c * dx - s * dy, y + s * dx + c * dy, th + dth])


def pose_relative(pose_a, pose_b) -> np.ndarray:
    """Pose of ``b`` expressed in the frame of ``a``."""
    xa, ya, tha = pose_a
    xb, yb, thb = pose_b
    c, s = math.cos(-tha), math.sin(-tha)
    dx, dy = xb - xa, yb - ya
    return np.array([c * dx - s * dy, s * dx + c * dy, thb - tha])


def estimate_rigid(corr: WeightedCorrespondences) -> RigidTransform2D:
    """Weighted least-squares rigid transform minimizing sum w |R x + t - y|^2.

    Closed form: the rotation angle comes from the weighted cross-covariance
    of the centered point sets, the translation aligns the weighted
    centroids. Accumulations use exactly rounded sums, so the estimate does
    not depend on correspondence order and zero-weight points have no
    effect.
    """
    if len(corr) < 2:
        raise EstimationError("need at least 2 correspondences")
    w = corr.weights
    sw = _fsum(w)
    if not sw > 0.0:
        raise EstimationError("sum of weights must be positive")
    sx, sy = corr.source[:, 0], corr.source[:, 1]
    tx, ty = corr.target[:, 0], corr.target[:, 1]
    mu_x = np.array([_fsum(w * sx) / sw, _fsum(w * sy) / sw])
    mu_y = np.array([_fsum(w * tx) / sw, _fsum(w * ty) / sw])
    ax, ay = sx - mu_x[0], sy - mu_x[1]
    bx, by = tx - mu_y[0], ty - mu_y[1]
    if not (np.any(ax != 0.0) or np.any(ay != 0.0)):
        raise EstimationError("source points are coincident")
    dot = _fsum(w * (ax * bx + ay * by))
    cross = _fsum(w * (ax * by - ay * bx))
    theta = math.atan2(cross, dot)
    c, s = math.cos(theta), math.sin(theta)
    t = mu_y - np.array([c * mu_x[0] - s * mu_x[1], s * mu_x[0] + c * mu_x[1]])
    return RigidTransform2D(theta, t, corr.direction)


def irls_estimate(
    flow: FlowField, valid: np.ndarray, iterations: int = 3
) -> tuple[RigidTransform2D, np.ndarray]:
    """Robust transform estimate by iteratively reweighted least squares.

    Weights start at 1 on the valid set; each round re-estimates the
    transform, then replaces the weights with the motion mask of the
    residuals. Returns the final transform together with the final mask
    (zero outside the valid set). One iteration equals the plain weighted
    estimate with unit weights.
    """
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EstimationError("valid set is empty")
    source = centered_coords(*flow.shape)[valid]
    target = source + flow.d[valid]
    weights = np.ones(source.shape[0])
    transform = None
    for _ in range(iterations):
        corr = WeightedCorrespondences(source, target, weights, flow.direction)
        transform = estimate_rigid(corr)
        residual = transform.apply(source) - target
        weights = 1.0 - np.tanh(np.sum(residual * residual, axis=1))
    mask = np.zeros(flow.shape)
    mask[valid] = weights
    return transform, mask


def motion_flow(transform: RigidTransform2D, rows: int, cols: int) -> FlowField:
    """Flow field induced by a rigid transform: d(x) = R x + t - x."""
    coords = centered_coords(rows, cols)
    c, s = math.cos(transform.theta), math.sin(transform.theta)
    px, py = coords[..., 0], coords[..., 1]
    dx = (c * px - s * py + transform.t[0]) - px
    dy = (s * px + c * py + transform.t[1]) - py
    return FlowField(np.stack([dx, dy], axis=-1), transform.direction)


def motion_mask(residuals: np.ndarray) -> np.ndarray:
    """Per-cell weight 1 - tanh(|r|^2), strictly decreasing in the residual norm."""
    residuals = check_finite(residuals, "residuals")
    if residuals.shape[-1] != 2:
        raise ValidationError("residuals must have a trailing dimension of 2")
    return 1.0 - np.tanh(np.sum(residuals * residuals, axis=-1))


def spatial_mask(motion_mask_values: np.ndarray, mode: str = "magnitude") -> np.ndarray:
    """Sobel gradient magnitude of the motion mask, normalized to [0, 1].

    ``mode="magnitude"`` returns the normalized magnitude itself (high at
    motion-mask boundaries); ``mode="complement"`` returns one minus it. An
    all-zero gradient normalizes to an all-zero mask.
    """
    m = check_finite(motion_mask_values, "motion mask")
    if mode not in ("magnitude", "complement"):
        raise ValidationError(f"unknown spatial mask mode {mode!r}")
    gx = sobel(m, axis=1, mode="reflect")
    gy = sobel(m, axis=0, mode="reflect")
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max() if magnitude.size else 0.0
    if peak > 0.0:
        magnitude = magnitude / peak
    else:
        magnitude = np.zeros_like(magnitude)
    return 1.0 - magnitude if mode == "complement" else magnitude
