"""Flow fields, bilinear sampling and backward warping of grid maps.

Flow is stored as a per-cell displacement ``d(x)`` in cell units; the
mapped coordinate is recovered as ``x + d(x)``. Sampling uses continuous
grid coordinates with integer values at cell centers; coordinates outside
``[0, cols-1] x [0, rows-1]`` are flagged invalid rather than clamped.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .grid_map import GridMap
from .validation import check_2d, check_same_shape


class Direction(enum.Enum):
    """Temporal direction of a flow field or transform."""

    FORWARD = "2<-1"  # maps frame-1 coordinates into frame 2
    BACKWARD = "1<-2"

    @property
    def flipped(self) -> "Direction":
        return Direction.BACKWARD if self is Direction.FORWARD else Direction.FORWARD


@dataclass
class FlowField:
    """Dense per-cell 2D displacement in cell units.

    ``d`` has shape (rows, cols, 2) with channel 0 the x (column)
    displacement and channel 1 the y (row) displacement.
    """

    d: np.ndarray
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValidationError(f"flow must have shape (rows, cols, 2), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValidationError("flow contains non-finite values")
        self.d = d

    @classmethod
    def zeros(cls, rows: int, cols: int, direction: Direction = Direction.FORWARD):
        return cls(np.zeros((rows, cols, 2)), direction)

    @classmethod
    def from_uv(cls, u, v, direction: Direction = Direction.FORWARD):
        return cls(np.stack([np.asarray(u, float), np.asarray(v, float)], axis=-1), direction)

    @property
    def rows(self) -> int:
        return self.d.shape[0]

    @property
    def cols(self) -> int:
        return self.d.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.d[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.d[..., 1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.d[..., 0], self.d[..., 1])

    def copy(self) -> "FlowField":
        return FlowField(self.d.copy(), self.direction)


def grid_coords(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous grid coordinates (x, y) of every cell center."""
    y, x = np.mgrid[0:rows, 0:cols]
    return x.astype(np.float64), y.astype(np.float64)


def mapped_coords(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates ``x + d(x)`` every cell maps to under the flow."""
    x, y = grid_coords(flow.rows, flow.cols)
    return x + flow.d[..., 0], y + flow.d[..., 1]


def in_bounds(x, y, rows: int, cols: int) -> np.ndarray:
    return (x >= 0.0) & (x <= cols - 1.0) & (y >= 0.0) & (y <= rows - 1.0)


def _gather_corners(layer: np.ndarray, x, y):
    """Corner values and fractional weights for bilinear interpolation.

    Out-of-bounds coordinates are evaluated at clipped positions; callers
    mask them out with :func:`in_bounds`.
    """
    rows, cols = layer.shape
    xc = np.clip(x, 0.0, cols - 1.0)
    yc = np.clip(y, 0.0, rows - 1.0)
    x0 = np.minimum(np.floor(xc), cols - 2.0) if cols > 1 else np.zeros_like(xc)
    y0 = np.minimum(np.floor(yc), rows - 2.0) if rows > 1 else np.zeros_like(yc)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    wx = xc - x0
    wy = yc - y0
    v00 = layer[y0, x0]
    v01 = layer[y0, x1]
    v10 = layer[y1, x0]
    v11 = layer[y1, x1]
    return v00, v01, v10, v11, wx, wy


def bilinear_sample(layer: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation of ``layer`` at continuous coordinates.

    Returns ``(values, valid)`` where out-of-bounds samples carry value 0
    and ``valid`` False. Accepts scalars or arrays of coordinates.
    """
    layer = check_2d(layer, "layer")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = in_bounds(x, y, *layer.shape)
    v00, v01, v10, v11, wx, wy = _gather_corners(layer, x, y)
    top = v00 * (1.0 - wx) + v01 * wx
    bottom = v10 * (1.0 - wx) + v11 * wx
    value = top * (1.0 - wy) + bottom * wy
    return np.where(valid, value, 0.0), valid


def sample_gradient(layer: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Exact derivative of the bilinear interpolant w.r.t. the coordinate.

    Piecewise constant per cell in x and y; zero outside the sampling
    bounds. Returns ``(d/dx, d/dy)``.
    """
    layer = check_2d(layer, "layer")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = in_bounds(x, y, *layer.shape)
    v00, v01, v10, v11, wx, wy = _gather_corners(layer, x, y)
    gx = (v01 - v00) * (1.0 - wy) + (v11 - v10) * wy
    gy = (v10 - v00) * (1.0 - wx) + (v11 - v01) * wx
    return np.where(valid, gx, 0.0), np.where(valid, gy, 0.0)


def sample_value_and_gradient(layer: np.ndarray, x, y):
    """Fused bilinear value and derivative sharing one corner gather.

    Returns ``(value, d/dx, d/dy, valid)`` with zeros outside bounds.
    """
    layer = check_2d(layer, "layer")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = in_bounds(x, y, *layer.shape)
    v00, v01, v10, v11, wx, wy = _gather_corners(layer, x, y)
    top = v00 * (1.0 - wx) + v01 * wx
    bottom = v10 * (1.0 - wx) + v11 * wx
    value = top * (1.0 - wy) + bottom * wy
    gx = (v01 - v00) * (1.0 - wy) + (v11 - v10) * wy
    gy = bottom - top
    zero = 0.0
    return (
        np.where(valid, value, zero),
        np.where(valid, gx, zero),
        np.where(valid, gy, zero),
        valid,
    )


def compute_valid_set(source: GridMap, flow: FlowField, target_shape=None) -> np.ndarray:
    """Cells participating in the losses for one direction.

    A cell is valid iff it holds a reflection in the source frame and its
    mapped coordinate lands inside the target frame bounds.
    """
    check_same_shape(source.layers[next(iter(source.layers))], flow.d[..., 0], "source", "flow")
    if target_shape is None:
        target_shape = source.shape
    mx, my = mapped_coords(flow)
    return source.occupancy() & in_bounds(mx, my, *target_shape)


def warp_backward(
    target: GridMap, flow: FlowField, source: GridMap | None = None
) -> tuple[GridMap, np.ndarray]:
    """Sample every layer of ``target`` at the coordinates the flow maps to.

    For a flow tagged 2<-1 this produces the target (frame 2) expressed in
    frame-1 coordinates. Returns the warped map and the valid set; when
    ``source`` is omitted validity reduces to the in-bounds check.
    """
    if (target.rows, target.cols) != flow.shape:
        raise ValidationError(
            f"target shape {(target.rows, target.cols)} does not match flow shape {flow.shape}"
        )
    mx, my = mapped_coords(flow)
    valid = in_bounds(mx, my, target.rows, target.cols)
    if source is not None:
        check_same_shape(flow.d[..., 0], source.layers[next(iter(source.layers))],
                         "flow", "source")
        valid = valid & source.occupancy()
    warped = {}
    for name, layer in target.layers.items():
        values, _ = bilinear_sample(layer, mx, my)
        warped[name] = values
    return target.with_layers(warped), valid
