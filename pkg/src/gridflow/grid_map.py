"""Multi-layer grid maps rasterized from lidar point clouds.

A grid map discretizes the ground plane around the sensor into square
cells. Each cell aggregates the reflections that fall into it: number of
reflections, minimum and maximum height, mean intensity, and the minimum
beam height of the rays passing over the cell (the shadow layer).

Cell convention used package-wide: x selects the column, y the row, and
cell (0, 0) sits at the minimum-x / minimum-y corner of the extent. A
point p lands in cell ``floor((p - extent_min) / cell_size)``. Continuous
grid coordinates place integer values at cell centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ValidationError
from .validation import check_nonnegative, check_positive

AGGREGATE_LAYERS = ("reflection_count", "min_height_m", "max_height_m", "mean_intensity")
SHADOW_LAYER = "shadow_height_m"
DEFAULT_LAYERS = AGGREGATE_LAYERS + (SHADOW_LAYER,)


@dataclass(frozen=True)
class GridConfig:
    """Geometry of a grid map: metric extent, cell size and sensor position.

    The extent is centered on the origin of the measurement frame, so a
    map of ``width_m`` x ``height_m`` covers ``[-width_m/2, width_m/2] x
    [-height_m/2, height_m/2]``. ``sensor_origin`` is the beam origin used
    for shadow casting and must lie inside the extent.
    """

    width_m: float = 60.0
    height_m: float = 60.0
    cell_size_m: float = 0.15
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 1.73)

    def __post_init__(self):
        check_positive(self.cell_size_m, "cell_size_m")
        check_positive(self.width_m, "width_m")
        check_positive(self.height_m, "height_m")
        for extent, name in ((self.width_m, "width_m"), (self.height_m, "height_m")):
            ratio = extent / self.cell_size_m
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValidationError(f"{name} must be an integer multiple of cell_size_m")
        ox, oy, _ = self.sensor_origin
        if not (self.min_x <= ox < self.min_x + self.width_m):
            raise ValidationError("sensor_origin x lies outside the map extent")
        if not (self.min_y <= oy < self.min_y + self.height_m):
            raise ValidationError("sensor_origin y lies outside the map extent")

    @property
    def cols(self) -> int:
        return round(self.width_m / self.cell_size_m)

    @property
    def rows(self) -> int:
        return round(self.height_m / self.cell_size_m)

    @property
    def min_x(self) -> float:
        return -self.width_m / 2.0

    @property
    def min_y(self) -> float:
        return -self.height_m / 2.0


@dataclass(frozen=True)
class PointCloud:
    """Lidar reflections: ``xyz`` (N, 3) meters plus per-point intensity in [0, 1]."""

    xyz: np.ndarray
    intensity: np.ndarray
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 1.73)

    def __post_init__(self):
        xyz = np.atleast_2d(np.asarray(self.xyz, dtype=np.float64))
        if xyz.size == 0:
            xyz = xyz.reshape(0, 3)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValidationError(f"xyz must have shape (N, 3), got {xyz.shape}")
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if inten.shape[0] != xyz.shape[0]:
            raise ValidationError("intensity length does not match point count")
        bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
        if bad.size:
            raise ValidationError(f"non-finite coordinates at record index {bad[0]}")
        bad = np.flatnonzero(~(np.isfinite(inten) & (inten >= 0.0) & (inten <= 1.0)))
        if bad.size:
            raise ValidationError(f"intensity out of [0, 1] at record index {bad[0]}")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.xyz.shape[0]


@dataclass
class GridMap:
    """Named 2D scalar fields over a common (rows, cols) cell lattice."""

    layers: dict[str, np.ndarray]
    cell_size_m: float
    frame_id: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("GridMap needs at least one layer")
        shapes = {name: np.shape(layer) for name, layer in self.layers.items()}
        first = next(iter(shapes.values()))
        if len(first) != 2:
            raise ValidationError("layers must be 2D fields")
        for name, shape in shapes.items():
            if shape != first:
                raise ValidationError(f"layer {name!r} shape {shape} != {first}")
        self.layers = {
            name: np.asarray(layer, dtype=np.float64) for name, layer in self.layers.items()
        }
        for name, layer in self.layers.items():
            if not np.all(np.isfinite(layer)):
                raise ValidationError(f"layer {name!r} contains non-finite values")
        check_positive(self.cell_size_m, "cell_size_m")

    @property
    def rows(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    @property
    def cols(self) -> int:
        return next(iter(self.layers.values())).shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def layer_names(self) -> tuple[str, ...]:
        return tuple(self.layers)

    def stacked(self) -> np.ndarray:
        """All layers as one (n_layers, rows, cols) array, in insertion order."""
        return np.stack(list(self.layers.values()), axis=0)

    def occupancy(self) -> np.ndarray:
        """Boolean field of cells holding at least one reflection."""
        if "reflection_count" not in self.layers:
            raise ValidationError("GridMap has no reflection_count layer")
        return self.layers["reflection_count"] > 0.0

    def with_layers(self, layers: dict[str, np.ndarray]) -> "GridMap":
        return GridMap(layers=layers, cell_size_m=self.cell_size_m, frame_id=self.frame_id)


def _cell_indices(cloud: PointCloud, cfg: GridConfig):
    """Column/row indices per point and the in-extent selection mask."""
    x = cloud.xyz[:, 0]
    y = cloud.xyz[:, 1]
    qx = (x - cfg.min_x) / cfg.cell_size_m
    qy = (y - cfg.min_y) / cfg.cell_size_m
    inside = (qx >= 0.0) & (qx < cfg.cols) & (qy >= 0.0) & (qy < cfg.rows)
    col = np.floor(qx).astype(np.int64)
    row = np.floor(qy).astype(np.int64)
    return col, row, inside


def rasterize(cloud: PointCloud, cfg: GridConfig, frame_id: int = 0) -> GridMap:
    """Aggregate a point cloud into the four reflection layers.

    Points outside the extent are dropped. Cells without reflections hold
    0 in every layer; validity is recovered from ``reflection_count > 0``.
    The per-cell intensity mean is accumulated in a canonical record order
    so the result does not depend on the input point order.
    """
    rows, cols = cfg.rows, cfg.cols
    count = np.zeros((rows, cols), dtype=np.float64)
    min_h = np.full((rows, cols), np.inf)
    max_h = np.full((rows, cols), -np.inf)
    inten_sum = np.zeros((rows, cols), dtype=np.float64)

    if len(cloud):
        col, row, inside = _cell_indices(cloud, cfg)
        col, row = col[inside], row[inside]
        z = cloud.xyz[inside, 2]
        inten = cloud.intensity[inside]
        if col.size:
            flat = row * cols + col
            # canonical order: cell index, then coordinates, then intensity
            order = np.lexsort((inten, z, cloud.xyz[inside, 1], cloud.xyz[inside, 0], flat))
            flat, z, inten = flat[order], z[order], inten[order]
            count = np.bincount(flat, minlength=rows * cols).astype(np.float64)
            inten_sum = np.bincount(flat, weights=inten, minlength=rows * cols)
            count = count.reshape(rows, cols)
            inten_sum = inten_sum.reshape(rows, cols)
            np.minimum.at(min_h, (flat // cols, flat % cols), z)
            np.maximum.at(max_h, (flat // cols, flat % cols), z)

    occupied = count > 0
    min_h = np.where(occupied, min_h, 0.0)
    max_h = np.where(occupied, max_h, 0.0)
    mean_inten = np.divide(inten_sum, count, out=np.zeros_like(inten_sum), where=occupied)
    layers = {
        "reflection_count": count,
        "min_height_m": min_h,
        "max_height_m": max_h,
        "mean_intensity": mean_inten,
    }
    return GridMap(layers=layers, cell_size_m=cfg.cell_size_m, frame_id=frame_id)


def cast_shadows(cloud: PointCloud, cfg: GridConfig) -> np.ndarray:
    """Minimum beam height above ground per cell crossed by sensor rays.

    Every ray runs from the sensor origin to a reflection. An exact integer
    grid traversal visits each crossed cell once; the beam height stored at
    a cell is the ray's interpolated z at the parameter where it enters the
    cell. Cells crossed by several rays keep the minimum. Untouched cells
    hold the sentinel 0. Reflections outside the extent are skipped.
    """
    rows, cols = cfg.rows, cfg.cols
    shadow = np.full((rows, cols), np.inf)

    sx, sy, sz = cloud.sensor_origin
    q0x = (sx - cfg.min_x) / cfg.cell_size_m
    q0y = (sy - cfg.min_y) / cfg.cell_size_m
    if not (0.0 <= q0x < cols and 0.0 <= q0y < rows):
        raise ValidationError("sensor origin lies outside the map extent")
    c0x, c0y = int(np.floor(q0x)), int(np.floor(q0y))

    if len(cloud):
        col, row, inside = _cell_indices(cloud, cfg)
        q1x = (cloud.xyz[inside, 0] - cfg.min_x) / cfg.cell_size_m
        q1y = (cloud.xyz[inside, 1] - cfg.min_y) / cfg.cell_size_m
        z1 = cloud.xyz[inside, 2]
        c1x, c1y = col[inside], row[inside]
        n = c1x.size
        if n:
            # the sensor cell is entered at t = 0 by every ray
            shadow[c0y, c0x] = min(shadow[c0y, c0x], sz)

            stepx = np.sign(c1x - c0x).astype(np.int64)
            stepy = np.sign(c1y - c0y).astype(np.int64)
            nx = np.abs(c1x - c0x)
            ny = np.abs(c1y - c0y)

            def crossings(nk, step, c0, q0, q1):
                rid = np.repeat(np.arange(n), nk)
                k = np.arange(nk.sum()) - np.repeat(np.cumsum(nk) - nk, nk) + 1
                boundary = np.where(step[rid] > 0, c0 + k, c0 - k + 1)
                t = (boundary - q0) / (q1[rid] - q0)
                return rid, t

            rid_x, t_x = crossings(nx, stepx, c0x, q0x, q1x)
            rid_y, t_y = crossings(ny, stepy, c0y, q0y, q1y)

            rid = np.concatenate([rid_x, rid_y])
            t = np.concatenate([t_x, t_y])
            axis = np.concatenate([np.zeros(rid_x.size, np.int8), np.ones(rid_y.size, np.int8)])
            dcol = np.where(axis == 0, stepx[rid], 0)
            drow = np.where(axis == 1, stepy[rid], 0)

            order = np.lexsort((axis, t, rid))
            rid, t, dcol, drow = rid[order], t[order], dcol[order], drow[order]

            # per-ray inclusive prefix of the steps gives the entered cell
            counts = (nx + ny).astype(np.int64)
            seg_start = np.repeat(np.cumsum(counts) - counts, counts)
            cum_c = np.cumsum(dcol)
            cum_r = np.cumsum(drow)
            cell_c = c0x + cum_c - np.concatenate(([0], cum_c))[seg_start]
            cell_r = c0y + cum_r - np.concatenate(([0], cum_r))[seg_start]

            height = sz + (z1[rid] - sz) * t
            np.minimum.at(shadow, (cell_r, cell_c), height)

    return np.where(np.isfinite(shadow), shadow, 0.0)


def gaussian_blur(grid: GridMap, sigma_cells: float) -> GridMap:
    """Convolve every layer with a normalized separable Gaussian.

    Kernel radius is ``ceil(3 * sigma)``; boundaries are handled by
    symmetric reflection, which together with the normalized kernel keeps
    each layer's sum unchanged. ``sigma_cells == 0`` returns the input.
    """
    sigma = check_nonnegative(sigma_cells, "sigma_cells")
    if sigma == 0.0:
        return grid
    kernel = gaussian_kernel(sigma)
    blurred = {}
    for name, layer in grid.layers.items():
        out = correlate1d(layer, kernel, axis=0, mode="reflect")
        out = correlate1d(out, kernel, axis=1, mode="reflect")
        blurred[name] = out
    return grid.with_layers(blurred)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian samples over radius ``ceil(3 * sigma)``."""
    radius = int(np.ceil(3.0 * sigma))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(i**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def build_grid_map(cloud: PointCloud, cfg: GridConfig, frame_id: int = 0) -> GridMap:
    """Rasterize a cloud and attach the ray-cast shadow layer."""
    grid = rasterize(cloud, cfg, frame_id=frame_id)
    grid.layers[SHADOW_LAYER] = cast_shadows(cloud, cfg)
    return grid


class GridMapper(TransformerMixin, BaseEstimator):
    """Stateless transformer turning point clouds into multi-layer grid maps.

    Parameters mirror :class:`GridConfig`; ``blur_sigma_cells`` optionally
    applies a fixed Gaussian blur to the finished map.
    """

    def __init__(
        self,
        width_m: float = 60.0,
        height_m: float = 60.0,
        cell_size_m: float = 0.15,
        sensor_origin: tuple[float, float, float] = (0.0, 0.0, 1.73),
        blur_sigma_cells: float = 0.0,
    ):
        self.width_m = width_m
        self.height_m = height_m
        self.cell_size_m = cell_size_m
        self.sensor_origin = sensor_origin
        self.blur_sigma_cells = blur_sigma_cells

    def grid_config(self) -> GridConfig:
        return GridConfig(
            width_m=self.width_m,
            height_m=self.height_m,
            cell_size_m=self.cell_size_m,
            sensor_origin=tuple(self.sensor_origin),
        )

    def fit(self, X=None, y=None):
        self.grid_config()  # parameter validation only
        return self

    def transform(self, X):
        """Map a PointCloud (or sequence of them) to GridMap(s)."""
        cfg = self.grid_config()

        def one(cloud, frame_id):
            grid = build_grid_map(cloud, cfg, frame_id=frame_id)
            return gaussian_blur(grid, self.blur_sigma_cells)

        if isinstance(X, PointCloud):
            return one(X, 0)
        return [one(cloud, i) for i, cloud in enumerate(X)]
