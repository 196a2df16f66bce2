"""Binary and text file formats: .flo flow, point clouds, grid map
containers, KITTI-style pose lines and PPM rasters.

All binary formats are little-endian. Read errors carry the byte offset
where parsing failed; truncation reports the offset where the data ran
out.
"""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import FormatError, ValidationError
from .evaluation import Trajectory
from .grid_map import GridMap, PointCloud
from .rigid_motion import RigidTransform2D
from .warp import Direction, FlowField

FLO_MAGIC = 202021.25
GMAP_MAGIC = b"GMAP"
GMAP_VERSION = 1


class _Reader:
    """Byte cursor that reports the failure offset on truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"unexpected end of file, needed {n} bytes at offset {self.pos}",
                offset=len(self.buf),
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def write_flo(path, flow: FlowField) -> None:
    """Middlebury .flo: magic float, int32 width/height, interleaved f32 uv."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", flow.cols, flow.rows))
        fh.write(flow.d.astype("<f4").tobytes())


def read_flo(path, direction: Direction = Direction.FORWARD) -> FlowField:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    (magic,) = reader.unpack("f")
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad .flo magic {magic!r}", offset=0)
    cols, rows = reader.unpack("ii")
    if cols <= 0 or rows <= 0:
        raise FormatError(f"bad .flo dimensions {cols}x{rows}", offset=4)
    raw = reader.take(rows * cols * 2 * 4)
    d = np.frombuffer(raw, dtype="<f4").reshape(rows, cols, 2).astype(np.float64)
    return FlowField(d, direction)


def write_point_cloud(path, cloud: PointCloud) -> None:
    """Headerless binary records of four little-endian f32: x, y, z, intensity."""
    data = np.column_stack([cloud.xyz, cloud.intensity]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(data.tobytes())


def read_point_cloud(path, sensor_origin=(0.0, 0.0, 1.73)) -> PointCloud:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) % 16:
        raise FormatError(
            "point cloud size is not a multiple of 16-byte records",
            offset=len(buf) - len(buf) % 16,
        )
    data = np.frombuffer(buf, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(xyz=data[:, :3], intensity=data[:, 3], sensor_origin=tuple(sensor_origin))


def write_grid_map(path, grid: GridMap) -> None:
    """Container: magic, version, cols, rows, cell size, layer names, then
    row-major f32 layer data in name order."""
    with open(path, "wb") as fh:
        fh.write(GMAP_MAGIC)
        fh.write(struct.pack("<I", GMAP_VERSION))
        fh.write(struct.pack("<II", grid.cols, grid.rows))
        fh.write(struct.pack("<f", grid.cell_size_m))
        fh.write(struct.pack("<I", len(grid.layers)))
        for name in grid.layer_names():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
        for name in grid.layer_names():
            fh.write(grid.layers[name].astype("<f4").tobytes())


def read_grid_map(path, frame_id: int = 0) -> GridMap:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic = reader.take(4)
    if magic != GMAP_MAGIC:
        raise FormatError(f"bad grid map magic {magic!r}", offset=0)
    (version,) = reader.unpack("I")
    if version != GMAP_VERSION:
        raise FormatError(f"unsupported grid map version {version}", offset=4)
    cols, rows = reader.unpack("II")
    (cell_size,) = reader.unpack("f")
    (n_layers,) = reader.unpack("I")
    names = []
    for _ in range(n_layers):
        (name_len,) = reader.unpack("I")
        names.append(reader.take(name_len).decode("utf-8"))
    layers = {}
    for name in names:
        raw = reader.take(rows * cols * 4)
        layers[name] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return GridMap(layers=layers, cell_size_m=float(cell_size), frame_id=frame_id)


def _pose_to_row(x: float, y: float, theta: float) -> list[float]:
    c, s = np.cos(theta), np.sin(theta)
    return [c, -s, 0.0, x, s, c, 0.0, y, 0.0, 0.0, 1.0, 0.0]


def write_pose_file(path, trajectory: Trajectory) -> None:
    """One row-major 3x4 matrix per line, planar motion embedded in SE(3)."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, theta in trajectory.poses:
            fh.write(" ".join(f"{v:.12g}" for v in _pose_to_row(x, y, theta)) + "\n")


def read_pose_file(path) -> Trajectory:
    poses = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            values = [float(tok) for tok in line.split()]
            if len(values) != 12:
                raise ValidationError(f"pose line {line_no} needs 12 floats, got {len(values)}")
            poses.append([values[3], values[7], np.arctan2(values[4], values[0])])
    return Trajectory(np.array(poses, dtype=np.float64))


def write_transform_file(path, transforms: list[RigidTransform2D], cell_size_m: float) -> None:
    """Per-pair transforms in pose-line format, translations in meters."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in transforms:
            row = _pose_to_row(t.t[0] * cell_size_m, t.t[1] * cell_size_m, t.theta)
            fh.write(" ".join(f"{v:.12g}" for v in row) + "\n")


def read_transform_file(
    path, cell_size_m: float, direction: Direction = Direction.FORWARD
) -> list[RigidTransform2D]:
    trajectory = read_pose_file(path)
    return [
        RigidTransform2D(theta, np.array([x, y]) / cell_size_m, direction)
        for x, y, theta in trajectory.poses
    ]


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6). Expects uint8 of shape (rows, cols, 3)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValidationError("image must be uint8 with shape (rows, cols, 3)")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError("not a binary PPM (P6) file", offset=0)
    cols, rows = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise FormatError("unsupported PPM max value", offset=len(parts[0]) + len(parts[1]) + 2)
    data = parts[3]
    expected = rows * cols * 3
    if len(data) < expected:
        raise FormatError("truncated PPM payload", offset=len(buf))
    return np.frombuffer(data[:expected], dtype=np.uint8).reshape(rows, cols, 3)


def mask_to_image(mask: np.ndarray) -> np.ndarray:
    """Grayscale raster of a [0, 1] mask as an RGB uint8 image."""
    gray = np.round(255.0 * np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0))
    return np.repeat(gray.astype(np.uint8)[..., None], 3, axis=2)
