"""Flow visualization: direction as hue, magnitude as value in HSV."""

from __future__ import annotations

import numpy as np

from .validation import check_positive
from .warp import FlowField


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV (h in [0, 1)) to RGB in [0, 1]."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def render_flow_hsv(flow: FlowField, max_norm: float | None = None) -> np.ndarray:
    """RGB uint8 raster: hue encodes flow direction, value its norm.

    Norms are scaled by ``max_norm`` (defaults to the field maximum) and
    clipped at 1; zero flow renders black. Total for any finite flow.
    """
    magnitude = flow.magnitude()
    if max_norm is None:
        max_norm = float(magnitude.max())
        if max_norm == 0.0:
            return np.zeros(flow.shape + (3,), dtype=np.uint8)
    check_positive(max_norm, "max_norm")
    hue = np.arctan2(flow.d[..., 1], flow.d[..., 0]) / (2.0 * np.pi) % 1.0
    value = np.minimum(magnitude / max_norm, 1.0)
    rgb = _hsv_to_rgb(hue, np.ones_like(hue), value)
    return np.round(255.0 * rgb).astype(np.uint8)
