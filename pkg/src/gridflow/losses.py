"""Data, motion and spatial consistency objective with analytic gradients.

The objective couples two grid maps through a pair of flow fields. Per
direction it sums three robustified terms over the valid cells: the data
term compares source cells against the backward-warped target, the motion
term compares the flow against the flow induced by the rigid transform,
and the spatial term penalizes the second difference of the flow. Each
term carries a mask weight plus a regularizer that keeps masks away from
the all-zero shortcut.

Masks and transforms enter as fixed inputs: gradients are taken with
respect to the two displacement fields only (the motion mask can be made
differentiable through its tanh with ``differentiable_motion_mask``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .grid_map import GridMap
from .rigid_motion import RigidTransform2D, motion_flow
from .validation import check_in_unit_interval, check_nonnegative, check_same_shape
from .warp import (
    FlowField,
    _gather_corners,
    bilinear_sample,
    compute_valid_set,
    in_bounds,
    mapped_coords,
)

CHARBONNIER_OFFSET = 1e-3
CHARBONNIER_EXPONENT = 0.45

SECOND_DIFFERENCE = "second_difference"
FIRST_DIFFERENCE = "first_difference"
STENCIL_MODES = (SECOND_DIFFERENCE, FIRST_DIFFERENCE)


def charbonnier(x):
    """Generalized Charbonnier penalty ``(x + 1e-3) ** 0.45`` for x >= 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise ValidationError("charbonnier argument must be >= 0")
    return (x + CHARBONNIER_OFFSET) ** CHARBONNIER_EXPONENT


def charbonnier_grad(x):
    """Derivative of :func:`charbonnier`."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise ValidationError("charbonnier argument must be >= 0")
    return CHARBONNIER_EXPONENT * (x + CHARBONNIER_OFFSET) ** (CHARBONNIER_EXPONENT - 1.0)


def mask_regularizer(m):
    """Penalty ``charbonnier((1 - m)^2)`` pushing mask values toward 1."""
    m = np.asarray(m, dtype=np.float64)
    if np.any((m < 0.0) | (m > 1.0)):
        raise ValidationError("mask values must lie in [0, 1]")
    return charbonnier((1.0 - m) ** 2)


def mask_regularizer_grad(m):
    """Derivative of :func:`mask_regularizer` with respect to the mask value."""
    m = np.asarray(m, dtype=np.float64)
    one_minus = 1.0 - m
    return -2.0 * one_minus * charbonnier_grad(one_minus**2)


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative multipliers for the three terms and the mask regularizers."""

    lambda_data: float = 1.0
    lambda_motion: float = 1.0
    lambda_spatial: float = 1.0
    lambda_reg: float = 1.0

    def __post_init__(self):
        for name in ("lambda_data", "lambda_motion", "lambda_spatial", "lambda_reg"):
            check_nonnegative(getattr(self, name), name)


@dataclass(frozen=True)
class MaskSet:
    """The three per-cell weights of one temporal direction."""

    data: np.ndarray
    motion: np.ndarray
    spatial: np.ndarray

    def __post_init__(self):
        for name in ("data", "motion", "spatial"):
            object.__setattr__(self, name, check_in_unit_interval(getattr(self, name), name))
        check_same_shape(self.data, self.motion, "data mask", "motion mask")
        check_same_shape(self.data, self.spatial, "data mask", "spatial mask")

    @classmethod
    def ones(cls, rows: int, cols: int) -> "MaskSet":
        one = np.ones((rows, cols))
        return cls(one, one.copy(), one.copy())


@dataclass(frozen=True)
class DirectionBreakdown:
    """Weighted loss parts of one direction; ``total`` is their fixed-order sum."""

    direction: str
    data: float
    data_reg: float
    motion: float
    motion_reg: float
    spatial: float
    spatial_reg: float
    valid_cells: int
    spatial_cells: int
    total: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class LossBreakdown:
    """Both directions of the objective plus the grand total."""

    forward: DirectionBreakdown
    backward: DirectionBreakdown
    weights: LossWeights
    total: float

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "forward": self.forward.to_dict(),
            "backward": self.backward.to_dict(),
            "weights": dict(self.weights.__dict__),
        }


BOUNDARY_BAND_CELLS = 1.0


def _boundary_weight(x, y, rows, cols, want_grad):
    """Continuous fade of sampled values to zero at the target bounds.

    Weight 1 in the interior, linear ramp to 0 over the outermost band,
    exactly 0 outside. This is the continuous counterpart of "out of
    bounds samples are zero": without it, a warped cell crossing the frame
    edge would change the loss discontinuously and stall the descent.
    """
    band = BOUNDARY_BAND_CELLS
    dist_x = np.minimum(x, cols - 1.0 - x)
    dist_y = np.minimum(y, rows - 1.0 - y)
    wx = np.clip(dist_x / band, 0.0, 1.0)
    wy = np.clip(dist_y / band, 0.0, 1.0)
    if not want_grad:
        return wx * wy, None, None
    in_ramp_x = (dist_x > 0.0) & (dist_x < band)
    dwx = np.where(in_ramp_x, np.where(x < cols - 1.0 - x, 1.0, -1.0) / band, 0.0)
    in_ramp_y = (dist_y > 0.0) & (dist_y < band)
    dwy = np.where(in_ramp_y, np.where(y < rows - 1.0 - y, 1.0, -1.0) / band, 0.0)
    return wx * wy, dwx * wy, wx * dwy


def _sample_apodized(layer, x, y, want_grad):
    """Bilinear sample times the boundary weight, optionally with its
    exact derivative with respect to the sample coordinate."""
    v00, v01, v10, v11, fx, fy = _gather_corners(layer, x, y)
    top = v00 * (1.0 - fx) + v01 * fx
    bottom = v10 * (1.0 - fx) + v11 * fx
    raw = top * (1.0 - fy) + bottom * fy
    weight, dwx, dwy = _boundary_weight(x, y, *layer.shape, want_grad)
    value = raw * weight
    if not want_grad:
        return value, None, None
    inside = in_bounds(x, y, *layer.shape)
    gx = np.where(inside, (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy, 0.0)
    gy = np.where(inside, bottom - top, 0.0)
    return value, gx * weight + raw * dwx, gy * weight + raw * dwy


def occlusion_mask(
    flow_fw: FlowField,
    flow_bw: FlowField,
    alpha1: float = 0.01,
    alpha2: float = 0.5,
) -> np.ndarray:
    """Binary data mask from the forward-backward consistency check.

    A cell is marked occluded (0) when the round trip ``d_fw(x) +
    d_bw(x + d_fw(x))`` misses by more than ``alpha1`` times the summed
    squared magnitudes plus ``alpha2``. Cells mapping out of bounds get 0.
    """
    if flow_fw.direction == flow_bw.direction:
        raise ValidationError("occlusion mask needs flows of opposite directions")
    check_same_shape(flow_fw.d, flow_bw.d, "forward flow", "backward flow")
    mx, my = mapped_coords(flow_fw)
    bu, valid_u = bilinear_sample(flow_bw.d[..., 0], mx, my)
    bv, _ = bilinear_sample(flow_bw.d[..., 1], mx, my)
    round_trip = (flow_fw.d[..., 0] + bu) ** 2 + (flow_fw.d[..., 1] + bv) ** 2
    mag = (
        flow_fw.d[..., 0] ** 2
        + flow_fw.d[..., 1] ** 2
        + bu**2
        + bv**2
    )
    consistent = round_trip <= alpha1 * mag + alpha2
    return np.where(valid_u & consistent, 1.0, 0.0)


def _masked_term(per_cell: np.ndarray, mask: np.ndarray, select: np.ndarray, lambda_reg: float):
    """Sum ``mask * rho(per_cell)`` and the regularizer over ``select``."""
    main = float(np.sum(np.where(select, mask * charbonnier(per_cell), 0.0)))
    reg = float(np.sum(np.where(select, mask_regularizer(mask), 0.0)))
    return main, reg


def data_loss(
    map1: GridMap,
    map2: GridMap,
    flow: FlowField,
    mask_data: np.ndarray,
    valid: np.ndarray,
    lambda_reg: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Robustified photometric term plus its per-layer residual field.

    Residuals stack the per-layer differences between the source map and
    the backward-warped target; they are zeroed outside the valid set.
    """
    if map1.layer_names() != map2.layer_names():
        raise ValidationError("maps must share the same layers")
    mask_data = check_in_unit_interval(mask_data, "data mask")
    mx, my = mapped_coords(flow)
    residuals, r2 = _data_residuals(map1, map2, flow, mx, my)
    main, reg = _masked_term(r2, mask_data, valid, lambda_reg)
    residuals = np.where(valid[None, ...], residuals, 0.0)
    return main + lambda_reg * reg, residuals


def _data_residuals(source: GridMap, target: GridMap, flow: FlowField, mx, my):
    residuals = np.empty((len(source.layers),) + flow.shape)
    for i, name in enumerate(source.layer_names()):
        warped, _, _ = _sample_apodized(target.layers[name], mx, my, want_grad=False)
        residuals[i] = source.layers[name] - warped
    return residuals, np.sum(residuals * residuals, axis=0)


def motion_residual(flow: FlowField, motion: FlowField) -> np.ndarray:
    """Difference between rigid-motion flow and scene flow, per cell."""
    if flow.direction != motion.direction:
        raise ValidationError("flow and motion flow have mismatched directions")
    check_same_shape(flow.d, motion.d, "flow", "motion flow")
    return motion.d - flow.d


def motion_loss(
    residuals: np.ndarray,
    mask_motion: np.ndarray,
    valid: np.ndarray,
    lambda_reg: float = 1.0,
) -> float:
    """Robustified rigidity term over the valid set."""
    mask_motion = check_in_unit_interval(mask_motion, "motion mask")
    check_same_shape(residuals[..., 0], mask_motion, "residuals", "motion mask")
    r2 = np.sum(residuals * residuals, axis=-1)
    main, reg = _masked_term(r2, mask_motion, valid, lambda_reg)
    return main + lambda_reg * reg


def spatial_residual(flow: FlowField, mode: str = SECOND_DIFFERENCE) -> np.ndarray:
    """Per-cell stencil responses, shape (rows, cols, channel, axis).

    The default stencil is the 1D second difference applied per flow
    channel along each axis; responses are zero on the border where the
    stencil does not fit. ``first_difference`` selects the second-order
    accurate central first difference instead.
    """
    if mode not in STENCIL_MODES:
        raise ValidationError(f"unknown stencil mode {mode!r}")
    rows, cols = flow.shape
    if rows < 3 or cols < 3:
        raise ValidationError("flow field too small for spatial stencils (need 3x3)")
    d = flow.d
    resp = np.zeros((rows, cols, 2, 2))
    for c in range(2):
        if mode == SECOND_DIFFERENCE:
            resp[:, 1:-1, c, 0] = d[:, :-2, c] - 2.0 * d[:, 1:-1, c] + d[:, 2:, c]
            resp[1:-1, :, c, 1] = d[:-2, :, c] - 2.0 * d[1:-1, :, c] + d[2:, :, c]
        else:
            resp[:, 1:-1, c, 0] = 0.5 * (d[:, 2:, c] - d[:, :-2, c])
            resp[1:-1, :, c, 1] = 0.5 * (d[2:, :, c] - d[:-2, :, c])
    return resp


def _interior(rows: int, cols: int) -> np.ndarray:
    interior = np.zeros((rows, cols), dtype=bool)
    interior[1:-1, 1:-1] = True
    return interior


def spatial_loss(
    responses: np.ndarray,
    mask_spatial: np.ndarray,
    valid: np.ndarray,
    lambda_reg: float = 1.0,
) -> float:
    """Robustified smoothness term over valid interior cells."""
    mask_spatial = check_in_unit_interval(mask_spatial, "spatial mask")
    rows, cols = responses.shape[:2]
    ss2 = np.sum(responses * responses, axis=(-2, -1))
    select = valid & _interior(rows, cols)
    main, reg = _masked_term(ss2, mask_spatial, select, lambda_reg)
    return main + lambda_reg * reg


def _shifted_sum_second(h: np.ndarray) -> np.ndarray:
    """Adjoint of the second-difference stencil under zero extension (one axis pair)."""
    out = -2.0 * h
    out[:, :-1] += h[:, 1:]
    out[:, 1:] += h[:, :-1]
    return out


class _DirectionResult:
    __slots__ = ("breakdown", "gradient", "valid")

    def __init__(self, breakdown, gradient, valid):
        self.breakdown = breakdown
        self.gradient = gradient
        self.valid = valid


def _evaluate_direction(
    source: GridMap,
    target: GridMap,
    flow: FlowField,
    transform: RigidTransform2D,
    masks: MaskSet,
    weights: LossWeights,
    stencil_mode: str,
    differentiable_motion_mask: bool,
    want_gradient: bool,
    valid: np.ndarray | None = None,
) -> _DirectionResult:
    if map_shape(source) != flow.shape:
        raise ValidationError("flow shape does not match source map")
    if source.layer_names() != target.layer_names():
        raise ValidationError("maps must share the same layers")
    if transform.direction != flow.direction:
        raise ValidationError("transform direction does not match flow direction")
    check_same_shape(masks.data, flow.d[..., 0], "masks", "flow")

    rows, cols = flow.shape
    lam_reg = weights.lambda_reg
    if valid is None:
        valid = compute_valid_set(source, flow, map_shape(target))
    else:
        valid = np.asarray(valid, dtype=bool)
        check_same_shape(valid, flow.d[..., 0], "valid set", "flow")
    n_valid = int(valid.sum())
    grad = np.zeros((rows, cols, 2)) if want_gradient else None

    # data term
    mx, my = mapped_coords(flow)
    if want_gradient:
        residuals = np.empty((len(source.layers), rows, cols))
        gx_sum = np.zeros((rows, cols))
        gy_sum = np.zeros((rows, cols))
        for i, name in enumerate(source.layer_names()):
            value, gx, gy, _ = sample_value_and_gradient(target.layers[name], mx, my)
            residuals[i] = source.layers[name] - value
            gx_sum += residuals[i] * gx
            gy_sum += residuals[i] * gy
        r2 = np.sum(residuals * residuals, axis=0)
        coef = np.where(valid, -2.0 * masks.data * charbonnier_grad(r2), 0.0)
        grad[..., 0] += weights.lambda_data * coef * gx_sum
        grad[..., 1] += weights.lambda_data * coef * gy_sum
    else:
        residuals, r2 = _data_residuals(source, target, flow, mx, my)
    data_main, data_reg = _masked_term(r2, masks.data, valid, lam_reg)

    # motion term
    rigid = motion_flow(transform, rows, cols)
    rm = rigid.d - flow.d
    rm2 = np.sum(rm * rm, axis=-1)
    if differentiable_motion_mask:
        m_motion = 1.0 - np.tanh(rm2)
    else:
        m_motion = masks.motion
    motion_main, motion_reg = _masked_term(rm2, m_motion, valid, lam_reg)
    if want_gradient:
        base = np.where(valid, -2.0 * m_motion * charbonnier_grad(rm2), 0.0)
        g_motion = base[..., None] * rm
        if differentiable_motion_mask:
            sech2 = 1.0 - np.tanh(rm2) ** 2
            outer = charbonnier(rm2) + lam_reg * mask_regularizer_grad(m_motion)
            g_motion += np.where(valid, 2.0 * sech2 * outer, 0.0)[..., None] * rm
        grad += weights.lambda_motion * g_motion

    # spatial term
    responses = spatial_residual(flow, stencil_mode)
    ss2 = np.sum(responses * responses, axis=(-2, -1))
    select = valid & _interior(rows, cols)
    n_spatial = int(select.sum())
    spatial_main, spatial_reg = _masked_term(ss2, masks.spatial, select, lam_reg)
    if want_gradient:
        g_factor = np.where(select, 2.0 * masks.spatial * charbonnier_grad(ss2), 0.0)
        for c in range(2):
            for axis in range(2):
                h = g_factor * responses[..., c, axis]
                h_axis = h if axis == 0 else h.T
                if stencil_mode == SECOND_DIFFERENCE:
                    adj = _shifted_sum_second(h_axis)
                else:
                    adj = np.zeros_like(h_axis)
                    adj[:, 1:] += 0.5 * h_axis[:, :-1]
                    adj[:, :-1] -= 0.5 * h_axis[:, 1:]
                grad[..., c] += weights.lambda_spatial * (adj if axis == 0 else adj.T)

    data_w = weights.lambda_data * data_main
    data_reg_w = (weights.lambda_data * lam_reg) * data_reg
    motion_w = weights.lambda_motion * motion_main
    motion_reg_w = (weights.lambda_motion * lam_reg) * motion_reg
    spatial_w = weights.lambda_spatial * spatial_main
    spatial_reg_w = (weights.lambda_spatial * lam_reg) * spatial_reg
    total = (data_w + data_reg_w) + (motion_w + motion_reg_w) + (spatial_w + spatial_reg_w)
    breakdown = DirectionBreakdown(
        direction=flow.direction.value,
        data=data_w,
        data_reg=data_reg_w,
        motion=motion_w,
        motion_reg=motion_reg_w,
        spatial=spatial_w,
        spatial_reg=spatial_reg_w,
        valid_cells=n_valid,
        spatial_cells=n_spatial,
        total=total,
    )
    return _DirectionResult(breakdown, grad, valid)


def map_shape(grid: GridMap) -> tuple[int, int]:
    return (grid.rows, grid.cols)


def evaluate_objective(
    map1: GridMap,
    map2: GridMap,
    flow_fw: FlowField,
    flow_bw: FlowField,
    masks_fw: MaskSet,
    masks_bw: MaskSet,
    transform_fw: RigidTransform2D,
    transform_bw: RigidTransform2D,
    weights: LossWeights = LossWeights(),
    stencil_mode: str = SECOND_DIFFERENCE,
    differentiable_motion_mask: bool = False,
    want_gradient: bool = False,
    valid_fw: np.ndarray | None = None,
    valid_bw: np.ndarray | None = None,
):
    """Evaluate both directions; returns (breakdown, grad_fw, grad_bw).

    Gradient arrays are None unless ``want_gradient``. The grand total is
    the commutative sum of the two per-direction totals, which makes the
    objective exactly symmetric under swapping frames, flows, masks and
    transforms together. ``valid_fw``/``valid_bw`` override the
    flow-derived valid sets; the optimizer freezes them per alternation so
    cell participation cannot jump during descent.
    """
    fw = _evaluate_direction(
        map1, map2, flow_fw, transform_fw, masks_fw, weights,
        stencil_mode, differentiable_motion_mask, want_gradient, valid_fw,
    )
    bw = _evaluate_direction(
        map2, map1, flow_bw, transform_bw, masks_bw, weights,
        stencil_mode, differentiable_motion_mask, want_gradient, valid_bw,
    )
    breakdown = LossBreakdown(
        forward=fw.breakdown,
        backward=bw.breakdown,
        weights=weights,
        total=fw.breakdown.total + bw.breakdown.total,
    )
    return breakdown, fw.gradient, bw.gradient


def total_loss(
    map1: GridMap,
    map2: GridMap,
    flow_fw: FlowField,
    flow_bw: FlowField,
    masks_fw: MaskSet,
    masks_bw: MaskSet,
    transform_fw: RigidTransform2D,
    transform_bw: RigidTransform2D,
    weights: LossWeights = LossWeights(),
    stencil_mode: str = SECOND_DIFFERENCE,
    differentiable_motion_mask: bool = False,
    valid_fw: np.ndarray | None = None,
    valid_bw: np.ndarray | None = None,
) -> LossBreakdown:
    """Weighted two-direction objective as a structured breakdown."""
    breakdown, _, _ = evaluate_objective(
        map1, map2, flow_fw, flow_bw, masks_fw, masks_bw,
        transform_fw, transform_bw, weights, stencil_mode,
        differentiable_motion_mask, want_gradient=False,
        valid_fw=valid_fw, valid_bw=valid_bw,
    )
    return breakdown


def loss_gradient(
    map1: GridMap,
    map2: GridMap,
    flow_fw: FlowField,
    flow_bw: FlowField,
    masks_fw: MaskSet,
    masks_bw: MaskSet,
    transform_fw: RigidTransform2D,
    transform_bw: RigidTransform2D,
    weights: LossWeights = LossWeights(),
    stencil_mode: str = SECOND_DIFFERENCE,
    differentiable_motion_mask: bool = False,
    valid_fw: np.ndarray | None = None,
    valid_bw: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the total loss w.r.t. both displacement fields.

    Masks and transforms are treated as constants; chain rule runs through
    the robustifier, the bilinear samples and the spatial stencils.
    """
    _, grad_fw, grad_bw = evaluate_objective(
        map1, map2, flow_fw, flow_bw, masks_fw, masks_bw,
        transform_fw, transform_bw, weights, stencil_mode,
        differentiable_motion_mask, want_gradient=True,
        valid_fw=valid_fw, valid_bw=valid_bw,
    )
    return grad_fw, grad_bw
