"""Coarse-to-fine direct minimization of the consistency objective.

Forward and backward flow for one grid-map pair are optimized jointly on
an image pyramid. Each level blurs the downsampled maps with a scheduled
sigma, then alternates between re-estimating the rigid transform plus
masks from the current flow and running adaptive-moment gradient steps
with a backtracking line search on the total loss. Everything is plain
single-threaded numpy, so a fixed configuration reproduces bit-identical
results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import EstimationError, NumericalError, ValidationError
from .grid_map import GridMap, gaussian_blur
from .losses import (
    SECOND_DIFFERENCE,
    STENCIL_MODES,
    LossBreakdown,
    LossWeights,
    MaskSet,
    evaluate_objective,
    occlusion_mask,
)
from .rigid_motion import RigidTransform2D, irls_estimate, spatial_mask
from .validation import check_positive
from .warp import Direction, FlowField, mapped_coords

@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs of the coarse-to-fine optimizer; all declared defaults."""

    pyramid_levels: int | None = None  # None: sized from max_displacement_cells
    max_displacement_cells: float = 17.0
    steps_per_level: int = 200
    outer_alternations: int = 5
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    sigma_schedule: tuple[float, ...] = (2.0, 1.5, 1.0, 0.5, 0.5)
    weights: LossWeights = field(default_factory=LossWeights)
    irls_iterations: int = 3
    tolerance: float = 1e-5
    stencil_mode: str = SECOND_DIFFERENCE
    spatial_mask_mode: str = "magnitude"
    differentiable_motion_mask: bool = False
    occlusion_alpha1: float = 0.01
    occlusion_alpha2: float = 0.5
    max_backtracks: int = 20
    adam_eps: float = 1e-2

    def __post_init__(self):
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        check_positive(self.max_displacement_cells, "max_displacement_cells")
        for name in ("steps_per_level", "outer_alternations", "irls_iterations"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        check_positive(self.step_size, "step_size")
        check_positive(self.tolerance, "tolerance")
        check_positive(self.adam_eps, "adam_eps")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1)")
        if self.stencil_mode not in STENCIL_MODES:
            raise ValidationError(f"unknown stencil mode {self.stencil_mode!r}")
        if self.spatial_mask_mode not in ("magnitude", "complement"):
            raise ValidationError(f"unknown spatial mask mode {self.spatial_mask_mode!r}")
        if not self.sigma_schedule or any(s < 0 for s in self.sigma_schedule):
            raise ValidationError("sigma_schedule must be nonempty and nonnegative")

    def to_dict(self) -> dict:
        out = {
            k: v
            for k, v in self.__dict__.items()
            if k != "weights"
        }
        out["sigma_schedule"] = list(self.sigma_schedule)
        out.update(self.weights.__dict__)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        data = dict(data)
        weights = LossWeights(
            lambda_data=data.pop("lambda_data", 1.0),
            lambda_motion=data.pop("lambda_motion", 1.0),
            lambda_spatial=data.pop("lambda_spatial", 1.0),
            lambda_reg=data.pop("lambda_reg", 1.0),
        )
        if "sigma_schedule" in data:
            data["sigma_schedule"] = tuple(data["sigma_schedule"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(weights=weights, **data)


@dataclass(frozen=True)
class LossRecord:
    """One accepted descent step (or phase start) in the loss history."""

    level: int
    alternation: int
    step: int
    total: float


@dataclass
class FlowResult:
    """Output of one frame-pair optimization."""

    flow_fw: FlowField
    flow_bw: FlowField
    masks_fw: MaskSet
    masks_bw: MaskSet
    transform_fw: RigidTransform2D
    transform_bw: RigidTransform2D
    loss_history: list[LossRecord]
    converged: bool
    final_loss: LossBreakdown


def auto_levels(max_displacement_cells: float) -> int:
    """Smallest pyramid depth whose coarsest level shrinks the given
    displacement to at most 2 cells."""
    d = check_positive(max_displacement_cells, "max_displacement_cells")
    levels = 1
    while d / 2 ** (levels - 1) > 2.0:
        levels += 1
    return levels


def _downsample2(layer: np.ndarray) -> np.ndarray:
    """2x2 area mean; odd dimensions are padded by edge replication."""
    if layer.shape[0] % 2:
        layer = np.vstack([layer, layer[-1:]])
    if layer.shape[1] % 2:
        layer = np.hstack([layer, layer[:, -1:]])
    return 0.25 * (
        layer[0::2, 0::2] + layer[0::2, 1::2] + layer[1::2, 0::2] + layer[1::2, 1::2]
    )


def downsample_map(grid: GridMap) -> GridMap:
    """Half-resolution map: every layer area-averaged, cell size doubled."""
    layers = {name: _downsample2(layer) for name, layer in grid.layers.items()}
    return GridMap(layers=layers, cell_size_m=2.0 * grid.cell_size_m, frame_id=grid.frame_id)


def downsample_flow(flow: FlowField) -> FlowField:
    """Half-resolution flow: area-averaged and halved (cell units shrink)."""
    u = 0.5 * _downsample2(flow.d[..., 0])
    v = 0.5 * _downsample2(flow.d[..., 1])
    return FlowField(np.stack([u, v], axis=-1), flow.direction)


def upsample_flow(flow: FlowField, target_shape: tuple[int, int]) -> FlowField:
    """Double-resolution flow: nearest replication, values doubled."""
    rows, cols = target_shape
    d = np.repeat(np.repeat(flow.d, 2, axis=0), 2, axis=1)[:rows, :cols]
    return FlowField(2.0 * d, flow.direction)


def _effective_sigmas(schedule: tuple[float, ...], levels: int) -> list[float]:
    """Per-level sigma, coarse to fine. A long schedule keeps its tail (the
    fine-level entries); a short one repeats its last value."""
    if levels <= len(schedule):
        return list(schedule[len(schedule) - levels:])
    return list(schedule) + [schedule[-1]] * (levels - len(schedule))


def _check_finite_loss(breakdown: LossBreakdown) -> None:
    for side in (breakdown.forward, breakdown.backward):
        for name in ("data", "data_reg", "motion", "motion_reg", "spatial", "spatial_reg"):
            if not math.isfinite(getattr(side, name)):
                raise NumericalError(f"{name} term is non-finite ({side.direction})")
    if not math.isfinite(breakdown.total):
        raise NumericalError("total loss is non-finite")


def _estimate_masks_and_transforms(
    map1: GridMap,
    map2: GridMap,
    flow_fw: FlowField,
    flow_bw: FlowField,
    cfg: OptimizerConfig,
):
    """Occlusion masks from both flows, transform + motion mask by IRLS,
    spatial mask from the motion mask, and the valid set frozen for the
    next descent phase. Transforms fall back to identity on degenerate
    correspondences.

    The frozen set is inset by half a cell from the sampling bounds:
    cells mapped exactly onto the boundary (every cell at zero flow) would
    otherwise make the first descent step discontinuous."""
    out = []
    for source, target, flow, other in (
        (map1, map2, flow_fw, flow_bw),
        (map2, map1, flow_bw, flow_fw),
    ):
        mx, my = mapped_coords(flow)
        margin = 0.5
        inset = (
            (mx >= margin) & (mx <= target.cols - 1.0 - margin)
            & (my >= margin) & (my <= target.rows - 1.0 - margin)
        )
        valid = source.occupancy() & inset
        if not valid.any():
            raise EstimationError(f"no valid cells in direction {flow.direction.value}")
        occl = occlusion_mask(flow, other, cfg.occlusion_alpha1, cfg.occlusion_alpha2)
        try:
            transform, m_motion = irls_estimate(flow, valid, cfg.irls_iterations)
        except EstimationError:
            transform = RigidTransform2D.identity(flow.direction)
            m_motion = np.where(valid, 1.0, 0.0)
        m_spatial = spatial_mask(m_motion, cfg.spatial_mask_mode)
        out.append((MaskSet(data=occl, motion=m_motion, spatial=m_spatial), transform, valid))
    (masks_fw, t_fw, valid_fw), (masks_bw, t_bw, valid_bw) = out
    return masks_fw, masks_bw, t_fw, t_bw, valid_fw, valid_bw


class _AdamState:
    """Moment buffers for the two displacement fields."""

    def __init__(self, shape):
        self.m_fw = np.zeros(shape)
        self.v_fw = np.zeros(shape)
        self.m_bw = np.zeros(shape)
        self.v_bw = np.zeros(shape)
        self.t = 0

    def direction(self, g_fw, g_bw, beta1, beta2, eps):
        self.t += 1
        self.m_fw = beta1 * self.m_fw + (1.0 - beta1) * g_fw
        self.v_fw = beta2 * self.v_fw + (1.0 - beta2) * g_fw * g_fw
        self.m_bw = beta1 * self.m_bw + (1.0 - beta1) * g_bw
        self.v_bw = beta2 * self.v_bw + (1.0 - beta2) * g_bw * g_bw
        c1 = 1.0 - beta1**self.t
        c2 = 1.0 - beta2**self.t
        d_fw = (self.m_fw / c1) / (np.sqrt(self.v_fw / c2) + eps)
        d_bw = (self.m_bw / c1) / (np.sqrt(self.v_bw / c2) + eps)
        return d_fw, d_bw


def estimate_flow_pair(map1: GridMap, map2: GridMap, cfg: OptimizerConfig) -> FlowResult:
    """Estimate forward/backward flow and the rigid transform for a pair.

    Raises :class:`EstimationError` when a direction has no valid cells and
    :class:`NumericalError` when the objective turns non-finite.
    """
    if (map1.rows, map1.cols) != (map2.rows, map2.cols):
        raise ValidationError("grid maps must share the same shape")
    if map1.layer_names() != map2.layer_names():
        raise ValidationError("grid maps must share the same layers")

    levels = cfg.pyramid_levels or auto_levels(cfg.max_displacement_cells)
    # keep the coarsest level at a workable size
    max_levels = 1
    while min(map1.rows, map1.cols) / 2**max_levels >= 8:
        max_levels += 1
    levels = max(1, min(levels, max_levels))

    pyramid1 = [map1]
    pyramid2 = [map2]
    for _ in range(levels - 1):
        pyramid1.append(downsample_map(pyramid1[-1]))
        pyramid2.append(downsample_map(pyramid2[-1]))
    sigmas = _effective_sigmas(cfg.sigma_schedule, levels)

    flow_fw = FlowField.zeros(pyramid1[-1].rows, pyramid1[-1].cols, Direction.FORWARD)
    flow_bw = FlowField.zeros(pyramid1[-1].rows, pyramid1[-1].cols, Direction.BACKWARD)
    history: list[LossRecord] = []
    masks_fw = masks_bw = None
    t_fw = t_bw = None
    breakdown = None
    converged = False

    for depth in range(levels - 1, -1, -1):  # coarsest first
        g1 = gaussian_blur(pyramid1[depth], sigmas[levels - 1 - depth])
        g2 = gaussian_blur(pyramid2[depth], sigmas[levels - 1 - depth])
        if flow_fw.shape != (g1.rows, g1.cols):
            flow_fw = upsample_flow(flow_fw, (g1.rows, g1.cols))
            flow_bw = upsample_flow(flow_bw, (g1.rows, g1.cols))

        for alternation in range(cfg.outer_alternations):
            masks_fw, masks_bw, t_fw, t_bw, valid_fw, valid_bw = (
                _estimate_masks_and_transforms(g1, g2, flow_fw, flow_bw, cfg)
            )
            flow_fw, flow_bw, breakdown, converged = _descend(
                g1, g2, flow_fw, flow_bw, masks_fw, masks_bw, t_fw, t_bw,
                valid_fw, valid_bw, cfg, history, depth, alternation,
            )

    return FlowResult(
        flow_fw=flow_fw,
        flow_bw=flow_bw,
        masks_fw=masks_fw,
        masks_bw=masks_bw,
        transform_fw=t_fw,
        transform_bw=t_bw,
        loss_history=history,
        converged=converged,
        final_loss=breakdown,
    )


def _descend(
    g1, g2, flow_fw, flow_bw, masks_fw, masks_bw, t_fw, t_bw,
    valid_fw, valid_bw, cfg, history, depth, alternation,
):
    """Adam steps with backtracking; the loss never increases across
    accepted steps of one alternation."""

    def evaluate(d_fw, d_bw, want_gradient):
        return evaluate_objective(
            g1, g2,
            FlowField(d_fw, Direction.FORWARD), FlowField(d_bw, Direction.BACKWARD),
            masks_fw, masks_bw, t_fw, t_bw, cfg.weights,
            cfg.stencil_mode, cfg.differentiable_motion_mask,
            want_gradient=want_gradient,
            valid_fw=valid_fw, valid_bw=valid_bw,
        )

    d_fw = flow_fw.d
    d_bw = flow_bw.d
    breakdown, g_fw, g_bw = evaluate(d_fw, d_bw, want_gradient=True)
    _check_finite_loss(breakdown)
    current = breakdown.total
    history.append(LossRecord(depth, alternation, -1, current))
    state = _AdamState(d_fw.shape)
    converged = False

    for step in range(cfg.steps_per_level):
        dir_fw, dir_bw = state.direction(g_fw, g_bw, cfg.beta1, cfg.beta2, cfg.adam_eps)
        alpha = cfg.step_size
        accepted = None
        for attempt in range(cfg.max_backtracks + 1):
            cand_fw = d_fw - alpha * dir_fw
            cand_bw = d_bw - alpha * dir_bw
            want_grad = attempt == 0  # gradient usually comes free on the first try
            cand_breakdown, cand_g_fw, cand_g_bw = evaluate(cand_fw, cand_bw, want_grad)
            _check_finite_loss(cand_breakdown)
            if cand_breakdown.total <= current:
                accepted = (cand_fw, cand_bw, cand_breakdown, cand_g_fw, cand_g_bw)
                break
            alpha *= 0.5
        if accepted is None:
            converged = True  # no descent direction left at this resolution
            break
        d_fw, d_bw, breakdown, g_fw, g_bw = accepted
        if g_fw is None:
            _, g_fw, g_bw = evaluate(d_fw, d_bw, want_gradient=True)
        previous, current = current, breakdown.total
        history.append(LossRecord(depth, alternation, step, current))
        if previous - current <= cfg.tolerance * max(abs(previous), 1e-12):
            converged = True
            break

    return (
        FlowField(d_fw, Direction.FORWARD),
        FlowField(d_bw, Direction.BACKWARD),
        breakdown,
        converged,
    )
