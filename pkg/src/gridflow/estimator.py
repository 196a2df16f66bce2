"""Scikit-learn style front end for the frame-pair flow optimizer."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .grid_map import GridMap
from .losses import LossWeights
from .optimizer import OptimizerConfig, estimate_flow_pair
from .exceptions import ValidationError


class SceneFlowEstimator(BaseEstimator):
    """Estimates dense scene flow and rigid ego-motion for a grid-map pair.

    Like a clustering estimator, it optimizes per input rather than
    learning a reusable model: ``fit`` consumes one ``(map1, map2)`` pair
    and exposes the optimized flow fields, masks and transform as fitted
    attributes. Parameters mirror :class:`~gridflow.optimizer.OptimizerConfig`
    so instances compose with ``get_params``/``set_params``/``clone``.

    Attributes after ``fit``
    ------------------------
    flow_fw_, flow_bw_ : FlowField
        Displacement fields in both temporal directions.
    transform_ : RigidTransform2D
        Rigid motion mapping frame-1 grid coordinates into frame 2.
    masks_fw_, masks_bw_ : MaskSet
        Final occlusion, motion and spatial masks.
    loss_history_ : list[LossRecord]
        Accepted-step losses per pyramid level and alternation.
    converged_ : bool
        Whether the last descent phase hit the tolerance.
    result_ : FlowResult
        The full optimizer output.
    """

    def __init__(
        self,
        pyramid_levels=None,
        max_displacement_cells=17.0,
        steps_per_level=200,
        outer_alternations=5,
        step_size=0.05,
        beta1=0.9,
        beta2=0.999,
        sigma_schedule=(2.0, 1.5, 1.0, 0.5, 0.5),
        lambda_data=1.0,
        lambda_motion=1.0,
        lambda_spatial=1.0,
        lambda_reg=1.0,
        irls_iterations=3,
        tolerance=1e-5,
        stencil_mode="second_difference",
        spatial_mask_mode="magnitude",
        differentiable_motion_mask=False,
        occlusion_alpha1=0.01,
        occlusion_alpha2=0.5,
        max_backtracks=20,
    ):
        self.pyramid_levels = pyramid_levels
        self.max_displacement_cells = max_displacement_cells
        self.steps_per_level = steps_per_level
        self.outer_alternations = outer_alternations
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.sigma_schedule = sigma_schedule
        self.lambda_data = lambda_data
        self.lambda_motion = lambda_motion
        self.lambda_spatial = lambda_spatial
        self.lambda_reg = lambda_reg
        self.irls_iterations = irls_iterations
        self.tolerance = tolerance
        self.stencil_mode = stencil_mode
        self.spatial_mask_mode = spatial_mask_mode
        self.differentiable_motion_mask = differentiable_motion_mask
        self.occlusion_alpha1 = occlusion_alpha1
        self.occlusion_alpha2 = occlusion_alpha2
        self.max_backtracks = max_backtracks

    def optimizer_config(self) -> OptimizerConfig:
        """The validated optimizer configuration for the current parameters."""
        return OptimizerConfig(
            pyramid_levels=self.pyramid_levels,
            max_displacement_cells=self.max_displacement_cells,
            steps_per_level=self.steps_per_level,
            outer_alternations=self.outer_alternations,
            step_size=self.step_size,
            beta1=self.beta1,
            beta2=self.beta2,
            sigma_schedule=tuple(self.sigma_schedule),
            weights=LossWeights(
                lambda_data=self.lambda_data,
                lambda_motion=self.lambda_motion,
                lambda_spatial=self.lambda_spatial,
                lambda_reg=self.lambda_reg,
            ),
            irls_iterations=self.irls_iterations,
            tolerance=self.tolerance,
            stencil_mode=self.stencil_mode,
            spatial_mask_mode=self.spatial_mask_mode,
            differentiable_motion_mask=self.differentiable_motion_mask,
            occlusion_alpha1=self.occlusion_alpha1,
            occlusion_alpha2=self.occlusion_alpha2,
            max_backtracks=self.max_backtracks,
        )

    @staticmethod
    def _unpack(X) -> tuple[GridMap, GridMap]:
        try:
            map1, map2 = X
        except (TypeError, ValueError):
            raise ValidationError("X must be a (map1, map2) pair of GridMap objects")
        if not isinstance(map1, GridMap) or not isinstance(map2, GridMap):
            raise ValidationError("X must be a (map1, map2) pair of GridMap objects")
        return map1, map2

    def fit(self, X, y=None):
        """Optimize the flow for one ``(map1, map2)`` pair."""
        map1, map2 = self._unpack(X)
        result = estimate_flow_pair(map1, map2, self.optimizer_config())
        self.result_ = result
        self.flow_fw_ = result.flow_fw
        self.flow_bw_ = result.flow_bw
        self.masks_fw_ = result.masks_fw
        self.masks_bw_ = result.masks_bw
        self.transform_ = result.transform_fw
        self.loss_history_ = result.loss_history
        self.converged_ = result.converged
        return self

    def fit_predict(self, X, y=None):
        """Fit the pair and return the forward flow field."""
        return self.fit(X).flow_fw_

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("this SceneFlowEstimator instance is not fitted yet")
