"""Dense 3D scene flow from pairs of 4D light fields."""

from .flowfield import FlowField, Layout, SolveStatus, read_flow, write_flow
from .lfcore import Calibration, LightField, MotionVector, RayGradients, compute_gradients, prefilter, warp
from .lfio import read_lightfield, write_lightfield
from .local import LKParams, lk_dense, lk_pyramidal, lk_window
from .methods import MethodConfig, estimate_flow
from .metrics import Metrics, mae_rmse, relative_error, transition_width
from .structure_aware import DisparityMap, SAGWeights, estimate_disparity, gather_plane, sag_solve, sag_weight_maps
from .synth import GroundTruth, Plane, SceneSpec, Texture, default_calibration, render, render_pair
from .tensor import RankClass, StructureTensor, classify, structure_tensor
from .variational import ConvergenceWarning, GlobalParams, charbonnier, hs_pyramidal, hs_solve

__version__ = "0.1.0"

__all__ = [
    "Calibration",
    "ConvergenceWarning",
    "DisparityMap",
    "FlowField",
    "GlobalParams",
    "GroundTruth",
    "LKParams",
    "Layout",
    "LightField",
    "MethodConfig",
    "Metrics",
    "MotionVector",
    "Plane",
    "RankClass",
    "RayGradients",
    "SAGWeights",
    "SceneSpec",
    "SolveStatus",
    "StructureTensor",
    "Texture",
    "charbonnier",
    "classify",
    "compute_gradients",
    "default_calibration",
    "estimate_disparity",
    "estimate_flow",
    "gather_plane",
    "hs_pyramidal",
    "hs_solve",
    "lk_dense",
    "lk_pyramidal",
    "lk_window",
    "mae_rmse",
    "prefilter",
    "read_flow",
    "read_lightfield",
    "relative_error",
    "render",
    "render_pair",
    "sag_solve",
    "sag_weight_maps",
    "structure_tensor",
    "transition_width",
    "warp",
    "write_flow",
    "write_lightfield",
]
