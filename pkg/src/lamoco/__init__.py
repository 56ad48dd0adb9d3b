"""Layered motion compositing.

Dense video motion encoded as per-layer thin-plate-spline transforms over
sparse control points. The pieces, roughly bottom to top:

- ``tps``: solver and transforms in normalized coordinates
- ``warpfield``: dense flow fields, sampling, inversion, composition
- ``layers``: masks, occlusion compositing, semantic refinement
- ``decompose`` / ``fitting``: losses and the gradient-descent fit
- ``forecast``: control-point extrapolation
- ``synthesis``: future-frame rendering, fusion and hole filling
- ``scenegen``: exact synthetic scenes with ground truth
- ``metrics``: PSNR, SSIM, endpoint error, mask IoU
- ``io``: .flo files, PNGs, and the resolution-free scene manifest
- ``cli``: the ``lamoco`` command
"""

from .errors import (
    DegenerateGrid,
    InsufficientHistory,
    InvalidSpec,
    LamocoError,
    NonFinite,
    NoOverlap,
    SizeMismatch,
    TooSmall,
)
from .tps import ControlGrid, ControlState, TpsSolver, TpsTransform
from .warpfield import FlowField
from .layers import LayerStack, SegMap
from .decompose import LossWeights, SceneDecomposition, fit_decomposition
from .forecast import TrajectorySet, predict
from .io import Manifest, load_manifest, save_manifest
from .scenegen import SceneSpec, SceneTruth, generate
from .synthesis import synthesize_future

__version__ = "0.1.0"

__all__ = [
    "ControlGrid",
    "ControlState",
    "DegenerateGrid",
    "FlowField",
    "InsufficientHistory",
    "InvalidSpec",
    "LamocoError",
    "LayerStack",
    "LossWeights",
    "Manifest",
    "NonFinite",
    "NoOverlap",
    "SceneDecomposition",
    "SceneSpec",
    "SceneTruth",
    "SegMap",
    "SizeMismatch",
    "TooSmall",
    "TpsSolver",
    "TpsTransform",
    "TrajectorySet",
    "fit_decomposition",
    "generate",
    "load_manifest",
    "predict",
    "save_manifest",
    "synthesize_future",
]
