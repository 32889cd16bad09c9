"""Two-frame relative pose refinement by joint epipolar tracking."""

from .geometry import CameraIntrinsics, PoseHypothesis
from .img import GrayImage, load_image
from .jet import Correspondence, JetConfig, JetResult, StepStrategy, run_jet

__all__ = [
    "CameraIntrinsics",
    "Correspondence",
    "GrayImage",
    "JetConfig",
    "JetResult",
    "PoseHypothesis",
    "StepStrategy",
    "load_image",
    "run_jet",
]
__version__ = "0.1.0"
