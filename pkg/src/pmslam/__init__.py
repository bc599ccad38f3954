"""Dense incremental reconstruction from monocular video with learned pointmaps."""

from .errors import InputError, NumericError, PMSlamError, StageError
from .geometry import CameraIntrinsics, Pointmap, Pose, Sim3, backproject, icp_refine, umeyama_align
from .i2p import I2PNet
from .l2w import L2WNet
from .pipeline import PipelineConfig, run
from .retrieval import BufferSet, RetrievalHead

__version__ = "0.1.0"

__all__ = [
    "BufferSet",
    "CameraIntrinsics",
    "I2PNet",
    "InputError",
    "L2WNet",
    "NumericError",
    "PMSlamError",
    "PipelineConfig",
    "Pointmap",
    "Pose",
    "RetrievalHead",
    "Sim3",
    "StageError",
    "backproject",
    "icp_refine",
    "run",
    "umeyama_align",
]
