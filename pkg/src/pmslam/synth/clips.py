"""Training clips cut from synthetic scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TooFewFramesError
from ..geometry import Pointmap, backproject
from .scene import SyntheticScene


@dataclass(frozen=True)
class TrainingClip:
    """A view into a scene; images and ground truth are materialized on demand.

    In ``"i2p"`` mode the ground truth lives in the keyframe's camera frame.
    In ``"l2w"`` mode the first ``n_scene`` frames are scene frames, the rest
    keyframes, and the ground truth lives in the first frame's camera frame.
    """

    scene: SyntheticScene
    frame_ids: tuple[int, ...]
    key_index: int
    mode: str = "i2p"
    n_scene: int = 0

    def __len__(self):
        return len(self.frame_ids)

    @property
    def reference(self) -> int:
        return self.frame_ids[self.key_index if self.mode == "i2p" else 0]

    def images(self) -> np.ndarray:
        return self.scene.images[list(self.frame_ids)]

    def gt_pointmaps(self) -> list[Pointmap]:
        to_ref = self.scene.poses[self.reference].inverse()
        return [self.scene.world_points(i).transformed(to_ref) for i in self.frame_ids]

    def local_pointmaps(self) -> list[Pointmap]:
        """Each frame in its own camera frame."""
        return [backproject(self.scene.depth[i], self.scene.intrinsics) for i in self.frame_ids]


def make_training_clips(scene: SyntheticScene, clip_len: int, stride: int = 1, mode: str = "i2p", skip: int = 1) -> list[TrainingClip]:
    """Sliding-window clips of ``clip_len`` frames spaced ``skip`` apart.

    L2W clips are split evenly: the first half are scene frames, the second
    half keyframes (6 + 6 for the default length of 12).
    """
    if mode not in ("i2p", "l2w"):
        raise ValueError(f"unknown clip mode {mode!r}")
    if clip_len < 2 or stride < 1 or skip < 1:
        raise ValueError("clip_len >= 2, stride >= 1 and skip >= 1 required")
    span = (clip_len - 1) * skip + 1
    if scene.n_frames < span:
        raise TooFewFramesError(f"scene has {scene.n_frames} frames, clip needs {span}")
    clips = []
    for start in range(0, scene.n_frames - span + 1, stride):
        ids = tuple(start + skip * k for k in range(clip_len))
        if mode == "i2p":
            clips.append(TrainingClip(scene, ids, clip_len // 2, "i2p"))
        else:
            clips.append(TrainingClip(scene, ids, clip_len // 2, "l2w", clip_len // 2))
    return clips
