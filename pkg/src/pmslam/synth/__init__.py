from .clips import TrainingClip, make_training_clips
from .scene import ROOM_DIAMETER, SyntheticScene, gen_scene, render

__all__ = ["ROOM_DIAMETER", "SyntheticScene", "TrainingClip", "gen_scene", "make_training_clips", "render"]
