"""Fixed toy-training recipes with an on-disk cache.

Each recipe is a plain dict of settings; the cache key hashes the recipe
together with the source of every module that influences the trained
weights, so edits to the networks or the training loop invalidate stale
checkpoints automatically.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..i2p import I2PNet
from ..l2w import L2WNet
from ..retrieval import RetrievalHead
from .clips import make_training_clips
from .scene import gen_scene
from .train import TrainConfig, keyframe_error, retrieval_pairs, train_i2p_toy, train_l2w_toy, train_retrieval_head

I2P_RECIPE = {
    "train_seeds": list(range(40)),
    "held_out_seeds": list(range(10000, 10020)),
    "frames": 64,
    "clip_len": 5,
    "skips": [1, 2],
    "held_out_stride": 20,
    "epochs": 20,
    "lr": 1e-3,
    "batch_size": 16,
    "seed": 0,
}
L2W_RECIPE = {
    "train_seeds": list(range(40)),
    "frames": 64,
    "clip_len": 12,
    "stride": 2,
    "skips": [1, 2, 3],
    "epochs": 12,
    "lr": 1e-3,
    "batch_size": 8,
    "mix": 0.5,
    "seed": 0,
}
HEAD_RECIPE = {
    "train_seeds": list(range(40)),
    "frames": 64,
    "pairs_per_scene": 48,
    "max_offset": 32,
    "epochs": 50,
    "lr": 3e-3,
    "batch_size": 32,
    "seed": 0,
}

_SOURCES = ("geometry.py", "i2p.py", "l2w.py", "retrieval.py", "nn/blocks.py", "nn/checkpoint.py",
            "synth/scene.py", "synth/clips.py", "synth/train.py")


def source_hash() -> str:
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha256()
    for rel in _SOURCES:
        h.update(rel.encode())
        h.update((root / rel).read_bytes())
    return h.hexdigest()[:16]


def cache_key(kind: str, recipe: dict, parent: str = "") -> str:
    blob = json.dumps({"kind": kind, "recipe": recipe, "parent": parent, "torch": torch.__version__}, sort_keys=True)
    return f"{kind}-{hashlib.sha256((blob + source_hash()).encode()).hexdigest()[:16]}"


def _scenes(seeds, frames):
    return [gen_scene(s, n_frames=frames) for s in seeds]


def i2p_clips(recipe: dict = I2P_RECIPE):
    scenes = _scenes(recipe["train_seeds"], recipe["frames"])
    skips = recipe["skips"]
    clips = [c for i, s in enumerate(scenes) for c in make_training_clips(s, recipe["clip_len"], 1, skip=skips[i % len(skips)])]
    held = _scenes(recipe["held_out_seeds"], recipe["frames"])
    held_clips = [c for s in held for c in make_training_clips(s, recipe["clip_len"], recipe["held_out_stride"])]
    return clips, held_clips


def train_i2p(recipe: dict = I2P_RECIPE, progress: Callable[[str], None] | None = None):
    torch.set_num_threads(1)
    clips, held = i2p_clips(recipe)
    model = I2PNet(seed=recipe["seed"])
    cfg = TrainConfig(clip_len=recipe["clip_len"], batch_size=recipe["batch_size"], epochs=recipe["epochs"],
                      lr=recipe["lr"], seed=recipe["seed"])
    return train_i2p_toy(model, clips, cfg, held, progress)


def train_l2w(i2p: I2PNet, recipe: dict = L2W_RECIPE, progress=None):
    torch.set_num_threads(1)
    scenes = _scenes(recipe["train_seeds"], recipe["frames"])
    skips = recipe["skips"]
    clips = [c for i, s in enumerate(scenes)
             for c in make_training_clips(s, recipe["clip_len"], recipe["stride"], mode="l2w", skip=skips[i % len(skips)])]
    model = L2WNet(i2p.cfg, seed=recipe["seed"])
    cfg = TrainConfig(clip_len=recipe["clip_len"], batch_size=recipe["batch_size"], epochs=recipe["epochs"],
                      lr=recipe["lr"], seed=recipe["seed"], mix=recipe["mix"])
    return train_l2w_toy(model, i2p.eval(), clips, cfg, progress=progress)


def train_head(i2p: I2PNet, recipe: dict = HEAD_RECIPE, progress=None):
    torch.set_num_threads(1)
    scenes = _scenes(recipe["train_seeds"], recipe["frames"])
    head = RetrievalHead(i2p.eval(), r=2, seed=recipe["seed"])
    data = retrieval_pairs(i2p, head, scenes, recipe["pairs_per_scene"], recipe["max_offset"], recipe["seed"])
    cfg = TrainConfig(batch_size=recipe["batch_size"], epochs=recipe["epochs"], lr=recipe["lr"], seed=recipe["seed"], warmup=10)
    return train_retrieval_head(head, i2p, data, cfg, progress)


class ModelCache:
    """Trained checkpoints plus their run manifests under ``root``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, key):
        return self.root / f"{key}.ckpt", self.root / f"{key}.json"

    def _store(self, key, res):
        ckpt, man = self._paths(key)
        res.model.save(ckpt)
        man.write_text(json.dumps(res.manifest, indent=2) + "\n", encoding="utf-8")

    def i2p(self, recipe: dict = I2P_RECIPE, progress=None) -> tuple[I2PNet, dict, str]:
        key = cache_key("i2p", recipe)
        ckpt, man = self._paths(key)
        if not ckpt.exists():
            self._store(key, train_i2p(recipe, progress))
        return I2PNet.load(ckpt).eval(), json.loads(man.read_text()), key

    def l2w(self, recipe: dict = L2W_RECIPE, i2p_recipe: dict = I2P_RECIPE, progress=None) -> tuple[L2WNet, dict, str]:
        i2p, _, parent = self.i2p(i2p_recipe, progress)
        key = cache_key("l2w", recipe, parent)
        ckpt, man = self._paths(key)
        if not ckpt.exists():
            self._store(key, train_l2w(i2p, recipe, progress))
        return L2WNet.load(ckpt).eval(), json.loads(man.read_text()), key

    def head(self, recipe: dict = HEAD_RECIPE, i2p_recipe: dict = I2P_RECIPE, progress=None) -> tuple[RetrievalHead, dict, str]:
        i2p, _, parent = self.i2p(i2p_recipe, progress)
        key = cache_key("head", recipe, parent)
        ckpt, man = self._paths(key)
        if not ckpt.exists():
            self._store(key, train_head(i2p, recipe, progress))
        return RetrievalHead.load(ckpt, i2p), json.loads(man.read_text()), key


def support_trend(model: I2PNet, held_clips) -> tuple[float, float]:
    """Mean keyframe error with every support and with a single adjacent one.

    The single-support figure averages the two neighbours of the keyframe
    so neither side is favoured.
    """
    key = held_clips[0].key_index
    full = float(keyframe_error(model, held_clips).mean())
    one = (keyframe_error(model, held_clips, [key - 1, key]) + keyframe_error(model, held_clips, [key, key + 1])) / 2
    return full, float(np.mean(one))
