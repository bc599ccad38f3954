from .blocks import (
    Attention,
    BlockConfig,
    EncoderBlock,
    Mlp,
    MultiviewDecoderBlock,
    PatchEmbed,
    RegressionHead,
    init_weights,
    patchify,
    sincos_2d,
    unpatchify,
)
from .checkpoint import load_tensors, read_checkpoint, save_module, write_checkpoint
from .gradcheck import grad_check, module_grad_check

__all__ = [
    "Attention",
    "BlockConfig",
    "EncoderBlock",
    "Mlp",
    "MultiviewDecoderBlock",
    "PatchEmbed",
    "RegressionHead",
    "grad_check",
    "init_weights",
    "load_tensors",
    "module_grad_check",
    "patchify",
    "read_checkpoint",
    "save_module",
    "sincos_2d",
    "unpatchify",
    "write_checkpoint",
]
