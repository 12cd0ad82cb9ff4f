from .config import ModelConfig, alternating_pattern, desk_config, paper_config
from .core import WxCModel, block_pattern_counts, count_parameters, predict
from .layers import (TransformerBlock, fourier_position_encoding, patchify, swin_shift,
                     swin_unshift, unpatchify)

__all__ = [
    "ModelConfig", "alternating_pattern", "desk_config", "paper_config", "WxCModel",
    "block_pattern_counts", "count_parameters", "predict", "TransformerBlock",
    "fourier_position_encoding", "patchify", "swin_shift", "swin_unshift", "unpatchify",
]
