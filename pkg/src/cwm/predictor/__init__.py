from .config import PredictorConfig, TrainConfig, read_config, write_config
from .model import PredictorState, encode, forward, init_state, resize_pos_embed, run, sincos_table
from .patches import PatchMask, mask_from_indices, patchify, sample_mask, unpatchify, visible_count
from .train import NumericalFailure, load_state, masked_mse, save_state, train

__all__ = [
    "NumericalFailure", "PatchMask", "PredictorConfig", "PredictorState", "TrainConfig", "encode",
    "forward", "init_state", "load_state", "mask_from_indices", "masked_mse", "patchify",
    "read_config", "resize_pos_embed", "run", "sample_mask", "save_state", "sincos_table", "train",
    "unpatchify", "visible_count", "write_config",
]
