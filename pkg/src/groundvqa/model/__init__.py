from .connector import MSVLC, ConnectorConfig, msvlc_forward
from .encoder import FrameFeatures, VisionStub, sample_frames, sample_indices
from .lm import (
    Batch,
    ModelConfig,
    ModelState,
    NonFiniteLossError,
    OptimizerConfig,
    VideoLM,
    cosine_lr,
    decode,
    generate,
    load_checkpoint,
    make_batch,
    new_state,
    next_token_loss,
    save_checkpoint,
    training_step,
)
from .tokenizer import Tokenizer

__all__ = [
    "Batch",
    "ConnectorConfig",
    "cosine_lr",
    "decode",
    "FrameFeatures",
    "generate",
    "load_checkpoint",
    "make_batch",
    "ModelConfig",
    "ModelState",
    "MSVLC",
    "msvlc_forward",
    "new_state",
    "next_token_loss",
    "NonFiniteLossError",
    "OptimizerConfig",
    "sample_frames",
    "sample_indices",
    "save_checkpoint",
    "Tokenizer",
    "training_step",
    "VideoLM",
    "VisionStub",
]
