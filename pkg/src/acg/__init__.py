"""Single-pass attention-space contrastive guidance for a small multimodal decoder."""
from .attention import AttentionTrace, GuidanceConfig, contrastive_correction, guided_attention_block
from .decoder import DecodeResult, KvCache, decode_greedy, forward, mode_preset
from .model import (
    ConfigError,
    ContextLayout,
    ModelConfig,
    ModelWeights,
    MultimodalInput,
    WeightFormatError,
    assemble_context,
    init_weights,
    load_weights,
    save_weights,
)

__all__ = [
    "AttentionTrace", "ConfigError", "ContextLayout", "DecodeResult", "GuidanceConfig",
    "KvCache", "ModelConfig", "ModelWeights", "MultimodalInput", "WeightFormatError",
    "assemble_context", "contrastive_correction", "decode_greedy", "forward",
    "guided_attention_block", "init_weights", "load_weights", "mode_preset", "save_weights",
]
