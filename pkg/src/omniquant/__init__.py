"""Post-training quantization of a tiny byte-level LM with learnable clipping and transforms."""

__version__ = "0.1.0"

from .calibrate import CalibConfig, QuantizedModel, baseline_quantize, calibrate_block, calibrate_model
from .model import ModelWeights, QuantConfig, TinyModelConfig, read_fp_checkpoint, write_fp_checkpoint
from .packing import QuantizedCheckpoint, read_checkpoint, write_checkpoint
from .pretrain import PretrainConfig, pretrain_tiny

__all__ = [
    "CalibConfig", "QuantizedModel", "baseline_quantize", "calibrate_block", "calibrate_model",
    "ModelWeights", "QuantConfig", "TinyModelConfig", "read_fp_checkpoint", "write_fp_checkpoint",
    "QuantizedCheckpoint", "read_checkpoint", "write_checkpoint", "PretrainConfig", "pretrain_tiny",
]
