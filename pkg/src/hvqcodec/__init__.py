"""Hierarchical vector-quantized lossy codec for 2D floating-point fields."""
from .codec import CodecConfig, Metrics, compress, compress_with_metrics, decompress, psnr
from .checkpoint import load_model, save_model
from .model import HierarchicalVQModel, ModelConfig
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "CodecConfig",
    "HierarchicalVQModel",
    "Metrics",
    "ModelConfig",
    "TrainConfig",
    "compress",
    "compress_with_metrics",
    "decompress",
    "evaluate",
    "load_model",
    "psnr",
    "save_model",
    "train",
]
