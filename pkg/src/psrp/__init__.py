"""Anchor-free detector with a shared encoder-decoder and attention over the feature pyramid."""
from .attention import AttentionVariant
from .config import ExperimentConfig, load_config
from .data import DatasetManifest, SynthConfig, generate_synthetic, load_coco
from .errors import ConfigError, ContractError, DivergenceError, FormatError, PsrpError, ShapeError
from .evaluation import evaluate
from .model import Detector, build_model
from .postprocess import Detection, DetectionSet, infer_image
from .train import train

__version__ = "0.1.0"

__all__ = [
    "AttentionVariant",
    "ConfigError",
    "ContractError",
    "DatasetManifest",
    "Detection",
    "DetectionSet",
    "Detector",
    "DivergenceError",
    "ExperimentConfig",
    "FormatError",
    "PsrpError",
    "ShapeError",
    "SynthConfig",
    "build_model",
    "evaluate",
    "generate_synthetic",
    "infer_image",
    "load_coco",
    "load_config",
    "train",
]
