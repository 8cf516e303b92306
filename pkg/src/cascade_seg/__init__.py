"""Cascaded liver and lesion segmentation on synthetic CT phantoms.

Liver net -> 3D liver box -> lesion net with masked training -> window detector
masking -> dense CRF, all in numpy with numba kernels for the hot loops.
"""
from .crf import CrfParams, refine
from .detector import DetectorConfig, DetectorNet, detect, enumerate_patches, mask_segmentation
from .errors import CascadeSegError
from .metrics import aggregate, dice, evaluate_cases
from .phantom import PhantomParams, generate_dataset, generate_phantom
from .pipeline import PipelineConfig, run_pipeline
from .segnet import SegNet, SegNetConfig, SegTrainConfig, build_segnet
from .volume import Volume, preprocess, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "CascadeSegError", "CrfParams", "DetectorConfig", "DetectorNet", "PhantomParams",
    "PipelineConfig", "SegNet", "SegNetConfig", "SegTrainConfig", "Volume", "aggregate",
    "build_segnet", "detect", "dice", "enumerate_patches", "evaluate_cases", "generate_dataset",
    "generate_phantom", "mask_segmentation", "preprocess", "read_volume", "refine",
    "run_pipeline", "write_volume",
]
