"""Self-supervised smoke and fire masking for multispectral rasters.

A Gaussian-Bernoulli deep belief network encodes pixels, a tree of
information-maximizing clustering heads segments the latent space, and sparse
high-certainty label polygons assign smoke or fire context to leaf clusters.
Masks from several sensors can be fused, scored and tracked over time.
"""
from .config import PipelineConfig, load_config
from .context import BinaryMask, ContextMap, apply_context, build_context_map, build_histogram
from .dbn import DbnModel, RbmLayer, TrainConfig, encode, train_dbn
from .evaluation import EvalReport, SsimParams, evaluate_pair, ssim
from .fusion import CertaintyMask, RetrievalGrid, StreamMask, binarize, fuse, restore_retrievals
from .iic import ClusterTree, HeadConfig, TreeConfig, assign_labels, build_tree, iic_loss
from .raster import LabelClass, RasterScene, compute_band_stats, extract_samples, load_raster, save_raster
from .synthetic import SceneSpec, generate_scene, generate_sequence
from .tracking import connected_components, match_instances, track_sequence

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig", "load_config",
    "BinaryMask", "ContextMap", "apply_context", "build_context_map", "build_histogram",
    "DbnModel", "RbmLayer", "TrainConfig", "encode", "train_dbn",
    "EvalReport", "SsimParams", "evaluate_pair", "ssim",
    "CertaintyMask", "RetrievalGrid", "StreamMask", "binarize", "fuse", "restore_retrievals",
    "ClusterTree", "HeadConfig", "TreeConfig", "assign_labels", "build_tree", "iic_loss",
    "LabelClass", "RasterScene", "compute_band_stats", "extract_samples", "load_raster", "save_raster",
    "SceneSpec", "generate_scene", "generate_sequence",
    "connected_components", "match_instances", "track_sequence",
]
