"""Sparse coarse-to-fine instance mask head on structure-preserving sparse maps."""

from spsmask.config import PipelineConfig, load_config
from spsmask.errors import InputError, InvariantError
from spsmask.flops import FlopReport, count_flops
from spsmask.params import ConvKernel, DeformConvParams, MlpParams, SfmParams
from spsmask.pipeline import (
    MaskStack,
    PipelineWeights,
    StageOutputs,
    assemble_masks,
    init_weights,
    paste_roi,
    refine_stage,
    run_pipeline,
    score,
    stage0,
)
from spsmask.sps import SpsMap, build_from_dense, to_dense, update_partition, upsample_split, validate
from spsmask.tensor import FeaturePyramid, RoiDetection

__version__ = "0.1.0"

__all__ = [
    "ConvKernel",
    "DeformConvParams",
    "FeaturePyramid",
    "FlopReport",
    "InputError",
    "InvariantError",
    "MaskStack",
    "MlpParams",
    "PipelineConfig",
    "PipelineWeights",
    "RoiDetection",
    "SfmParams",
    "SpsMap",
    "StageOutputs",
    "assemble_masks",
    "build_from_dense",
    "count_flops",
    "init_weights",
    "load_config",
    "paste_roi",
    "refine_stage",
    "run_pipeline",
    "score",
    "stage0",
    "to_dense",
    "update_partition",
    "upsample_split",
    "validate",
]
