"""Blockwise prediction, post-processing and evaluation of large chunked volumes."""

from .geometry import Block, BlockSpec, Coordinate, FitPolicy, Roi, enumerate_blocks
from .scheduler import BlockTask, ExecutionContext, RunReport, run_blockwise, run_pipeline
from .store import ArrayMetadata, VolumeAttributes, VolumeHandle, create_dataset, open_dataset

__all__ = [
    "ArrayMetadata",
    "Block",
    "BlockSpec",
    "BlockTask",
    "Coordinate",
    "ExecutionContext",
    "FitPolicy",
    "Roi",
    "RunReport",
    "VolumeAttributes",
    "VolumeHandle",
    "create_dataset",
    "enumerate_blocks",
    "open_dataset",
    "run_blockwise",
    "run_pipeline",
]
