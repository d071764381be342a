"""Validating trainer adapter for the iterative run loop.

Consumes the loop's exported artifacts only: train_job.json manifests plus
the sft.jsonl / dpo.jsonl datasets they point at. Checks every record,
reports dataset statistics, and either stubs the training step or launches
an external fine-tuning command. It never reinterprets rewards and never
reselects data.
"""

from .errors import BridgeError, ToolchainError
from .runner import (
    JOB_KINDS,
    LOSS_KINDS,
    RESULT_NAME,
    START_MODES,
    AdapterManifest,
    LossSpec,
    ModelInfo,
    default_loss,
    launch_arguments,
    load_manifest,
    run_training,
)
from .validation import DATASET_KINDS, DatasetStats, validate_dataset

__all__ = [
    "AdapterManifest",
    "BridgeError",
    "DATASET_KINDS",
    "DatasetStats",
    "JOB_KINDS",
    "LOSS_KINDS",
    "LossSpec",
    "ModelInfo",
    "RESULT_NAME",
    "START_MODES",
    "ToolchainError",
    "default_loss",
    "launch_arguments",
    "load_manifest",
    "run_training",
    "validate_dataset",
]
