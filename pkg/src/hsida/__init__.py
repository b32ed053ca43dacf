"""Unsupervised domain adaptation for hyperspectral image classification.

Desk-scale pipeline: reversible convolutional backbone, gradient-guided
channel disentangling, shift-sensitive adaptive mask-ratio control, and a
composite adversarial/orthogonality training objective.
"""

from hsida.data import (
    HsiCube,
    PatchSet,
    SceneSpec,
    extract_patches,
    load_scene,
    sample_pair_batches,
    save_scene,
    synth_domain_pair,
    zscore_normalize,
)
from hsida.ssam import ShiftState
from hsida.trainer import TrainConfig, TrainedModel, load_checkpoint, save_checkpoint, train

__all__ = [
    "HsiCube",
    "PatchSet",
    "SceneSpec",
    "ShiftState",
    "TrainConfig",
    "TrainedModel",
    "extract_patches",
    "load_checkpoint",
    "load_scene",
    "sample_pair_batches",
    "save_checkpoint",
    "save_scene",
    "synth_domain_pair",
    "train",
    "zscore_normalize",
]
