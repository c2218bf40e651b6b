"""Rotation-equivariant point-level affordance learning for articulated objects.

Submodules: :mod:`geometry`, :mod:`vn_core`, :mod:`heads`, :mod:`simenv`,
:mod:`datagen`, :mod:`trainer`, :mod:`evalkit`, :mod:`cli`.
"""
from .errors import (CheckpointLoadError, DatasetLoadError, DegenerateFrameError, InsufficientPointsError,
                     InvalidRotationError, NoValidProposalError, TrainingInfeasibleError, UndefinedMetricError,
                     VNAffordError)
from .geometry import PointCloud, RigidTransform
from .heads import AffordanceModel, build_model, infer_best_action, load_model, save_model
from .vn_core import ModelConfig

__version__ = "0.1.0"
