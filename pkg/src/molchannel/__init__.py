"""Two-channel molecular transformer: one backbone, separately switchable
graph and geometry structural encodings, built on a small numpy autodiff."""

from .autodiff import Tape, Tensor, backward
from .data import SyntheticSpec, TargetTransform, gen_synthetic, load_jsonl, load_xyz, save_jsonl
from .model import Model, ModelConfig
from .molecule import Mode, Molecule, available_modes, validate
from .training import ModeDistribution, TrainConfig, evaluate, fit

__all__ = [
    "Mode", "Model", "ModelConfig", "ModeDistribution", "Molecule", "SyntheticSpec", "Tape",
    "TargetTransform", "Tensor", "TrainConfig", "available_modes", "backward", "evaluate",
    "fit", "gen_synthetic", "load_jsonl", "load_xyz", "save_jsonl", "validate",
]
__version__ = "0.1.0"
