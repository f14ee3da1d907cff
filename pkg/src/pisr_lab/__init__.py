"""Panoptic relational attention on a numpy autodiff core, at synthetic-scene scale."""

from pisr_lab.model import VARIANTS, Model, build_variant
from pisr_lab.scenes import SceneConfig, generate

__all__ = ["VARIANTS", "Model", "SceneConfig", "build_variant", "generate"]
__version__ = "0.1.0"
