"""Structured pruning of vision transformers with KL-based importance scores."""
__version__ = "0.1.0"

from .arch import ArchSpec, BlockSpec, StageSpec
from .model import Model, accuracy, forward, init_model, predict_logits
from .importance import ImportanceTable, build_proxy, score_model
from .surgeon import (ChannelTargets, PruneRecipe, apply_recipe, one_shot_block_prune,
                      progressive_block_prune, prune_channels, remove_block, remove_hybrid, validate)
from .cost import cost_report
from .distill import DistillConfig, finetune
from .persist import load_checkpoint, load_recipe, load_table, save_checkpoint, save_recipe, save_table

__all__ = [
    "ArchSpec", "BlockSpec", "StageSpec", "Model", "accuracy", "forward", "init_model", "predict_logits",
    "ImportanceTable", "build_proxy", "score_model", "ChannelTargets", "PruneRecipe", "apply_recipe",
    "one_shot_block_prune", "progressive_block_prune", "prune_channels", "remove_block", "remove_hybrid",
    "validate", "cost_report", "DistillConfig", "finetune", "load_checkpoint", "load_recipe", "load_table",
    "save_checkpoint", "save_recipe", "save_table", "__version__",
]
