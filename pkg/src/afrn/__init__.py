"""Attentional feature-pair relation networks with hand-written gradients."""
from .model import (PAPER_PRESET, TOY_PRESET, BilinearAttentionMap, ModelConfig,
                    ModelParams, PairSelection, attention_logits, attention_map,
                    backward, forward, init_params, joint_relation_full,
                    joint_relation_naive, joint_relation_selected, pool_relation,
                    rearrange, select_pairs)

__version__ = "0.1.0"

__all__ = ["PAPER_PRESET", "TOY_PRESET", "BilinearAttentionMap", "ModelConfig", "ModelParams",
           "PairSelection", "attention_logits", "attention_map", "backward", "forward",
           "init_params", "joint_relation_full", "joint_relation_naive",
           "joint_relation_selected", "pool_relation", "rearrange", "select_pairs"]
