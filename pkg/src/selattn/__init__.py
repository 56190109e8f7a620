"""Selective attention for decoder-only transformers, on a small numpy autodiff engine."""
from .attention import AttentionConfig, selective_attention
from .estimator import ContextPruner, SelectiveTransformerLM
from .model import ModelConfig, TransformerLM, param_count
from .pruning import MemLossParams, PruneBudget, evict_sequence, greedy_budget_search, masked_eval, memory_loss
from .training import TrainConfig, evaluate, train

__all__ = [
    "AttentionConfig",
    "ContextPruner",
    "MemLossParams",
    "ModelConfig",
    "PruneBudget",
    "SelectiveTransformerLM",
    "TrainConfig",
    "TransformerLM",
    "evaluate",
    "evict_sequence",
    "greedy_budget_search",
    "masked_eval",
    "memory_loss",
    "param_count",
    "selective_attention",
    "train",
]
