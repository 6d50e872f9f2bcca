"""Importance-driven token merging for diffusion-style attention workloads."""

from .core import (
    STRATEGIES,
    STRATEGY_GRID,
    STRATEGY_NONE,
    STRATEGY_POOL,
    STRATEGY_TOPK,
    ConfigInfeasibleError,
    ImportanceMap,
    InvalidPlanError,
    MergeConfig,
    MergePlan,
    PlanCounts,
    TokenMatrix,
    apply_merge,
    apply_prune,
    apply_unmerge,
    counts_for,
    identity_plan,
)
from .importance import guidance_magnitude, rank_tokens, resample_importance
from .matching import bipartite_match, cosine_kernel, cosine_similarity, paired_cosine
from .rng import Rng
from .strategy import plan_importance_pool, plan_tome_grid, plan_topk_dst
from .toydiff import (
    NoiseSchedule,
    SamplerState,
    ScheduledPlan,
    ToyDenoiser,
    cfg_predict,
    combine_guidance,
    forward_noise,
    sample,
    scheduled_plan,
)

__version__ = "0.1.0"

__all__ = [
    "STRATEGIES",
    "STRATEGY_GRID",
    "STRATEGY_NONE",
    "STRATEGY_POOL",
    "STRATEGY_TOPK",
    "ConfigInfeasibleError",
    "ImportanceMap",
    "InvalidPlanError",
    "MergeConfig",
    "MergePlan",
    "NoiseSchedule",
    "PlanCounts",
    "Rng",
    "SamplerState",
    "ScheduledPlan",
    "TokenMatrix",
    "ToyDenoiser",
    "apply_merge",
    "apply_prune",
    "apply_unmerge",
    "bipartite_match",
    "cfg_predict",
    "combine_guidance",
    "cosine_kernel",
    "cosine_similarity",
    "counts_for",
    "forward_noise",
    "guidance_magnitude",
    "identity_plan",
    "paired_cosine",
    "plan_importance_pool",
    "plan_tome_grid",
    "plan_topk_dst",
    "rank_tokens",
    "resample_importance",
    "sample",
    "scheduled_plan",
]
