"""Crop-zoom active perception engine.

Two-stage inference over very large images (look at a downsampled view,
propose a region, zoom into it at full resolution), the reward functions
and GRPO objective used to train that behaviour, an evaluation harness, and
a synthetic laboratory for exercising the training maths end to end.
"""

from .geometry import BBox, ImageRef, Resolution, center_distance, crop_region, expand_to_size, iou, scale_bbox
from .protocol import ParsedResponse, TaskKind, ToolCall, parse_response, parse_tool_call, validate_pattern
from .rewards import RewardBreakdown, RewardConfig, composite_reward, reward_region_guided
from .grpo import GroupBatch, GrpoConfig, Trajectory, group_advantages, grpo_objective

__version__ = "0.1.0"

__all__ = [
    "BBox", "ImageRef", "Resolution", "center_distance", "crop_region", "expand_to_size", "iou", "scale_bbox",
    "ParsedResponse", "TaskKind", "ToolCall", "parse_response", "parse_tool_call", "validate_pattern",
    "RewardBreakdown", "RewardConfig", "composite_reward", "reward_region_guided",
    "GroupBatch", "GrpoConfig", "Trajectory", "group_advantages", "grpo_objective",
]
