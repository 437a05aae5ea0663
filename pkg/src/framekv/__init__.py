"""Bounded frame-block KV-cache memory for streaming transformer inference."""

__version__ = "0.1.0"

from .anchor_tier import AnchorTier, normalize_pose, novelty, reliability
from .errors import BudgetViolation, ConfigError, ContainerError, StructuralError
from .manager import LoadedCache, MemoryManager, Policy, PolicyConfig, memory_bytes
from .memory_core import (
    FrameBlock,
    FrameMeta,
    Prototype,
    StreamConfig,
    compute_prototype,
    cosine_distance,
)
from .mid_bank import MidBank, coverage_radius, ingest_block, select_k_center
from .stream_sim import StreamSpec, generate, scenario, scenario_library

__all__ = [
    "AnchorTier",
    "BudgetViolation",
    "ConfigError",
    "ContainerError",
    "FrameBlock",
    "FrameMeta",
    "LoadedCache",
    "MemoryManager",
    "MidBank",
    "Policy",
    "PolicyConfig",
    "Prototype",
    "StreamConfig",
    "StreamSpec",
    "StructuralError",
    "compute_prototype",
    "cosine_distance",
    "coverage_radius",
    "generate",
    "ingest_block",
    "memory_bytes",
    "normalize_pose",
    "novelty",
    "reliability",
    "scenario",
    "scenario_library",
    "select_k_center",
]
