"""Per-stream orchestration of anchors, per-layer memories and the loaded cache.

Each :meth:`MemoryManager.step` ingests one frame block: the anchor tier makes
one frame-level promotion decision, then every layer updates its own memory
independently (a frame promoted to anchor is withheld from the mid-term
pools), the loaded cache is assembled and the per-layer token budget is
checked. The current frame is always loaded, so frame-level budgets are
``(B_M + B_A + 1) * N`` tokens per layer.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from .anchor_tier import AnchorTier
from .errors import BudgetViolation, ConfigError, StructuralError
from .memory_core import FrameBlock, Prototype, StreamConfig
from .mid_bank import MidBank
from .policies import (
    FullCacheMemory,
    RecentKMemory,
    RetentionMask,
    TokenLevelMemory,
    full_indices,
)
from .trace import RetentionTrace


class Policy(str, enum.Enum):
    FRAME_KCENTER = "frame-kcenter"
    RECENT_K = "recent-k"
    TOKEN_LEVEL = "token-level"
    FULL_CACHE = "full-cache"

    @property
    def frame_level(self) -> bool:
        return self in (Policy.FRAME_KCENTER, Policy.RECENT_K)


@dataclass(frozen=True)
class PolicyConfig:
    policy: Policy = Policy.FRAME_KCENTER
    mid_capacity: int = 16
    anchor_capacity: int = 0
    gap: int = 50
    phi_min: float = 0.3
    nu_min: float = 0.05
    recent_k: int = 0
    token_budget: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.mid_capacity < 1:
            raise ConfigError(f"mid_capacity must be >= 1, got {self.mid_capacity}")
        if self.anchor_capacity < 0:
            raise ConfigError(f"anchor_capacity must be >= 0, got {self.anchor_capacity}")
        if self.gap < 1:
            raise ConfigError(f"gap must be >= 1, got {self.gap}")
        if not 0 <= self.recent_k <= self.mid_capacity:
            raise ConfigError(f"recent_k must satisfy 0 <= K <= {self.mid_capacity}")
        if self.recent_k and self.policy is not Policy.RECENT_K:
            raise ConfigError("recent_k is only meaningful with the recent-k policy")
        if self.token_budget is not None and self.policy is not Policy.TOKEN_LEVEL:
            raise ConfigError("token_budget is only meaningful with the token-level policy")
        if not self.policy.frame_level and self.anchor_capacity:
            raise ConfigError(f"the {self.policy.value} policy has no anchor tier")

    def token_budget_for(self, config: StreamConfig) -> int | None:
        """Per-layer loaded-token bound, or None for the unbounded full cache."""
        n = config.tokens_per_frame
        if self.policy is Policy.FULL_CACHE:
            return None
        if self.policy is Policy.TOKEN_LEVEL:
            return self.token_budget if self.token_budget is not None else self.mid_capacity * n
        return (self.mid_capacity + self.anchor_capacity + 1) * n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.value
        return d


class FrameKCenterMemory:
    """Default frame-level policy: one k-center mid bank per layer."""

    def __init__(self, layer: int, mid_capacity: int):
        self.layer = layer
        self.bank = MidBank(mid_capacity, layer)

    def ingest(self, block: FrameBlock) -> list[dict]:
        result = self.bank.ingest(block.frame_id, block.prototype(self.layer))
        events = [{"ev": "evict", "layer": self.layer, "frame": f} for f in result.evicted]
        if result.selection is not None and result.selection.degenerate_pairs:
            events.append(
                {"ev": "degenerate", "layer": self.layer, "pairs": result.selection.degenerate_pairs}
            )
        return events

    def history_ids(self) -> list[int]:
        return self.bank.ids

    def frame_ids(self) -> list[int]:
        return self.bank.ids

    def state(self) -> dict:
        return {"bank": self.bank.ids}

    def restore(self, state: dict, blocks: dict[int, FrameBlock]) -> None:
        self.bank.retained = [(fid, blocks[fid].prototype(self.layer)) for fid in state["bank"]]


@dataclass(eq=False)
class Segment:
    frame_id: int
    role: str  # anchor | mid | current
    keys: np.ndarray  # [H, n, D]
    values: np.ndarray
    tokens: np.ndarray  # source token indices within the frame
    positions: np.ndarray | None = None  # [n, 2] token positions, when known
    prototype: Prototype | None = None  # set for whole-frame segments

    @property
    def size(self) -> int:
        return int(self.keys.shape[1])


@dataclass(eq=False)
class LoadedCache:
    """Cache handed to the next inference step, per layer.

    Segment order: anchors ascending, mid-term blocks ascending, current frame.
    """

    step: int
    layers: list[list[Segment]]

    def token_count(self, layer: int) -> int:
        return sum(s.size for s in self.layers[layer])

    def keys(self, layer: int) -> np.ndarray:
        return np.concatenate([s.keys for s in self.layers[layer]], axis=1)

    def values(self, layer: int) -> np.ndarray:
        return np.concatenate([s.values for s in self.layers[layer]], axis=1)

    def provenance(self, layer: int) -> list[tuple[int, int, int, str]]:
        """(start, stop, frame_id, role) token ranges in cache order."""
        out, start = [], 0
        for s in self.layers[layer]:
            out.append((start, start + s.size, s.frame_id, s.role))
            start += s.size
        return out

    def frame_ids(self, layer: int) -> list[int]:
        return [s.frame_id for s in self.layers[layer]]


@dataclass
class MemoryBytes:
    per_layer: list[int]
    total: int


def kv_bytes(heads: int, tokens: int, dim: int, bytes_per_element: int) -> int:
    """Keys plus values for ``tokens`` retained tokens of one layer."""
    return heads * tokens * dim * 2 * bytes_per_element


class MemoryManager:
    def __init__(
        self,
        config: StreamConfig,
        policy: PolicyConfig | None = None,
        trace: RetentionTrace | None = None,
        enforce_budget: bool = True,
    ):
        self.config = config
        self.policy = policy or PolicyConfig()
        self.trace = trace if trace is not None else RetentionTrace(keep=False)
        self.enforce_budget = enforce_budget
        self.budget = self.policy.token_budget_for(config)
        p = self.policy
        self.tier = AnchorTier(p.anchor_capacity, gap=p.gap, phi_min=p.phi_min, nu_min=p.nu_min)
        self.memories = [self._make_memory(l) for l in range(config.num_layers)]
        self.blocks: dict[int, FrameBlock] = {}
        self.t = 0
        self.current: FrameBlock | None = None
        self.last_loaded: LoadedCache | None = None

    def _make_memory(self, layer: int):
        p = self.policy
        if p.policy is Policy.FRAME_KCENTER:
            return FrameKCenterMemory(layer, p.mid_capacity)
        if p.policy is Policy.RECENT_K:
            return RecentKMemory(layer, p.mid_capacity, p.recent_k)
        if p.policy is Policy.TOKEN_LEVEL:
            return TokenLevelMemory(layer, self.budget, self.config.tokens_per_frame)
        return FullCacheMemory(layer)

    @property
    def frames_seen(self) -> int:
        return self.t

    def step(self, block: FrameBlock) -> LoadedCache:
        if block.frame_id != self.t:
            raise StructuralError(f"expected frame {self.t}, got {block.frame_id}")
        block.validate(self.config)
        t = self.t
        events: list[dict] = [{"ev": "frame", "t": t}]

        promotion = self.tier.maybe_promote(block)
        if promotion.pose_fallback:
            events.append({"ev": "pose_fallback", "t": t})
        if promotion.evicted is not None:
            events.append({"ev": "anchor_evict", "t": t, "frame": promotion.evicted})
        if promotion.promoted:
            events.append({"ev": "promote", "t": t, "frame": t, "pinned": promotion.reason == "pinned-first"})

        for memory in self.memories:
            if promotion.promoted and self.policy.policy.frame_level:
                continue
            for e in memory.ingest(block):
                events.append({"t": t, **e})

        self.blocks[t] = block
        self.current = block
        self.t += 1
        self._collect_blocks()
        loaded = self.loaded()
        for layer in range(self.config.num_layers):
            n = loaded.token_count(layer)
            if self.policy.policy is Policy.TOKEN_LEVEL:
                mask = self.memories[layer].mask(self.t)
                frames = [[f, len(idx)] for f, idx in sorted(mask.kept.items())]
            else:
                frames = loaded.frame_ids(layer)
            events.append({"ev": "loaded", "t": t, "layer": layer, "tokens": n, "frames": frames})
            if self.enforce_budget and self.budget is not None and n > self.budget:
                self.trace.extend(events)
                raise BudgetViolation(
                    f"step {t} layer {layer}: {n} loaded tokens exceed budget {self.budget}"
                )
        self.trace.extend(events)
        self.last_loaded = loaded
        return loaded

    def _collect_blocks(self) -> None:
        """Drop blocks that no layer and no anchor references any more."""
        if self.policy.policy is Policy.TOKEN_LEVEL:
            live = {self.current.frame_id}
        else:
            live = set(self.tier.ids)
            for memory in self.memories:
                live.update(memory.frame_ids())
            live.add(self.current.frame_id)
        for fid in [f for f in self.blocks if f not in live]:
            del self.blocks[fid]

    def loaded(self) -> LoadedCache:
        layers = []
        cur = self.current
        for layer, memory in enumerate(self.memories):
            if self.policy.policy is Policy.TOKEN_LEVEL:
                layers.append(self._token_segments(memory))
                continue
            segs = []
            anchor_ids = set()
            for rec in sorted(self.tier.slots, key=lambda r: r.frame_id):
                anchor_ids.add(rec.frame_id)
                if cur is not None and rec.frame_id == cur.frame_id:
                    continue
                segs.append(self._block_segment(rec.block, layer, "anchor"))
            for fid in memory.history_ids():
                if fid in anchor_ids or (cur is not None and fid == cur.frame_id):
                    continue
                segs.append(self._block_segment(self.blocks[fid], layer, "mid"))
            if cur is not None:
                segs.append(self._block_segment(cur, layer, "current"))
            layers.append(segs)
        return LoadedCache(step=self.t - 1, layers=layers)

    def _block_segment(self, block: FrameBlock, layer: int, role: str) -> Segment:
        return Segment(
            block.frame_id,
            role,
            block.keys[layer],
            block.values[layer],
            full_indices(block.num_tokens),
            positions=block.meta.token_positions,
            prototype=block.prototype(layer),
        )

    def _token_segments(self, memory: TokenLevelMemory) -> list[Segment]:
        if not len(memory):
            return []
        cur_id = None if self.current is None else self.current.frame_id
        bounds = np.flatnonzero(np.diff(memory.fid)) + 1
        starts = [0, *bounds.tolist()]
        stops = [*bounds.tolist(), len(memory.fid)]
        segs = []
        for a, b in zip(starts, stops):
            fid = int(memory.fid[a])
            segs.append(
                Segment(
                    fid,
                    "current" if fid == cur_id else "mid",
                    memory.keys[:, a:b],
                    memory.values[:, a:b],
                    memory.tok[a:b],
                    positions=memory.positions[a:b],
                )
            )
        return segs

    def retention_mask(self, layer: int) -> RetentionMask:
        memory = self.memories[layer]
        if self.policy.policy is Policy.TOKEN_LEVEL:
            return memory.mask(self.t)
        loaded = self.last_loaded if self.last_loaded is not None else self.loaded()
        n = self.config.tokens_per_frame
        return RetentionMask(n, self.t, {fid: full_indices(n) for fid in loaded.frame_ids(layer)})

    def memory_bytes(self) -> MemoryBytes:
        return memory_bytes(self)


def memory_bytes(manager: MemoryManager) -> MemoryBytes:
    cfg = manager.config
    if manager.current is None:
        return MemoryBytes([0] * cfg.num_layers, 0)
    loaded = manager.last_loaded if manager.last_loaded is not None else manager.loaded()
    per_layer = [
        kv_bytes(cfg.heads_per_layer[l], loaded.token_count(l), cfg.key_dim[l], cfg.bytes_per_element)
        for l in range(cfg.num_layers)
    ]
    return MemoryBytes(per_layer, sum(per_layer))
