"""Sparse anchor tier: pinned first frame plus gap-gated FIFO slots.

A candidate frame is promoted when at least ``gap`` frames have elapsed since
the last promotion, its reliability ``confidence * sharpness`` reaches
``phi_min``, and its novelty (minimum cosine dissimilarity of its normalized
pose signature to every current anchor) reaches ``nu_min``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StructuralError
from .memory_core import FrameBlock, FrameMeta, Prototype, cosine_distance

EMPTY_TIER_NOVELTY = 2.0


def normalize_pose(pose) -> np.ndarray:
    """Unit 7-vector from quaternion + translation.

    Translation is squashed through ``t / (1 + |t|)`` before the whole vector
    is L2-normalized, so large translations cannot swamp the rotation part.
    """
    p = np.asarray(pose, dtype=np.float64)
    if p.shape != (7,):
        raise StructuralError(f"pose signature must be a 7-vector, got {p.shape}")
    t = p[4:]
    sig = np.concatenate([p[:4], t / (1.0 + np.linalg.norm(t))])
    return sig / np.linalg.norm(sig)


def reliability(meta: FrameMeta) -> float:
    return meta.confidence * meta.sharpness


@dataclass(eq=False)
class AnchorRecord:
    frame_id: int
    meta: FrameMeta
    signature: np.ndarray | None
    prototypes: tuple[Prototype, ...]
    block: FrameBlock
    pinned: bool = False


@dataclass
class PromotionResult:
    promoted: bool
    evicted: int | None = None
    reason: str = ""
    delta_t: int | None = None
    phi: float | None = None
    nu: float | None = None
    pose_fallback: bool = False


@dataclass
class AnchorTier:
    capacity: int
    gap: int = 50
    phi_min: float = 0.3
    nu_min: float = 0.05
    slots: list[AnchorRecord] = field(default_factory=list)
    t_last: int | None = None
    last_seen: int | None = None

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigError(f"anchor capacity must be >= 0, got {self.capacity}")
        if self.gap < 1:
            raise ConfigError(f"anchor gap must be >= 1, got {self.gap}")

    def __len__(self) -> int:
        return len(self.slots)

    def __contains__(self, frame_id: int) -> bool:
        return any(s.frame_id == frame_id for s in self.slots)

    @property
    def ids(self) -> list[int]:
        return [s.frame_id for s in self.slots]

    def novelty(self, block: FrameBlock) -> tuple[float, bool]:
        """Novelty of ``block`` against the tier; second item flags prototype fallback."""
        if not self.slots:
            return EMPTY_TIER_NOVELTY, block.meta.pose_signature is None
        pose = block.meta.pose_signature
        if pose is not None and all(s.signature is not None for s in self.slots):
            return novelty(normalize_pose(pose), self), False
        proto = block.prototype(0)
        return min(cosine_distance(proto, s.prototypes[0]) for s in self.slots), True

    def maybe_promote(self, block: FrameBlock) -> PromotionResult:
        t = block.frame_id
        if self.last_seen is not None and t <= self.last_seen:
            raise StructuralError(f"anchor tier received frame {t} after {self.last_seen}")
        first = self.last_seen is None
        self.last_seen = t
        if self.capacity == 0:
            return PromotionResult(False, reason="disabled")
        if first:
            self._append(block, pinned=True)
            return PromotionResult(True, reason="pinned-first")

        delta_t = t - self.t_last
        if delta_t < self.gap:
            return PromotionResult(False, reason="gap", delta_t=delta_t)
        phi = reliability(block.meta)
        nu, fallback = self.novelty(block)
        result = PromotionResult(
            False, delta_t=delta_t, phi=phi, nu=nu, pose_fallback=fallback
        )
        if phi < self.phi_min:
            result.reason = "reliability"
            return result
        if nu < self.nu_min:
            result.reason = "novelty"
            return result
        if len(self.slots) >= self.capacity:
            # FIFO over the non-pinned slots; slot 0 is never evicted.
            victim = next((i for i, s in enumerate(self.slots) if not s.pinned), None)
            if victim is None:
                result.reason = "full"
                return result
            result.evicted = self.slots.pop(victim).frame_id
        self._append(block, pinned=False)
        result.promoted = True
        result.reason = "promoted"
        return result

    def _append(self, block: FrameBlock, pinned: bool) -> None:
        pose = block.meta.pose_signature
        self.slots.append(
            AnchorRecord(
                frame_id=block.frame_id,
                meta=block.meta,
                signature=None if pose is None else normalize_pose(pose),
                prototypes=tuple(block.prototype(l) for l in range(len(block.keys))),
                block=block,
                pinned=pinned,
            )
        )
        self.t_last = block.frame_id


def novelty(candidate_signature: np.ndarray, tier: AnchorTier) -> float:
    """min over anchors of ``1 - <p_candidate, p_anchor>`` on unit signatures."""
    sigs = [s.signature for s in tier.slots if s.signature is not None]
    if not sigs:
        return EMPTY_TIER_NOVELTY
    dots = np.stack(sigs) @ np.asarray(candidate_signature, dtype=np.float64)
    return float(np.min(1.0 - dots))


def maybe_promote(tier: AnchorTier, block: FrameBlock) -> tuple[AnchorTier, bool, int | None]:
    result = tier.maybe_promote(block)
    return tier, result.promoted, result.evicted
