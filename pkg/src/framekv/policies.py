"""Per-layer retention policies used as controlled baselines.

* :class:`RecentKMemory` reserves the last ``K`` frames unconditionally and
  runs k-center over the older blocks with the remaining ``B_M - K`` slots.
* :class:`TokenLevelMemory` is a proxy for token-granular retention driven by
  key-space diversity: farthest-first over individual (head-averaged) token
  keys under a global token budget. It is not a reimplementation of any
  published token-pruning method.
* :class:`FullCacheMemory` keeps everything and is exempt from budgets.

All memories expose the same small surface so the manager can drive them
uniformly: ``ingest`` returns trace events, ``history_ids`` lists retained
past frames, and ``mask`` reports retained token indices per source frame.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError
from .memory_core import FrameBlock, Prototype, unit_rows
from .mid_bank import MidBank, farthest_first


@dataclass
class RetentionMask:
    """Retained token indices per source frame for one layer.

    Frames absent from ``kept`` have ``b_t = 0``.
    """

    tokens_per_frame: int
    frames_seen: int
    kept: dict[int, np.ndarray]

    def b(self, frame_id: int) -> int:
        idx = self.kept.get(frame_id)
        return 0 if idx is None else int(len(idx))

    def indicators(self, frame_id: int) -> np.ndarray:
        m = np.zeros(self.tokens_per_frame, dtype=bool)
        idx = self.kept.get(frame_id)
        if idx is not None:
            m[idx] = True
        return m

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.kept.values())

    def compression_ratio(self, frame_id: int) -> float:
        return 1.0 - self.b(frame_id) / self.tokens_per_frame


def full_indices(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


class RecentKMemory:
    """Recent-K hybrid: a FIFO of the last ``recent_k`` frames in front of a k-center bank."""

    def __init__(self, layer: int, mid_capacity: int, recent_k: int):
        if not 0 <= recent_k <= mid_capacity:
            raise ConfigError(f"recent_k must satisfy 0 <= K <= B_M ({mid_capacity}), got {recent_k}")
        self.layer = layer
        self.mid_capacity = mid_capacity
        self.recent_k = recent_k
        self.recent: deque[tuple[int, Prototype]] = deque()
        slots = mid_capacity - recent_k
        self.bank = MidBank(slots, layer) if slots > 0 else None

    def ingest(self, block: FrameBlock) -> list[dict]:
        fid = block.frame_id
        self.recent.append((fid, block.prototype(self.layer)))
        if len(self.recent) <= self.recent_k:
            return []
        # the oldest reserved frame leaves the window and becomes the newest k-center candidate
        old_id, old_proto = self.recent.popleft()
        if self.bank is None:
            return [{"ev": "evict", "layer": self.layer, "frame": old_id}]
        result = self.bank.ingest(old_id, old_proto)
        events = [{"ev": "evict", "layer": self.layer, "frame": f} for f in result.evicted]
        if result.selection is not None and result.selection.degenerate_pairs:
            events.append(
                {"ev": "degenerate", "layer": self.layer, "pairs": result.selection.degenerate_pairs}
            )
        return events

    def history_ids(self) -> list[int]:
        ids = [fid for fid, _ in self.recent]
        if self.bank is not None:
            ids += self.bank.ids
        return sorted(ids)

    def frame_ids(self) -> list[int]:
        return self.history_ids()

    def state(self) -> dict:
        return {
            "recent": [fid for fid, _ in self.recent],
            "bank": [] if self.bank is None else self.bank.ids,
        }

    def restore(self, state: dict, blocks: dict[int, FrameBlock]) -> None:
        self.recent = deque((fid, blocks[fid].prototype(self.layer)) for fid in state["recent"])
        if self.bank is not None:
            self.bank.retained = [(fid, blocks[fid].prototype(self.layer)) for fid in state["bank"]]


def token_units(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Head-averaged, unit-normalized token keys: [H, n, D] -> ([n, D], degenerate[n])."""
    return unit_rows(np.asarray(keys, dtype=np.float64).mean(axis=0))


class TokenLevelMemory:
    """Token-granular k-center retention under a global token budget."""

    def __init__(self, layer: int, token_budget: int, tokens_per_frame: int):
        if token_budget < tokens_per_frame:
            raise ConfigError(
                f"token budget {token_budget} is smaller than one frame ({tokens_per_frame} tokens)"
            )
        self.layer = layer
        self.budget = token_budget
        self.tokens_per_frame = tokens_per_frame
        self.fid = np.zeros(0, dtype=np.int64)
        self.tok = np.zeros(0, dtype=np.int64)
        self.keys: np.ndarray | None = None  # [H, n, D]
        self.values: np.ndarray | None = None
        self.units = np.zeros((0, 0))
        self.degenerate = np.zeros(0, dtype=bool)
        self.positions = np.zeros((0, 2))

    def __len__(self) -> int:
        return int(self.fid.shape[0])

    def ingest(self, block: FrameBlock) -> list[dict]:
        k = block.keys[self.layer]
        v = block.values[self.layer]
        n_new = k.shape[1]
        new_units, new_deg = token_units(k)
        new_pos = (
            block.meta.token_positions
            if block.meta.token_positions is not None
            else np.full((n_new, 2), np.nan)
        )
        if self.keys is None:
            self.keys = k[:, :0]
            self.values = v[:, :0]
            self.units = np.zeros((0, k.shape[2]))
        fid = np.concatenate([self.fid, np.full(n_new, block.frame_id, dtype=np.int64)])
        tok = np.concatenate([self.tok, full_indices(n_new)])
        keys = np.concatenate([self.keys, k], axis=1)
        values = np.concatenate([self.values, v], axis=1)
        units = np.concatenate([self.units, new_units])
        deg = np.concatenate([self.degenerate, new_deg])
        pos = np.concatenate([self.positions, new_pos])

        events: list[dict] = []
        if len(fid) > self.budget:
            offset = len(self.fid)
            seed = offset + self._seed_token(block, new_units)
            picks, _, _, _ = farthest_first(units, deg, seed, self.budget)
            keep = np.zeros(len(fid), dtype=bool)
            keep[picks] = True
            dropped_frames, counts = np.unique(fid[~keep], return_counts=True)
            events = [
                {"ev": "evict_tokens", "layer": self.layer, "frame": int(f), "n": int(c)}
                for f, c in zip(dropped_frames, counts)
            ]
            fid, tok, units, deg, pos = fid[keep], tok[keep], units[keep], deg[keep], pos[keep]
            keys, values = keys[:, keep], values[:, keep]
        self.fid, self.tok, self.keys, self.values = fid, tok, keys, values
        self.units, self.degenerate, self.positions = units, deg, pos
        return events

    def _seed_token(self, block: FrameBlock, new_units: np.ndarray) -> int:
        """Token of the newest frame closest to that frame's prototype (lowest index on ties)."""
        proto = block.prototype(self.layer)
        if proto.degenerate:
            return 0
        return int(np.argmax(new_units @ proto.unit))

    def mask(self, frames_seen: int) -> RetentionMask:
        kept: dict[int, np.ndarray] = {}
        if len(self.fid):
            bounds = np.flatnonzero(np.diff(self.fid)) + 1
            for chunk_f, chunk_t in zip(np.split(self.fid, bounds), np.split(self.tok, bounds)):
                kept[int(chunk_f[0])] = chunk_t.copy()
        return RetentionMask(self.tokens_per_frame, frames_seen, kept)

    def frame_ids(self) -> list[int]:
        return [int(f) for f in np.unique(self.fid)]

    def state(self) -> dict:
        return {"fid": self.fid.tolist(), "tok": self.tok.tolist(), "positions": self.positions.tolist()}

    def restore(self, state: dict, keys: np.ndarray, values: np.ndarray) -> None:
        self.fid = np.asarray(state["fid"], dtype=np.int64)
        self.tok = np.asarray(state["tok"], dtype=np.int64)
        self.positions = np.asarray(state["positions"], dtype=np.float64).reshape(-1, 2)
        if not len(self.fid) == keys.shape[1] == len(self.positions):
            raise StructuralError("token checkpoint arrays disagree in length")
        self.keys, self.values = keys, values
        self.units, self.degenerate = token_units(keys)


class FullCacheMemory:
    """Unbounded reference policy: every past frame stays loaded."""

    def __init__(self, layer: int):
        self.layer = layer
        self.ids: list[int] = []

    def ingest(self, block: FrameBlock) -> list[dict]:
        self.ids.append(block.frame_id)
        return []

    def history_ids(self) -> list[int]:
        return list(self.ids)

    def frame_ids(self) -> list[int]:
        return list(self.ids)

    def state(self) -> dict:
        return {"ids": list(self.ids)}

    def restore(self, state: dict, blocks: dict[int, FrameBlock]) -> None:
        self.ids = list(state["ids"])
