"""Versioned binary checkpoints of a :class:`MemoryManager`.

Layout::

    magic  b"FKVCKPT\\0"
    u32    format version (little-endian)
    u64    header length
    bytes  JSON header (state, section table)
    bytes  payload: concatenated little-endian float32 sections

Prototypes and normalized token keys are recomputed from the stored float32
keys on load, which reproduces them exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .anchor_tier import AnchorRecord, normalize_pose
from .errors import ContainerError
from .manager import MemoryManager, Policy, PolicyConfig
from .memory_core import FrameBlock, StreamConfig
from .stream_sim import meta_record, meta_from_record

MAGIC = b"FKVCKPT\0"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class _Sections:
    def __init__(self):
        self.table: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, array: np.ndarray) -> None:
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        self.table.append({"name": name, "shape": list(array.shape), "offset": self.offset})
        self.chunks.append(data)
        self.offset += len(data)


def save_checkpoint(manager: MemoryManager, path, extra: dict | None = None) -> None:
    sections = _Sections()
    blocks = []
    for fid in sorted(manager.blocks):
        block = manager.blocks[fid]
        blocks.append({"meta": meta_record(block.meta)})
        for layer, (k, v) in enumerate(zip(block.keys, block.values)):
            sections.add(f"block/{fid}/{layer}/keys", k)
            sections.add(f"block/{fid}/{layer}/values", v)

    memories = []
    for layer, memory in enumerate(manager.memories):
        memories.append(memory.state())
        if manager.policy.policy is Policy.TOKEN_LEVEL and memory.keys is not None:
            sections.add(f"tokens/{layer}/keys", memory.keys)
            sections.add(f"tokens/{layer}/values", memory.values)

    tier = manager.tier
    header = {
        "version": VERSION,
        "config": manager.config.to_dict(),
        "policy": manager.policy.to_dict(),
        "t": manager.t,
        "current": None if manager.current is None else manager.current.frame_id,
        "tier": {
            "slots": [{"frame_id": s.frame_id, "pinned": s.pinned} for s in tier.slots],
            "t_last": tier.t_last,
            "last_seen": tier.last_seen,
        },
        "memories": memories,
        "blocks": blocks,
        "trace_events": manager.trace.count,
        "sections": sections.table,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + _U32.pack(VERSION) + _U64.pack(len(head)) + head)
        for chunk in sections.chunks:
            f.write(chunk)


def read_header(f) -> dict:
    if f.read(len(MAGIC)) != MAGIC:
        raise ContainerError("not a checkpoint (bad magic)")
    raw = f.read(4)
    if len(raw) != 4:
        raise ContainerError("truncated checkpoint")
    (version,) = _U32.unpack(raw)
    if version > VERSION:
        raise ContainerError(f"checkpoint version {version} is newer than supported {VERSION}")
    (hlen,) = _U64.unpack(f.read(8))
    header = json.loads(f.read(hlen))
    if header.get("version") != version:
        raise ContainerError("checkpoint header version disagrees with container version")
    return header


def load_checkpoint(path, trace=None) -> MemoryManager:
    with open(path, "rb") as f:
        header = read_header(f)
        payload = f.read()

    def section(name: str) -> np.ndarray:
        for entry in header["sections"]:
            if entry["name"] == name:
                count = int(np.prod(entry["shape"])) if entry["shape"] else 1
                start = entry["offset"]
                buf = payload[start : start + 4 * count]
                if len(buf) != 4 * count:
                    raise ContainerError(f"section {name} is truncated")
                return np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        raise ContainerError(f"missing section {name}")

    config = StreamConfig.from_dict(header["config"])
    policy = PolicyConfig(**header["policy"])
    manager = MemoryManager(config, policy, trace=trace)

    blocks: dict[int, FrameBlock] = {}
    for rec in header["blocks"]:
        meta = meta_from_record(rec["meta"])
        fid = meta.frame_id
        keys = tuple(section(f"block/{fid}/{l}/keys") for l in range(config.num_layers))
        values = tuple(section(f"block/{fid}/{l}/values") for l in range(config.num_layers))
        blocks[fid] = FrameBlock(meta=meta, keys=keys, values=values)

    tier = manager.tier
    for slot in header["tier"]["slots"]:
        block = blocks[slot["frame_id"]]
        pose = block.meta.pose_signature
        tier.slots.append(
            AnchorRecord(
                frame_id=block.frame_id,
                meta=block.meta,
                signature=None if pose is None else normalize_pose(pose),
                prototypes=tuple(block.prototype(l) for l in range(config.num_layers)),
                block=block,
                pinned=slot["pinned"],
            )
        )
    tier.t_last = header["tier"]["t_last"]
    tier.last_seen = header["tier"]["last_seen"]

    for layer, (memory, state) in enumerate(zip(manager.memories, header["memories"])):
        if policy.policy is Policy.TOKEN_LEVEL:
            if state["fid"]:
                memory.restore(
                    state,
                    section(f"tokens/{layer}/keys"),
                    section(f"tokens/{layer}/values"),
                )
        else:
            memory.restore(state, blocks)

    manager.blocks = blocks
    manager.t = header["t"]
    if header["current"] is not None:
        manager.current = blocks[header["current"]]
        manager.last_loaded = manager.loaded()
    return manager
