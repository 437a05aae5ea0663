"""Frame/block domain types and the prototype + cosine-distance math.

A frame block is one frame's incremental per-layer KV contribution. Every
retention policy compares blocks through their key-space prototype: the mean
key over heads and tokens, L2-normalized, with distance ``1 - <a, b>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, StructuralError

DEGENERATE_NORM = 1e-12
# Distance assigned to any pair involving a zero-mean prototype.
DEGENERATE_DISTANCE = 1.0


def _per_layer(value, num_layers: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * num_layers
    value = tuple(int(v) for v in value)
    if len(value) != num_layers:
        raise ConfigError(f"{name} has {len(value)} entries, expected {num_layers}")
    return value


@dataclass(frozen=True)
class StreamConfig:
    """Immutable stream dimensions.

    ``heads_per_layer`` and ``key_dim`` accept a single int (broadcast to all
    layers) or one entry per layer.
    """

    num_layers: int
    heads_per_layer: tuple[int, ...] | int
    tokens_per_frame: int
    key_dim: tuple[int, ...] | int
    bytes_per_element: int = 4

    def __post_init__(self):
        if int(self.num_layers) < 1:
            raise ConfigError("num_layers must be >= 1")
        object.__setattr__(self, "num_layers", int(self.num_layers))
        heads = _per_layer(self.heads_per_layer, self.num_layers, "heads_per_layer")
        dims = _per_layer(self.key_dim, self.num_layers, "key_dim")
        object.__setattr__(self, "heads_per_layer", heads)
        object.__setattr__(self, "key_dim", dims)
        for name, val in (
            ("tokens_per_frame", self.tokens_per_frame),
            ("bytes_per_element", self.bytes_per_element),
            *((f"heads_per_layer[{i}]", h) for i, h in enumerate(heads)),
            *((f"key_dim[{i}]", d) for i, d in enumerate(dims)),
        ):
            if int(val) < 1:
                raise ConfigError(f"{name} must be >= 1, got {val}")
        object.__setattr__(self, "tokens_per_frame", int(self.tokens_per_frame))
        object.__setattr__(self, "bytes_per_element", int(self.bytes_per_element))

    def block_shape(self, layer: int) -> tuple[int, int, int]:
        return (self.heads_per_layer[layer], self.tokens_per_frame, self.key_dim[layer])

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "heads_per_layer": list(self.heads_per_layer),
            "tokens_per_frame": self.tokens_per_frame,
            "key_dim": list(self.key_dim),
            "bytes_per_element": self.bytes_per_element,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        return cls(
            num_layers=d["num_layers"],
            heads_per_layer=tuple(d["heads_per_layer"]),
            tokens_per_frame=d["tokens_per_frame"],
            key_dim=tuple(d["key_dim"]),
            bytes_per_element=d.get("bytes_per_element", 4),
        )


@dataclass(eq=False)
class FrameMeta:
    frame_id: int
    confidence: float = 1.0
    sharpness: float = 1.0
    pose_signature: np.ndarray | None = None  # quaternion (4) + translation (3)
    token_positions: np.ndarray | None = None  # [N, 2] in [0, 1]^2
    cluster: int = -1  # simulator ground truth, -1 when unknown

    def __post_init__(self):
        if self.frame_id < 0:
            raise StructuralError(f"frame_id must be non-negative, got {self.frame_id}")
        for name in ("confidence", "sharpness"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise StructuralError(f"{name} must lie in [0, 1], got {v}")
            setattr(self, name, v)
        if self.pose_signature is not None:
            p = np.asarray(self.pose_signature, dtype=np.float64)
            if p.shape != (7,):
                raise StructuralError(f"pose_signature must be a 7-vector, got {p.shape}")
            if abs(np.linalg.norm(p[:4]) - 1.0) > 1e-6:
                raise StructuralError("pose quaternion must have unit norm")
            self.pose_signature = p
        if self.token_positions is not None:
            pos = np.asarray(self.token_positions, dtype=np.float64)
            if pos.ndim != 2 or pos.shape[1] != 2:
                raise StructuralError("token_positions must have shape [N, 2]")
            self.token_positions = pos


@dataclass(frozen=True, eq=False)
class Prototype:
    raw: np.ndarray
    unit: np.ndarray
    degenerate: bool

    @property
    def dim(self) -> int:
        return int(self.raw.shape[0])

    @classmethod
    def from_vector(cls, v) -> "Prototype":
        raw = np.asarray(v, dtype=np.float64)
        norm = float(np.linalg.norm(raw))
        if norm < DEGENERATE_NORM:
            return cls(raw, np.zeros_like(raw), True)
        return cls(raw, raw / norm, False)


@dataclass(eq=False)
class FrameBlock:
    meta: FrameMeta
    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]
    _prototypes: dict[int, Prototype] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.keys = tuple(self.keys)
        self.values = tuple(self.values)
        if len(self.keys) != len(self.values):
            raise StructuralError("keys and values cover a different number of layers")
        for layer, (k, v) in enumerate(zip(self.keys, self.values)):
            if k.shape != v.shape:
                raise StructuralError(f"layer {layer}: keys {k.shape} vs values {v.shape}")
            if k.ndim != 3:
                raise StructuralError(f"layer {layer}: expected [H, N, D] keys, got {k.shape}")

    @property
    def frame_id(self) -> int:
        return self.meta.frame_id

    @property
    def num_tokens(self) -> int:
        return int(self.keys[0].shape[1])

    def validate(self, config: StreamConfig) -> None:
        if len(self.keys) != config.num_layers:
            raise StructuralError(
                f"block has {len(self.keys)} layers, config expects {config.num_layers}"
            )
        for layer, k in enumerate(self.keys):
            if k.shape != config.block_shape(layer):
                raise StructuralError(
                    f"layer {layer}: block shape {k.shape} != {config.block_shape(layer)}"
                )

    def prototype(self, layer: int) -> Prototype:
        """Cached per-layer prototype (computed at most once per block)."""
        proto = self._prototypes.get(layer)
        if proto is None:
            proto = compute_prototype(self, layer)
            self._prototypes[layer] = proto
        return proto


def mean_key(keys: np.ndarray) -> np.ndarray:
    """Mean over every leading axis of ``keys`` in float64.

    Rows are sorted per column before summation so the result does not depend
    on token or head order.
    """
    flat = np.asarray(keys, dtype=np.float64).reshape(-1, keys.shape[-1])
    if flat.shape[0] == 0:
        return np.zeros(keys.shape[-1])
    return np.sort(flat, axis=0).sum(axis=0) / flat.shape[0]


def compute_prototype(
    block: FrameBlock, layer: int, config: StreamConfig | None = None
) -> Prototype:
    if not 0 <= layer < len(block.keys):
        raise StructuralError(f"layer {layer} out of range for block with {len(block.keys)} layers")
    if config is not None:
        block.validate(config)
    return Prototype.from_vector(mean_key(block.keys[layer]))


def cosine_distance(a: Prototype, b: Prototype) -> float:
    if a.dim != b.dim:
        raise StructuralError(f"prototype dims differ: {a.dim} vs {b.dim}")
    if a.degenerate or b.degenerate:
        return DEGENERATE_DISTANCE
    d = 1.0 - float(np.dot(a.unit, b.unit))
    return min(max(d, 0.0), 2.0)


def stack_units(protos: Sequence[Prototype]) -> tuple[np.ndarray, np.ndarray]:
    """Stack unit vectors and degenerate flags into arrays for batch math."""
    if not protos:
        raise StructuralError("cannot stack an empty prototype list")
    dims = {p.dim for p in protos}
    if len(dims) != 1:
        raise StructuralError(f"prototype dims differ: {sorted(dims)}")
    units = np.stack([p.unit for p in protos])
    degenerate = np.array([p.degenerate for p in protos], dtype=bool)
    return units, degenerate


def distance_matrix(
    a_units: np.ndarray,
    a_degenerate: np.ndarray,
    b_units: np.ndarray,
    b_degenerate: np.ndarray,
) -> np.ndarray:
    """Pairwise cosine distances with the degenerate convention applied."""
    if a_units.shape[1] != b_units.shape[1]:
        raise StructuralError(f"dims differ: {a_units.shape[1]} vs {b_units.shape[1]}")
    d = 1.0 - a_units @ b_units.T
    np.clip(d, 0.0, 2.0, out=d)
    d[a_degenerate, :] = DEGENERATE_DISTANCE
    d[:, b_degenerate] = DEGENERATE_DISTANCE
    return d


def unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize ``x`` in float64; zero rows stay zero and are flagged."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < DEGENERATE_NORM
    safe = np.where(norms < DEGENERATE_NORM, 1.0, norms)
    units = np.where(norms < DEGENERATE_NORM, 0.0, x / safe)
    return units, degenerate
