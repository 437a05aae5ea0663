"""Deterministic synthetic frame streams.

Frames are generated as a pure function of ``(spec, t)`` so they can be
produced in any order or in parallel and still replay exactly.

Draw order
----------
Every random draw comes from a Philox generator keyed by a
:class:`numpy.random.SeedSequence` built from the stream seed and a purpose tag:

* cluster geometry, per ``(cluster, layer)``: ``[seed, 1, cluster, layer]``;
  draws the center ``[D]`` and then the drift direction ``[D]``.
* shared key offset per layer: ``[seed, 2, layer]``; one ``[D]`` draw.
* keys and values per ``(frame, layer)``: ``[seed, 3, t, layer]``; draws the
  frame jitter ``[D]``, the token noise ``[H, N, D]`` and the values
  ``[H, N, D]``, in that order.
* frame metadata per frame: ``[seed, 4, t]``; draws confidence jitter,
  sharpness jitter, pose jitter ``[7]`` and, for random layouts, token
  positions ``[N, 2]``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import BinaryIO, Iterator

import numpy as np

from .errors import ConfigError, ContainerError
from .memory_core import FrameBlock, FrameMeta, StreamConfig

TAG_CLUSTER, TAG_OFFSET, TAG_KV, TAG_META = 1, 2, 3, 4


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class ClusterSpec:
    dwell: int  # frames spent per visit
    spread: float = 0.0  # per-frame angular jitter of the frame direction
    yaw: float = 0.0  # pose heading of this place (radians)
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class DegradedInterval:
    start: int
    stop: int
    confidence: float
    sharpness: float


@dataclass
class StreamSpec:
    name: str
    seed: int
    frames: int
    config: StreamConfig
    clusters: list[ClusterSpec]
    visits: list[int] | None = None  # cluster visiting order, cycled; default 0..C-1
    drift_rate: float = 0.0  # radians per frame along each visit
    noise_sigma: float = 0.0  # isotropic per-token key noise
    key_offset: float = 0.0  # magnitude of a shared per-layer key offset
    key_scale: float = 1.0
    confidence: float = 0.9
    sharpness: float = 0.9
    quality_jitter: float = 0.05
    degraded: list[DegradedInterval] = field(default_factory=list)
    pose: str = "cluster"  # cluster | orbit | none
    pose_jitter: float = 0.01
    layout: str = "grid"  # grid | random
    degenerate_frames: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.clusters:
            raise ConfigError("stream spec needs at least one cluster")
        if self.frames < 0:
            raise ConfigError("frames must be non-negative")
        if any(c.dwell < 1 for c in self.clusters):
            raise ConfigError("cluster dwell must be >= 1")
        visits = self.visits if self.visits is not None else list(range(len(self.clusters)))
        if not visits or any(not 0 <= v < len(self.clusters) for v in visits):
            raise ConfigError(f"invalid visit order {visits}")
        self.visits = list(visits)
        if self.pose not in ("cluster", "orbit", "none"):
            raise ConfigError(f"unknown pose trajectory {self.pose!r}")
        if self.layout not in ("grid", "random"):
            raise ConfigError(f"unknown position layout {self.layout!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StreamSpec":
        d = dict(d)
        d["config"] = StreamConfig.from_dict(d["config"])
        d["clusters"] = [
            ClusterSpec(**{**c, "position": tuple(c.get("position", (0.0, 0.0, 0.0)))})
            for c in d["clusters"]
        ]
        d["degraded"] = [DegradedInterval(**x) for x in d.get("degraded", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "StreamSpec":
        return cls.from_dict(json.loads(text))

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_frames(self, frames: int) -> "StreamSpec":
        return replace(self, frames=frames)


class StreamGeometry:
    """Cached cluster centers, drift directions and shared offsets for one spec."""

    def __init__(self, spec: StreamSpec):
        self.spec = spec
        cfg = spec.config
        self.centers: list[list[np.ndarray]] = []
        self.drift_dirs: list[list[np.ndarray]] = []
        for c in range(len(spec.clusters)):
            centers, dirs = [], []
            for layer in range(cfg.num_layers):
                rng = _rng(spec.seed, TAG_CLUSTER, c, layer)
                d = cfg.key_dim[layer]
                center = rng.standard_normal(d)
                center /= np.linalg.norm(center)
                u = rng.standard_normal(d)
                u -= (u @ center) * center
                norm = np.linalg.norm(u)
                u = u / norm if norm > 1e-12 else np.zeros(d)
                centers.append(center)
                dirs.append(u)
            self.centers.append(centers)
            self.drift_dirs.append(dirs)
        self.offsets = []
        for layer in range(cfg.num_layers):
            v = _rng(spec.seed, TAG_OFFSET, layer).standard_normal(cfg.key_dim[layer])
            self.offsets.append(spec.key_offset * v / np.linalg.norm(v))
        self.cycle = [(v, spec.clusters[v].dwell) for v in spec.visits]
        self.cycle_len = sum(d for _, d in self.cycle)

    def locate(self, t: int) -> tuple[int, int]:
        """(cluster, frames elapsed inside the current visit) for frame ``t``."""
        r = t % self.cycle_len
        for cluster, dwell in self.cycle:
            if r < dwell:
                return cluster, r
            r -= dwell
        raise AssertionError("unreachable")

    def direction(self, cluster: int, layer: int, elapsed: int) -> np.ndarray:
        theta = self.spec.drift_rate * elapsed
        c = self.centers[cluster][layer]
        return math.cos(theta) * c + math.sin(theta) * self.drift_dirs[cluster][layer]


def grid_positions(n: int) -> np.ndarray:
    w = math.ceil(math.sqrt(n))
    h = math.ceil(n / w)
    i = np.arange(n)
    return np.stack([((i % w) + 0.5) / w, ((i // w) + 0.5) / h], axis=1)


def _quaternion_yaw(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])


def _pose(spec: StreamSpec, geom: StreamGeometry, t: int, cluster: int, elapsed: int, jitter) -> np.ndarray | None:
    if spec.pose == "none":
        return None
    if spec.pose == "cluster":
        cs = spec.clusters[cluster]
        yaw = cs.yaw + spec.drift_rate * elapsed
        trans = np.asarray(cs.position, dtype=np.float64)
    else:
        # slow orbit: heading and position depend only on t
        yaw = 0.05 * t
        trans = np.array([math.cos(0.01 * t), math.sin(0.01 * t), 0.001 * t])
    q = _quaternion_yaw(yaw) + spec.pose_jitter * jitter[:4]
    q /= np.linalg.norm(q)
    return np.concatenate([q, trans + spec.pose_jitter * jitter[4:]])


def generate_frame(spec: StreamSpec, t: int, geom: StreamGeometry | None = None) -> FrameBlock:
    geom = geom or StreamGeometry(spec)
    cfg = spec.config
    n = cfg.tokens_per_frame
    cluster, elapsed = geom.locate(t)

    mrng = _rng(spec.seed, TAG_META, t)
    q_jit, s_jit = mrng.uniform(-1.0, 1.0, size=2)
    pose_jit = mrng.standard_normal(7)
    positions = mrng.uniform(0.0, 1.0, size=(n, 2)) if spec.layout == "random" else grid_positions(n)
    q = spec.confidence + spec.quality_jitter * q_jit
    s = spec.sharpness + spec.quality_jitter * s_jit
    for iv in spec.degraded:
        if iv.start <= t < iv.stop:
            q, s = iv.confidence, iv.sharpness
    meta = FrameMeta(
        frame_id=t,
        confidence=float(np.clip(q, 0.0, 1.0)),
        sharpness=float(np.clip(s, 0.0, 1.0)),
        pose_signature=_pose(spec, geom, t, cluster, elapsed, pose_jit),
        token_positions=positions,
        cluster=cluster,
    )

    keys, values = [], []
    degenerate = t in spec.degenerate_frames
    for layer in range(cfg.num_layers):
        h, d = cfg.heads_per_layer[layer], cfg.key_dim[layer]
        rng = _rng(spec.seed, TAG_KV, t, layer)
        jitter = rng.standard_normal(d)
        noise = rng.standard_normal((h, n, d))
        vals = rng.standard_normal((h, n, d))
        direction = geom.direction(cluster, layer, elapsed)
        spread = spec.clusters[cluster].spread
        if spread > 0:
            direction = direction + spread * jitter / math.sqrt(d)
            direction /= np.linalg.norm(direction)
        k = spec.key_scale * (direction + geom.offsets[layer] + spec.noise_sigma * noise)
        if degenerate:
            # antisymmetric token pairs: the frame mean cancels exactly
            k = np.concatenate([k[:, : n // 2], -k[:, : n // 2], np.zeros((h, n % 2, d))], axis=1)
        keys.append(k.astype(np.float32))
        values.append(vals.astype(np.float32))
    return FrameBlock(meta=meta, keys=tuple(keys), values=tuple(values))


def generate(spec: StreamSpec) -> Iterator[FrameBlock]:
    geom = StreamGeometry(spec)
    for t in range(spec.frames):
        yield generate_frame(spec, t, geom)


# ---------------------------------------------------------------- scenarios


def default_config(**overrides) -> StreamConfig:
    base = dict(num_layers=2, heads_per_layer=2, tokens_per_frame=16, key_dim=32, bytes_per_element=2)
    base.update(overrides)
    return StreamConfig(**base)


def _rooms(k: int, dwell: int, spread: float) -> list[ClusterSpec]:
    return [
        ClusterSpec(
            dwell=dwell,
            spread=spread,
            yaw=2 * math.pi * i / k,
            position=(3.0 * math.cos(2 * math.pi * i / k), 3.0 * math.sin(2 * math.pi * i / k), 0.0),
        )
        for i in range(k)
    ]


def _slow_pan(seed: int) -> StreamSpec:
    return StreamSpec(
        name="slow-pan",
        seed=seed,
        frames=600,
        config=default_config(),
        clusters=[ClusterSpec(dwell=600, spread=0.02)],
        drift_rate=0.004,
        noise_sigma=0.3,
    )


def _multi_room(seed: int) -> StreamSpec:
    return StreamSpec(
        name="multi-room",
        seed=seed,
        frames=480,
        config=default_config(),
        # more rooms than the bank can spare once recent frames take their share
        clusters=_rooms(12, 40, 0.05),
        drift_rate=0.002,
        noise_sigma=0.3,
    )


def _revisit(seed: int) -> StreamSpec:
    return StreamSpec(
        name="revisit",
        seed=seed,
        frames=450,
        config=default_config(),
        clusters=_rooms(3, 150, 0.03)[:2],
        visits=[0, 1, 0],
        drift_rate=0.008,
        noise_sigma=0.3,
    )


def _degraded(seed: int) -> StreamSpec:
    return StreamSpec(
        name="degraded-interval",
        seed=seed,
        frames=400,
        config=default_config(),
        clusters=_rooms(4, 100, 0.05),
        drift_rate=0.005,
        noise_sigma=0.3,
        degraded=[DegradedInterval(start=150, stop=250, confidence=0.3, sharpness=0.2)],
    )


def _long_horizon(seed: int) -> StreamSpec:
    return StreamSpec(
        name="long-horizon",
        seed=seed,
        frames=5000,
        config=default_config(num_layers=1),
        clusters=_rooms(12, 100, 0.05),
        drift_rate=0.004,
        noise_sigma=0.3,
    )


def _uniform_spread(seed: int) -> StreamSpec:
    # near-isotropic tokens so token-level retention spreads over all frames
    return StreamSpec(
        name="uniform-spread",
        seed=seed,
        frames=500,
        config=default_config(num_layers=1, heads_per_layer=1, key_dim=16),
        clusters=[ClusterSpec(dwell=500)],
        noise_sigma=3.0,
        layout="random",
    )


SCENARIOS = {
    "slow-pan": _slow_pan,
    "multi-room": _multi_room,
    "revisit": _revisit,
    "degraded-interval": _degraded,
    "long-horizon": _long_horizon,
    "uniform-spread": _uniform_spread,
}


def scenario_library(seed: int = 0) -> dict[str, StreamSpec]:
    return {name: make(seed) for name, make in SCENARIOS.items()}


def scenario(name: str, seed: int = 0) -> StreamSpec:
    try:
        return SCENARIOS[name](seed)
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


# ---------------------------------------------------------- recorded streams

STREAM_MAGIC = b"FKVSTRM\0"
STREAM_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def meta_record(meta: FrameMeta) -> dict:
    return {
        "frame_id": meta.frame_id,
        "confidence": meta.confidence,
        "sharpness": meta.sharpness,
        "pose_signature": None if meta.pose_signature is None else meta.pose_signature.tolist(),
        "token_positions": None if meta.token_positions is None else meta.token_positions.tolist(),
        "cluster": meta.cluster,
    }


def meta_from_record(rec: dict) -> FrameMeta:
    return FrameMeta(
        frame_id=rec["frame_id"],
        confidence=rec["confidence"],
        sharpness=rec["sharpness"],
        pose_signature=None if rec["pose_signature"] is None else np.array(rec["pose_signature"]),
        token_positions=None if rec["token_positions"] is None else np.array(rec["token_positions"]),
        cluster=rec.get("cluster", -1),
    )


def write_stream(f: BinaryIO, config: StreamConfig, blocks, spec_hash: str = "", frames: int | None = None) -> int:
    """Write blocks as a recorded stream; returns the number of frames written."""
    blocks = list(blocks)
    manifest = {
        "version": STREAM_VERSION,
        "config": config.to_dict(),
        "frames": len(blocks) if frames is None else frames,
        "spec_hash": spec_hash,
        "dtype": "<f4",
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    f.write(STREAM_MAGIC + _U32.pack(STREAM_VERSION) + _U64.pack(len(head)) + head)
    for block in blocks:
        block.validate(config)
        rec = json.dumps(meta_record(block.meta), sort_keys=True).encode()
        f.write(_U64.pack(len(rec)) + rec)
        for k, v in zip(block.keys, block.values):
            f.write(np.ascontiguousarray(k, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return len(blocks)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(data)}")
    return data


def read_stream(f: BinaryIO) -> tuple[dict, Iterator[FrameBlock]]:
    if _read_exact(f, len(STREAM_MAGIC)) != STREAM_MAGIC:
        raise ContainerError("not a recorded stream (bad magic)")
    (version,) = _U32.unpack(_read_exact(f, 4))
    if version > STREAM_VERSION:
        raise ContainerError(f"stream version {version} is newer than supported {STREAM_VERSION}")
    (hlen,) = _U64.unpack(_read_exact(f, 8))
    manifest = json.loads(_read_exact(f, hlen))
    config = StreamConfig.from_dict(manifest["config"])

    def frames() -> Iterator[FrameBlock]:
        for _ in range(manifest["frames"]):
            (mlen,) = _U64.unpack(_read_exact(f, 8))
            meta = meta_from_record(json.loads(_read_exact(f, mlen)))
            keys, values = [], []
            for layer in range(config.num_layers):
                shape = config.block_shape(layer)
                size = int(np.prod(shape)) * 4
                keys.append(np.frombuffer(_read_exact(f, size), dtype="<f4").reshape(shape).astype(np.float32))
                values.append(np.frombuffer(_read_exact(f, size), dtype="<f4").reshape(shape).astype(np.float32))
            yield FrameBlock(meta=meta, keys=tuple(keys), values=tuple(values))

    return manifest, frames()


def record_spec(spec: StreamSpec, path) -> None:
    with open(path, "wb") as f:
        write_stream(f, spec.config, generate(spec), spec_hash=spec.spec_hash())


def stream_bytes(spec: StreamSpec) -> bytes:
    buf = io.BytesIO()
    write_stream(buf, spec.config, generate(spec), spec_hash=spec.spec_hash())
    return buf.getvalue()
