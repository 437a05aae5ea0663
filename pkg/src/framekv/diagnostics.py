"""Retention diagnostics: support thinning, key contrast, attention probe, heatmaps.

The support proxy is spatial grid coverage of retained token positions. The
dominant set for the contrast statistic is the set of retained keys whose
cosine to the current frame's prototype exceeds a percentile of all retained
cosines (90th by default). Both are interpretive choices and are recorded in
every metrics file header.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError
from .manager import LoadedCache, MemoryManager, Policy
from .memory_core import FrameBlock, Prototype, mean_key, unit_rows
from .policies import RetentionMask

DEFAULT_GRID = 8
DEFAULT_PERCENTILE = 90.0
DEFAULT_PROBE_SIGMA = 0.1


def support_proxy(positions: np.ndarray | None, grid_size: int = DEFAULT_GRID) -> float:
    """Fraction of ``grid_size x grid_size`` cells holding at least one position."""
    if grid_size < 1:
        raise ConfigError(f"grid_size must be >= 1, got {grid_size}")
    if positions is None:
        return 0.0
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    pos = pos[~np.isnan(pos).any(axis=1)]
    if not len(pos):
        return 0.0
    cells = np.clip(np.floor(pos * grid_size).astype(np.int64), 0, grid_size - 1)
    occupied = np.unique(cells[:, 0] * grid_size + cells[:, 1])
    return len(occupied) / grid_size**2


@dataclass
class SupportReport:
    frame_ids: np.ndarray
    b: np.ndarray
    c: np.ndarray  # compression ratio 1 - b/N
    support_before: np.ndarray
    support_after: np.ndarray
    damage: np.ndarray
    rho: np.ndarray


def support_ratio(before: float, after: float) -> float:
    return 1.0 if before == 0 else after / before


def support_report(
    mask: RetentionMask, positions: dict[int, np.ndarray], grid_size: int = DEFAULT_GRID
) -> SupportReport:
    """Per-frame support metrics for every frame in ``positions``."""
    ids = np.array(sorted(positions), dtype=np.int64)
    b = np.array([mask.b(f) for f in ids], dtype=np.int64)
    before = np.array([support_proxy(positions[f], grid_size) for f in ids])
    after = np.array(
        [
            support_proxy(positions[f][mask.indicators(f)], grid_size) if mask.b(f) else 0.0
            for f in ids
        ]
    )
    rho = np.array([support_ratio(s0, s1) for s0, s1 in zip(before, after)])
    return SupportReport(
        frame_ids=ids,
        b=b,
        c=1.0 - b / mask.tokens_per_frame,
        support_before=before,
        support_after=after,
        damage=before - after,
        rho=rho,
    )


@dataclass
class ContrastReport:
    step: int
    dominant: np.ndarray  # boolean mask over retained keys (R_k)
    center: np.ndarray  # mu_R
    delta: float
    percentile: float = DEFAULT_PERCENTILE

    @property
    def remainder(self) -> np.ndarray:
        return ~self.dominant


def contrast_statistic(keys: np.ndarray, dominant) -> tuple[np.ndarray, float] | None:
    """Mean cosine of R to its own center minus that of the remainder.

    ``keys`` are normalized here; returns ``None`` when either side is empty.
    """
    units, _ = unit_rows(keys)
    dominant = np.asarray(dominant)
    if dominant.dtype == bool:
        mask = dominant.copy()
    else:
        mask = np.zeros(len(units), dtype=bool)
        mask[dominant.astype(np.int64)] = True
    if not mask.any() or mask.all():
        return None
    mu = units[mask].mean(axis=0)
    norm = np.linalg.norm(mu)
    if norm < 1e-12:
        return None
    mu /= norm
    cos = units @ mu
    return mu, float(cos[mask].mean() - cos[~mask].mean())


def dominant_set(keys: np.ndarray, anchor: np.ndarray, percentile: float = DEFAULT_PERCENTILE) -> np.ndarray:
    """Keys whose cosine to ``anchor`` strictly exceeds the given percentile."""
    units, _ = unit_rows(keys)
    cos = units @ anchor
    return cos > np.percentile(cos, percentile)


def attention_probe(query: np.ndarray, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``<q, k_hat>/sqrt(D)`` over unit keys and their softmax."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if not len(keys):
        raise StructuralError("attention probe needs at least one key")
    units, _ = unit_rows(keys)
    z = units @ np.asarray(query, dtype=np.float64) / math.sqrt(keys.shape[1])
    e = np.exp(z - z.max())
    return z, e / e.sum()


def probe_queries(block: FrameBlock, layer: int, rng: np.random.Generator, sigma: float = DEFAULT_PROBE_SIGMA) -> np.ndarray:
    """Per-head mean key of ``block`` plus Gaussian jitter: [H, D]."""
    k = np.asarray(block.keys[layer], dtype=np.float64)
    return k.mean(axis=1) + sigma * rng.standard_normal((k.shape[0], k.shape[2]))


def loaded_token_keys(loaded: LoadedCache, layer: int, head: int | None = None) -> np.ndarray:
    """[n, D] token keys in cache order, head-averaged unless ``head`` is given."""
    keys = loaded.keys(layer)
    if head is None:
        return np.asarray(keys, dtype=np.float64).mean(axis=0)
    if not 0 <= head < keys.shape[0]:
        raise StructuralError(f"head {head} out of range")
    return np.asarray(keys[head], dtype=np.float64)


def heatmap_matrix(manager: MemoryManager, layer: int, head: int = 0) -> np.ndarray:
    cfg = manager.config
    if not 0 <= layer < cfg.num_layers:
        raise StructuralError(f"layer {layer} out of range")
    if not 0 <= head < cfg.heads_per_layer[layer]:
        raise StructuralError(f"head {head} out of range for layer {layer}")
    if manager.current is None:
        return np.zeros((0, cfg.key_dim[layer]), dtype=np.float32)
    loaded = manager.last_loaded or manager.loaded()
    if not loaded.layers[layer]:
        return np.zeros((0, cfg.key_dim[layer]), dtype=np.float32)
    return loaded.keys(layer)[head]


def heatmap_export(manager: MemoryManager, layer: int, head: int, path, policy: str | None = None, extra: dict | None = None) -> np.ndarray:
    """Write retained keys (rows, cache order) x key dims for one head as CSV."""
    matrix = heatmap_matrix(manager, layer, head)
    header = {
        "step": manager.t - 1,
        "layer": layer,
        "head": head,
        "policy": policy or manager.policy.policy.value,
        "rows": int(matrix.shape[0]),
        "cols": int(matrix.shape[1]),
        **(extra or {}),
    }
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        writer = csv.writer(f)
        for row in matrix:
            writer.writerow([repr(float(x)) for x in row])
    return matrix


def read_heatmap(path) -> tuple[dict, np.ndarray]:
    with open(path) as f:
        header = json.loads(f.readline()[2:])
        rows = [[float(x) for x in r] for r in csv.reader(f) if r]
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), header["cols"])


METRIC_COLUMNS = [
    "t", "policy", "layer", "b_t", "c_t", "S*", "S", "D", "rho",
    "delta_k", "coverage_radius", "bytes", "retained", "attn_peak",
]


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return format(float(x), ".10g")


class _GrowingMatrix:
    def __init__(self, dim: int):
        self.data = np.zeros((64, dim))
        self.degenerate = np.zeros(64, dtype=bool)
        self.n = 0

    def append(self, proto: Prototype) -> None:
        if self.n == len(self.data):
            self.data = np.concatenate([self.data, np.zeros_like(self.data)])
            self.degenerate = np.concatenate([self.degenerate, np.zeros_like(self.degenerate)])
        self.data[self.n] = proto.unit
        self.degenerate[self.n] = proto.degenerate
        self.n += 1

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self.data[: self.n], self.degenerate[: self.n]


def coverage_radius_against(history: tuple[np.ndarray, np.ndarray], centers: list[Prototype]) -> float:
    hu, hd = history
    if not len(hu):
        return 0.0
    cu = np.stack([c.unit for c in centers])
    cd = np.array([c.degenerate for c in centers])
    d = 1.0 - hu @ cu.T
    np.clip(d, 0.0, 2.0, out=d)
    d[hd, :] = 1.0
    d[:, cd] = 1.0
    return float(d.min(axis=1).max())


class MetricsCollector:
    """Per-step, per-layer metrics rows over a manager's post-step snapshots."""

    def __init__(
        self,
        manager: MemoryManager,
        policy_label: str | None = None,
        grid_size: int = DEFAULT_GRID,
        percentile: float = DEFAULT_PERCENTILE,
        probe_sigma: float = DEFAULT_PROBE_SIGMA,
        seed: int = 0,
        every: int = 1,
        start: int = 0,
    ):
        if grid_size < 1:
            raise ConfigError(f"grid_size must be >= 1, got {grid_size}")
        self.manager = manager
        self.policy_label = policy_label or manager.policy.policy.value
        self.grid_size = grid_size
        self.percentile = percentile
        self.probe_sigma = probe_sigma
        self.seed = seed
        self.every = max(1, every)
        self.start = start
        cfg = manager.config
        self.history = [_GrowingMatrix(cfg.key_dim[l]) for l in range(cfg.num_layers)]
        self.support_before: list[float] = []
        self.rows: list[dict] = []
        self.contrast: list[list[ContrastReport | None]] = [[] for _ in range(cfg.num_layers)]

    def metadata(self) -> dict:
        return {
            "support_proxy": f"grid-coverage {self.grid_size}x{self.grid_size}",
            "dominant_set": f"cos to current prototype > p{self.percentile:g} of retained cosines",
            "probe": f"per-head mean key + N(0, {self.probe_sigma:g}^2)",
            "key_reduction": "head-mean",
        }

    def observe(self, block: FrameBlock, loaded: LoadedCache) -> list[dict]:
        cfg = self.manager.config
        t = block.frame_id
        for layer in range(cfg.num_layers):
            self.history[layer].append(block.prototype(layer))
        self.support_before.append(support_proxy(block.meta.token_positions, self.grid_size))
        if t < self.start or (t - self.start) % self.every:
            return []
        nbytes = self.manager.memory_bytes().per_layer
        rows = [self._row(block, loaded, layer, nbytes[layer]) for layer in range(cfg.num_layers)]
        self.rows.extend(rows)
        return rows

    def _row(self, block: FrameBlock, loaded: LoadedCache, layer: int, nbytes: int) -> dict:
        n = self.manager.config.tokens_per_frame
        t = block.frame_id
        frames_seen = t + 1
        segs = loaded.layers[layer]
        retained = sum(s.size for s in segs)

        before = self.support_before
        after_sum = 0.0
        rho_sum = 0.0
        loaded_ids = set()
        for s in segs:
            loaded_ids.add(s.frame_id)
            s_after = support_proxy(s.positions, self.grid_size)
            after_sum += s_after
            rho_sum += support_ratio(before[s.frame_id], s_after)
        # frames with no support to lose count as fully preserved
        rho_sum += sum(1 for f, s0 in enumerate(before) if s0 == 0 and f not in loaded_ids)
        before_mean = float(np.mean(before))
        after_mean = after_sum / frames_seen

        keys = loaded_token_keys(loaded, layer)
        delta = float("nan")
        report = None
        proto = block.prototype(layer)
        if len(keys) and not proto.degenerate:
            dom = dominant_set(keys, proto.unit, self.percentile)
            res = contrast_statistic(keys, dom)
            if res is not None:
                report = ContrastReport(t, dom, res[0], res[1], self.percentile)
                delta = res[1]
        self.contrast[layer].append(report)

        if self.manager.policy.policy is Policy.FULL_CACHE:
            radius = 0.0
        else:
            centers = [s.prototype or Prototype.from_vector(mean_key(s.keys)) for s in segs]
            radius = coverage_radius_against(self.history[layer].view(), centers)

        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 5, t, layer])))
        queries = probe_queries(block, layer, rng, self.probe_sigma)
        all_keys = loaded.keys(layer)
        peaks = [attention_probe(queries[h], all_keys[h])[1].max() for h in range(len(queries))]

        return {
            "t": t,
            "policy": self.policy_label,
            "layer": layer,
            "b_t": retained / frames_seen,
            "c_t": 1.0 - retained / (frames_seen * n),
            "S*": before_mean,
            "S": after_mean,
            "D": before_mean - after_mean,
            "rho": rho_sum / frames_seen,
            "delta_k": delta,
            "coverage_radius": radius,
            "bytes": nbytes,
            "retained": retained,
            "attn_peak": float(np.mean(peaks)),
        }


def format_metrics_csv(rows: list[dict], header: dict | None = None) -> str:
    buf = io.StringIO()
    if header is not None:
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(path) -> tuple[dict | None, list[dict]]:
    with open(path) as f:
        first = f.readline()
        header = json.loads(first[2:]) if first.startswith("# ") else None
        if header is None:
            f.seek(0)
        rows = list(csv.DictReader(f))
    return header, rows


def retention_within_budget(b_counts, budget: int) -> bool:
    """(1/T) sum b_t <= M/T, checked as sum b_t <= M in integers."""
    return int(sum(int(b) for b in b_counts)) <= int(budget)
