"""Run policies over streams and write reproducible artifacts."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .diagnostics import MetricsCollector, format_metrics_csv, heatmap_export
from .errors import ConfigError
from .manager import MemoryManager, Policy, PolicyConfig
from .memory_core import FrameBlock
from .stream_sim import StreamSpec, generate, scenario
from .trace import RetentionTrace, write_header

logger = logging.getLogger(__name__)

OUTPUT_ENV = "FRAMEKV_OUTPUT_ROOT"
DEFAULT_SWEEP = (12, 16, 20, 24)


@dataclass
class RunConfig:
    scenario: str | None = "multi-room"
    spec_path: str | None = None
    policy: str = Policy.FRAME_KCENTER.value
    mid: int = 16
    anchors: int = 0
    gap: int = 50
    phi_min: float = 0.3
    nu_min: float = 0.05
    recent_k: int = 0
    token_budget: int | None = None
    grid_size: int = 8
    seed: int = 0
    frames: int | None = None
    metrics_every: int = 1
    checkpoint_every: int = 0
    heatmap_every: int = 0
    heatmap_layer: int = 0
    heatmap_head: int = 0

    def __post_init__(self):
        try:
            Policy(self.policy)
        except ValueError:
            raise ConfigError(f"unknown policy {self.policy!r}") from None
        if (self.scenario is None) == (self.spec_path is None):
            raise ConfigError("give exactly one of scenario or spec_path")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if self.metrics_every < 1:
            raise ConfigError("metrics_every must be >= 1")
        self.policy_config()

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            policy=Policy(self.policy),
            mid_capacity=self.mid,
            anchor_capacity=self.anchors,
            gap=self.gap,
            phi_min=self.phi_min,
            nu_min=self.nu_min,
            recent_k=self.recent_k,
            token_budget=self.token_budget,
        )

    def load_spec(self) -> StreamSpec:
        if self.spec_path is not None:
            spec = StreamSpec.from_json(Path(self.spec_path).read_text())
        else:
            spec = scenario(self.scenario, self.seed)
        if self.frames is not None:
            spec = spec.with_frames(self.frames)
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self, spec: StreamSpec | None = None) -> str:
        spec = spec or self.load_spec()
        payload = json.dumps({"run": self.to_dict(), "spec": spec.spec_hash()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class RunResult:
    manager: MemoryManager
    trace: RetentionTrace
    collector: MetricsCollector | None
    spec: StreamSpec
    bytes_history: list[int] = field(default_factory=list)

    @property
    def rows(self) -> list[dict]:
        return [] if self.collector is None else self.collector.rows

    @property
    def trace_hash(self) -> str:
        return self.trace.hexdigest()


def run_stream(
    spec: StreamSpec,
    policy: PolicyConfig,
    *,
    blocks: Iterable[FrameBlock] | None = None,
    collect: bool = True,
    metrics_every: int = 1,
    metrics_start: int = 0,
    grid_size: int = 8,
    seed: int = 0,
    trace: RetentionTrace | None = None,
    on_step: Callable[[MemoryManager, FrameBlock], None] | None = None,
) -> RunResult:
    trace = trace if trace is not None else RetentionTrace(keep=False)
    manager = MemoryManager(spec.config, policy, trace=trace)
    collector = (
        MetricsCollector(manager, grid_size=grid_size, seed=seed, every=metrics_every, start=metrics_start)
        if collect
        else None
    )
    bytes_history = []
    for block in blocks if blocks is not None else generate(spec):
        loaded = manager.step(block)
        if collector is not None:
            collector.observe(block, loaded)
        bytes_history.append(manager.memory_bytes().total)
        if on_step is not None:
            on_step(manager, block)
    return RunResult(manager, trace, collector, spec, bytes_history)


def output_root(out_dir: str | os.PathLike | None) -> Path:
    if out_dir is not None:
        return Path(out_dir)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def execute_run(cfg: RunConfig, out_dir) -> dict:
    """Run one configuration and write metrics, trace, manifest and optional extras."""
    spec = cfg.load_spec()
    chash = cfg.config_hash(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = cfg.policy
    files = {"metrics": "metrics.csv", "trace": "trace.jsonl", "manifest": "manifest.json"}

    def on_step(manager: MemoryManager, block: FrameBlock) -> None:
        t = block.frame_id
        if cfg.heatmap_every and t % cfg.heatmap_every == 0:
            hdir = out / "heatmaps"
            hdir.mkdir(exist_ok=True)
            heatmap_export(
                manager, cfg.heatmap_layer, cfg.heatmap_head,
                hdir / f"heatmap_t{t:06d}_l{cfg.heatmap_layer}_h{cfg.heatmap_head}.csv",
                policy=label, extra={"config_hash": chash},
            )
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            cdir = out / "checkpoints"
            cdir.mkdir(exist_ok=True)
            save_checkpoint(manager, cdir / f"ckpt_t{t:06d}.fkv", extra={"config_hash": chash})

    with open(out / files["trace"], "wb") as sink:
        write_header(sink, {"config_hash": chash, "policy": label})
        result = run_stream(
            spec, cfg.policy_config(), collect=True, metrics_every=cfg.metrics_every,
            grid_size=cfg.grid_size, seed=cfg.seed, trace=RetentionTrace(sink=sink, keep=False),
            on_step=on_step,
        )
    header = {"config_hash": chash, "policy": label, **result.collector.metadata()}
    (out / files["metrics"]).write_text(format_metrics_csv(result.rows, header))
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": chash,
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "version": __version__,
        "trace_hash": result.trace_hash,
        "trace_events": result.trace.count,
        "frames": result.manager.t,
        "final_bytes": result.manager.memory_bytes().total,
        "files": files,
    }
    (out / files["manifest"]).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def affine_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and max absolute residual."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.max(np.abs(y - (slope * x + intercept))))
    return float(slope), float(intercept), resid


def _sweep_one(args) -> dict:
    cfg, out = args
    return execute_run(cfg, out)


def sweep(cfg: RunConfig, mids: Iterable[int], out_dir, jobs: int = 1) -> list[dict]:
    out = Path(out_dir)
    tasks = [(replace(cfg, mid=m), out / f"mid_{m}") for m in mids]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            manifests = list(pool.map(_sweep_one, tasks))
    else:
        manifests = [_sweep_one(t) for t in tasks]
    rows = [
        {"mid": c.mid, "final_bytes": m["final_bytes"], "trace_hash": m["trace_hash"], "config_hash": m["config_hash"]}
        for (c, _), m in zip(tasks, manifests)
    ]
    if len(rows) >= 2:
        slope, intercept, resid = affine_fit([r["mid"] for r in rows], [r["final_bytes"] for r in rows])
        for r in rows:
            r.update(slope=slope, intercept=intercept, max_residual=resid)
    lines = ["mid,final_bytes,slope,intercept,max_residual,trace_hash,config_hash"]
    for r in rows:
        lines.append(
            f"{r['mid']},{r['final_bytes']},{r.get('slope', '')},{r.get('intercept', '')},"
            f"{r.get('max_residual', '')},{r['trace_hash']},{r['config_hash']}"
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return rows


COMPARE_FIELDS = ("coverage_radius", "delta_k", "S", "rho", "bytes")


def compare(configs: dict[str, RunConfig], **run_kwargs) -> tuple[list[str], list[list]]:
    """Aligned per-step table across labelled configurations on one shared stream."""
    specs = {label: cfg.load_spec() for label, cfg in configs.items()}
    hashes = {s.spec_hash() for s in specs.values()}
    if len(hashes) != 1:
        raise ConfigError("compare needs every configuration to use the same stream")
    results = {}
    for label, cfg in configs.items():
        res = run_stream(
            specs[label], cfg.policy_config(), grid_size=cfg.grid_size, seed=cfg.seed,
            metrics_every=cfg.metrics_every, **run_kwargs,
        )
        results[label] = {(r["t"], r["layer"]): r for r in res.rows}
    labels = list(configs)
    keys = sorted(set.intersection(*(set(r) for r in results.values())))
    header = ["t", "layer"] + [f"{label}:{f}" for label in labels for f in COMPARE_FIELDS]
    table = []
    for key in keys:
        table.append([*key, *(results[label][key][f] for label in labels for f in COMPARE_FIELDS)])
    return header, table
