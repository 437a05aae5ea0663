"""``framekv`` command-line front end.

Exit codes: 0 ok, 2 configuration error, 3 invariant violation, 4 I/O error.
Failures print a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .diagnostics import heatmap_export
from .errors import ConfigError, FrameKVError
from .manager import MemoryManager, Policy
from .memory_core import Prototype
from .mid_bank import select_k_center
from .oracle import exact_k_center
from .runner import DEFAULT_SWEEP, RunConfig, compare, execute_run, output_root, sweep
from .stream_sim import generate, scenario_library

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_IO = 4


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_stream_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", help="scenario name (see scenario-list)")
    src.add_argument("--spec", dest="spec_path", help="path to a stream spec JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, help="truncate or extend the stream to this many frames")


def _add_policy_args(p: argparse.ArgumentParser, mid: bool = True) -> None:
    p.add_argument("--policy", default=Policy.FRAME_KCENTER.value, choices=[x.value for x in Policy])
    if mid:
        p.add_argument("--mid", type=int, default=16, help="mid-term bank capacity B_M")
    p.add_argument("--anchors", type=int, default=0, help="anchor capacity B_A")
    p.add_argument("--gap", type=int, default=50, help="minimum frames between promotions")
    p.add_argument("--phi-min", type=float, default=0.3)
    p.add_argument("--nu-min", type=float, default=0.05)
    p.add_argument("--recent-k", type=int, default=0)
    p.add_argument("--token-budget", type=int, help="global token budget M (token-level only)")
    p.add_argument("--grid-size", type=int, default=8)


def _add_output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory (default: $FRAMEKV_OUTPUT_ROOT or ./runs)")
    p.add_argument("--metrics-every", type=int, default=1)


def _run_config(args) -> RunConfig:
    scenario = args.scenario
    if scenario is None and args.spec_path is None:
        scenario = "multi-room"
    return RunConfig(
        scenario=scenario,
        spec_path=args.spec_path,
        policy=args.policy,
        mid=getattr(args, "mid", 16),
        anchors=args.anchors,
        gap=args.gap,
        phi_min=args.phi_min,
        nu_min=args.nu_min,
        recent_k=args.recent_k,
        token_budget=args.token_budget,
        grid_size=args.grid_size,
        seed=args.seed,
        frames=args.frames,
        metrics_every=getattr(args, "metrics_every", 1),
        checkpoint_every=getattr(args, "checkpoint_every", 0),
        heatmap_every=getattr(args, "heatmap_every", 0),
        heatmap_layer=getattr(args, "heatmap_layer", 0),
        heatmap_head=getattr(args, "heatmap_head", 0),
    )


def _default_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return output_root(None) / name


def cmd_run(args) -> int:
    cfg = _run_config(args)
    out = _default_dir(args, f"run-{cfg.config_hash()[:12]}")
    manifest = execute_run(cfg, out)
    print(json.dumps({"out": str(out), "config_hash": manifest["config_hash"],
                      "trace_hash": manifest["trace_hash"], "frames": manifest["frames"]}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    mids = args.mids or list(DEFAULT_SWEEP)
    out = _default_dir(args, f"sweep-{replace(cfg, mid=mids[0]).config_hash()[:12]}")
    rows = sweep(cfg, mids, out, jobs=args.jobs)
    for r in rows:
        rec = {"mid": r["mid"], "final_bytes": r["final_bytes"]}
        if args.block_gb is not None and "slope" in r:
            # rescale so one mid-term block costs block_gb
            rec["predicted_gb"] = r["final_bytes"] * args.block_gb / r["slope"]
        print(json.dumps(rec))
    return EXIT_OK


def _parse_variant(text: str) -> tuple[str, dict]:
    label, _, body = text.partition("=")
    if not label or not body:
        raise ConfigError(f"variant must look like LABEL=key=value,...; got {text!r}")
    fields = {}
    for item in body.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"bad variant field {item!r}")
        fields[key.strip().replace("-", "_")] = value.strip()
    return label, fields


_VARIANT_TYPES = {
    "policy": str, "mid": int, "anchors": int, "gap": int, "phi_min": float, "nu_min": float,
    "recent_k": int, "token_budget": int, "grid_size": int,
}


def cmd_compare(args) -> int:
    base = _run_config(args)
    configs = {}
    for text in args.variant:
        label, fields = _parse_variant(text)
        kwargs = {}
        for key, value in fields.items():
            if key not in _VARIANT_TYPES:
                raise ConfigError(f"unknown variant field {key!r}")
            try:
                kwargs[key] = _VARIANT_TYPES[key](value)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {value!r}") from None
        if label in configs:
            raise ConfigError(f"duplicate variant label {label!r}")
        configs[label] = replace(base, **kwargs)
    if len(configs) < 2:
        raise ConfigError("compare needs at least two --variant entries")
    header, table = compare(configs)
    out = _default_dir(args, f"compare-{base.config_hash()[:12]}")
    out.mkdir(parents=True, exist_ok=True)
    meta = {label: {"config_hash": c.config_hash(), **c.to_dict()} for label, c in configs.items()}
    lines = ["# " + json.dumps(meta, sort_keys=True), ",".join(header)]
    lines += [",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) for row in table]
    (out / "compare.csv").write_text("\n".join(lines) + "\n")
    print(json.dumps({"out": str(out / "compare.csv"), "rows": len(table)}))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    if args.checkpoint:
        manager = load_checkpoint(args.checkpoint)
        label = manager.policy.policy.value
        extra = {"checkpoint": str(Path(args.checkpoint).resolve())}
    else:
        cfg = _run_config(args)
        spec = cfg.load_spec()
        manager = MemoryManager(spec.config, cfg.policy_config())
        stop = spec.frames - 1 if args.at is None else args.at
        if not 0 <= stop < spec.frames:
            raise ConfigError(f"--at must be in [0, {spec.frames}), got {stop}")
        for block in generate(spec):
            manager.step(block)
            if block.frame_id == stop:
                break
        label = cfg.policy
        extra = {"config_hash": cfg.config_hash(spec)}
    if manager.current is None:
        raise ConfigError("nothing to export: manager has not seen any frame")
    path = Path(args.output) if args.output else _default_dir(args, "heatmaps") / (
        f"heatmap_t{manager.current.frame_id:06d}_l{args.layer}_h{args.head}.csv"
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = heatmap_export(manager, args.layer, args.head, path, policy=label, extra=extra)
    print(json.dumps({"out": str(path), "shape": list(matrix.shape)}))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    """Greedy vs exhaustive k-center on random instances; debugging aid."""
    rng = np.random.default_rng(args.seed)
    worst, over, exact = 0.0, 0, 0
    for _ in range(args.instances):
        n = int(rng.integers(2, args.max_n + 1))
        k = int(rng.integers(1, min(args.max_k, n) + 1))
        d = int(rng.choice([4, 64]))
        pool = [(i, Prototype.from_vector(rng.standard_normal(d))) for i in range(n)]
        greedy = select_k_center(pool, k, seed_id=n - 1).radius
        opt = exact_k_center(pool, k, pinned=n - 1).objective
        ratio = greedy / opt if opt > 0 else (1.0 if greedy == 0 else float("inf"))
        worst = max(worst, ratio)
        over += ratio > 2.0
        exact += greedy == opt
    print(json.dumps({"instances": args.instances, "max_ratio": worst, "over_2x": over, "exact": exact}))
    return EXIT_OK


def cmd_scenario_list(args) -> int:
    lib = scenario_library(args.seed)
    for name, spec in lib.items():
        cfg = spec.config
        rec = {
            "name": name, "frames": spec.frames, "clusters": len(spec.clusters),
            "layers": cfg.num_layers, "tokens_per_frame": cfg.tokens_per_frame, "spec_hash": spec.spec_hash(),
        }
        print(json.dumps(rec) if args.json else f"{name:20s} frames={spec.frames:<6d} clusters={len(spec.clusters)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framekv", description="Bounded frame-block KV-cache memory simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", help="run one policy over a stream")
    _add_stream_args(p)
    _add_policy_args(p)
    _add_output_args(p)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--heatmap-every", type=int, default=0)
    p.add_argument("--heatmap-layer", type=int, default=0)
    p.add_argument("--heatmap-head", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a policy for several mid-term capacities")
    _add_stream_args(p)
    _add_policy_args(p, mid=False)
    _add_output_args(p)
    p.add_argument("--mid", dest="mids", type=_int_list, help="comma-separated capacities (default 12,16,20,24)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--block-gb", type=float, help="also report totals rescaled to this per-block size")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="aligned metrics for several variants on one stream")
    _add_stream_args(p)
    _add_policy_args(p)
    _add_output_args(p)
    p.add_argument("--variant", action="append", default=[], metavar="LABEL=key=value,...",
                   help="e.g. k2=policy=recent-k,recent_k=2 (repeatable)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("heatmap", help="export a key heatmap CSV")
    _add_stream_args(p)
    _add_policy_args(p)
    p.add_argument("--checkpoint", help="export from a saved checkpoint instead of running")
    p.add_argument("--at", type=int, help="stop after this frame (default: last)")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.add_argument("--output", help="exact output file path")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("oracle-check", help=argparse.SUPPRESS)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--max-n", type=int, default=12)
    p.add_argument("--max-k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("scenario-list", help="list built-in scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_scenario_list)

    # hide the debugging subcommand from the usage listing too
    sub._choices_actions = [a for a in sub._choices_actions if a.help != argparse.SUPPRESS]
    return parser


def _error_record(exc: BaseException, code: int) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FrameKVError as exc:
        print(_error_record(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(_error_record(exc, EXIT_IO), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
