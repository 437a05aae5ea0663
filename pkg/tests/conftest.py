import numpy as np
import pytest

from framekv.memory_core import FrameBlock, FrameMeta, StreamConfig
from framekv.stream_sim import ClusterSpec, StreamSpec

_CRITERIA: list[str] = []


def make_block(frame_id, keys, values=None, **meta):
    """Block from per-layer key arrays (each [H, N, D]); values default to zeros."""
    keys = tuple(np.asarray(k, dtype=np.float32) for k in keys)
    if values is None:
        values = tuple(np.zeros_like(k) for k in keys)
    return FrameBlock(FrameMeta(frame_id=frame_id, **meta), keys, values)


def vector_block(frame_id, vec, **meta):
    """Single-layer, single-head, single-token block whose prototype is ``vec``."""
    return make_block(frame_id, [np.asarray(vec, dtype=np.float64).reshape(1, 1, -1)], **meta)


def angle(deg):
    r = np.deg2rad(deg)
    return np.array([np.cos(r), np.sin(r)])


@pytest.fixture
def tiny_config():
    return StreamConfig(num_layers=2, heads_per_layer=2, tokens_per_frame=4, key_dim=8, bytes_per_element=2)


@pytest.fixture
def tiny_spec(tiny_config):
    return StreamSpec(
        name="tiny",
        seed=7,
        frames=60,
        config=tiny_config,
        clusters=[ClusterSpec(dwell=10, spread=0.05, yaw=0.5 * i, position=(float(i), 0.0, 0.0)) for i in range(4)],
        drift_rate=0.01,
        noise_sigma=0.3,
    )


@pytest.fixture
def criterion():
    """Record a one-line verdict for the acceptance summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
