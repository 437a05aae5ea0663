import math

import numpy as np
import pytest

from framekv.diagnostics import (
    METRIC_COLUMNS,
    attention_probe,
    contrast_statistic,
    dominant_set,
    format_metrics_csv,
    heatmap_export,
    retention_within_budget,
    read_heatmap,
    read_metrics_csv,
    support_proxy,
    support_report,
)
from framekv.errors import ConfigError, StructuralError
from framekv.manager import MemoryManager, PolicyConfig
from framekv.policies import RetentionMask
from framekv.runner import run_stream
from framekv.stream_sim import generate


def test_support_proxy_grid_counts():
    pos = np.array([[0.1, 0.1], [0.2, 0.2], [0.9, 0.1], [1.0, 1.0]])
    # cells (0,0), (0,0), (1,0), (1,1) -> 3 of 4
    assert support_proxy(pos, 2) == 0.75
    assert support_proxy(None, 2) == 0.0
    assert support_proxy(np.full((2, 2), np.nan), 2) == 0.0
    with pytest.raises(ConfigError):
        support_proxy(pos, 0)


def test_support_report_by_hand():
    pos = {0: np.array([[0.1, 0.1], [0.9, 0.9]]), 1: np.array([[0.1, 0.9], [0.2, 0.8]])}
    mask = RetentionMask(2, 2, {0: np.array([1])})
    rep = support_report(mask, pos, grid_size=2)
    assert rep.b.tolist() == [1, 0]
    assert rep.c.tolist() == [0.5, 1.0]
    np.testing.assert_allclose(rep.support_before, [0.5, 0.25])
    np.testing.assert_allclose(rep.support_after, [0.25, 0.0])
    np.testing.assert_allclose(rep.rho, [0.5, 0.0])
    np.testing.assert_allclose(rep.damage, [0.25, 0.25])


def test_contrast_statistic_by_hand():
    keys = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-1.0, 0.0]])
    mu, delta = contrast_statistic(keys, [0, 1])
    m = np.array([1.6, 0.8]) / np.linalg.norm([1.6, 0.8])
    np.testing.assert_allclose(mu, m)
    cos = keys @ m
    assert delta == pytest.approx(cos[:2].mean() - cos[2:].mean())
    assert delta == pytest.approx((2 / math.sqrt(5)) - (1 / math.sqrt(5) - 2 / math.sqrt(5)) / 2)


def test_contrast_statistic_needs_both_sides():
    keys = np.eye(3)
    assert contrast_statistic(keys, []) is None
    assert contrast_statistic(keys, [0, 1, 2]) is None


def test_dominant_set_strictly_above_percentile():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7], [-1.0, 0.0]])
    dom = dominant_set(keys, np.array([1.0, 0.0]), percentile=50)
    # cosines 1, 0, 0.707, -1 -> median 0.354
    assert dom.tolist() == [True, False, True, False]


def test_attention_probe_by_hand():
    z, a = attention_probe(np.array([1.0, 0.0]), np.array([[2.0, 0.0], [0.0, 3.0]]))
    np.testing.assert_allclose(z, [1 / math.sqrt(2), 0.0])
    e = np.exp([1 / math.sqrt(2), 0.0])
    np.testing.assert_allclose(a, e / e.sum())
    with pytest.raises(StructuralError):
        attention_probe(np.zeros(2), np.zeros((0, 2)))


def test_attention_probe_stable_for_large_logits():
    _, a = attention_probe(np.array([1e6, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.all(np.isfinite(a)) and a.sum() == pytest.approx(1.0)


def test_retention_within_budget_integer_check():
    assert retention_within_budget([4, 4, 0, 2], 10)
    assert not retention_within_budget([4, 4, 3], 10)


def test_heatmap_roundtrip(tiny_spec, tmp_path):
    manager = MemoryManager(tiny_spec.config, PolicyConfig(mid_capacity=3))
    for block in generate(tiny_spec.with_frames(10)):
        manager.step(block)
    path = tmp_path / "h.csv"
    matrix = heatmap_export(manager, 1, 1, path, extra={"config_hash": "abc"})
    header, back = read_heatmap(path)
    # the current frame is one of the three bank blocks
    assert header["rows"] == 3 * tiny_spec.config.tokens_per_frame
    assert header["config_hash"] == "abc" and header["step"] == 9
    np.testing.assert_array_equal(back, matrix.astype(np.float64))
    with pytest.raises(StructuralError):
        heatmap_export(manager, 0, 5, path)


def test_metrics_rows(tiny_spec, tmp_path):
    res = run_stream(tiny_spec, PolicyConfig(mid_capacity=3))
    rows = res.rows
    assert len(rows) == tiny_spec.frames * tiny_spec.config.num_layers
    n = tiny_spec.config.tokens_per_frame
    last = rows[-1]
    assert last["retained"] == 3 * n
    assert last["b_t"] == pytest.approx(3 * n / tiny_spec.frames)
    assert last["c_t"] == pytest.approx(1 - 3 / tiny_spec.frames)
    assert last["D"] == pytest.approx(last["S*"] - last["S"])
    assert 0 <= last["rho"] <= 1 and 0 < last["attn_peak"] <= 1
    text = format_metrics_csv(rows, {"k": 1})
    path = tmp_path / "m.csv"
    path.write_text(text)
    header, back = read_metrics_csv(path)
    assert header == {"k": 1}
    assert list(back[0]) == METRIC_COLUMNS and len(back) == len(rows)


def test_full_cache_has_zero_radius_and_no_damage(tiny_spec):
    rows = run_stream(tiny_spec, PolicyConfig(policy="full-cache")).rows
    assert all(r["coverage_radius"] == 0.0 for r in rows)
    assert all(r["D"] == pytest.approx(0.0) and r["rho"] == pytest.approx(1.0) for r in rows)
