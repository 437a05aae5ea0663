import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framekv import mid_bank
from framekv.errors import StructuralError
from framekv.memory_core import Prototype
from framekv.mid_bank import MidBank, coverage_radius, ingest_block, k_center_objective, select_k_center
from framekv.oracle import exact_k_center

from conftest import angle


def circle_pool(degrees):
    return [(i, Prototype.from_vector(angle(d))) for i, d in enumerate(degrees)]


def random_pool(rng, n, d):
    return [(i, Prototype.from_vector(rng.standard_normal(d))) for i in range(n)]


def test_circle_example_by_hand():
    # seed 180 deg; 0 deg is antipodal (d=2) so it goes next, then 90 deg (d=1 from both)
    pool = circle_pool([0, 5, 90, 180])
    sel = select_k_center(pool, 3, seed_id=3)
    assert sel.order == [3, 0, 2]
    assert sel.radius == pytest.approx(1 - math.cos(math.radians(5)))
    assert sel.coverage[1] == pytest.approx(1 - math.cos(math.radians(5)))


def test_ties_go_to_smallest_id():
    # ids 0 and 1 sit at +-90 deg from the seed: equal coverage scores after two picks
    pool = circle_pool([90, -90, 180, 0])
    sel = select_k_center(pool, 3, seed_id=3)
    assert sel.order == [3, 2, 0]


def test_seed_must_be_in_pool():
    with pytest.raises(StructuralError):
        select_k_center(circle_pool([0, 90]), 1, seed_id=7)


def test_duplicate_ids_rejected():
    p = Prototype.from_vector([1.0, 0.0])
    with pytest.raises(StructuralError):
        select_k_center([(0, p), (0, p)], 1, seed_id=0)


def test_record_history_monotone():
    rng = np.random.default_rng(1)
    sel = select_k_center(random_pool(rng, 9, 5), 4, seed_id=8, record=True)
    assert len(sel.history) == 4
    for prev, cur in zip(sel.history, sel.history[1:]):
        assert np.all(cur <= prev)


def test_bank_fills_then_evicts():
    bank = MidBank(capacity=2)
    assert bank.ingest(0, Prototype.from_vector(angle(0))).evicted == []
    assert bank.ingest(1, Prototype.from_vector(angle(2))).evicted == []
    # newest at 180: keep it plus the farther of {0, 2 deg} -> 0 deg (ties impossible here)
    res = bank.ingest(2, Prototype.from_vector(angle(180)))
    assert res.evicted == [1]
    assert bank.ids == [0, 2]


def test_bank_rejects_known_id():
    bank = MidBank(capacity=3)
    bank.ingest(0, Prototype.from_vector([1.0, 0.0]))
    with pytest.raises(StructuralError):
        bank.ingest(0, Prototype.from_vector([0.0, 1.0]))


def test_empty_bank_radius_errors_and_empty_pool_warns(caplog):
    bank = MidBank(capacity=2)
    with pytest.raises(StructuralError):
        coverage_radius(bank, [Prototype.from_vector([1.0, 0.0])])
    ingest_block(bank, 0, Prototype.from_vector([1.0, 0.0]))
    assert coverage_radius(bank, []) == 0.0
    assert "empty pool" in caplog.text


def test_bank_capacity_must_be_positive():
    with pytest.raises(StructuralError):
        MidBank(capacity=0)


def test_degenerate_prototype_counted_and_kept_apart():
    pool = [(0, Prototype.from_vector([1.0, 0.0])), (1, Prototype.from_vector([0.0, 0.0])), (2, Prototype.from_vector([0.9, 0.1]))]
    sel = select_k_center(pool, 2, seed_id=2)
    # the degenerate block sits at distance 1 from everything, so it is the farthest
    assert sel.order == [2, 1]
    assert sel.degenerate_pairs > 0


def test_matrix_and_row_paths_agree(monkeypatch):
    rng = np.random.default_rng(5)
    pool = random_pool(rng, 40, 6)
    fast = select_k_center(pool, 20, seed_id=39)
    monkeypatch.setattr(mid_bank, "FULL_MATRIX_LIMIT", 0)
    slow = select_k_center(pool, 20, seed_id=39)
    assert fast.order == slow.order
    assert fast.radius == slow.radius


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(1, 8), st.sampled_from([2, 4, 16]))
def test_bank_invariants_over_streams(seed, n, cap, d):
    rng = np.random.default_rng(seed)
    bank = MidBank(capacity=cap)
    seen = []
    for i in range(n):
        p = Prototype.from_vector(rng.standard_normal(d))
        seen.append(i)
        before = set(bank.ids)
        res = bank.ingest(i, p)
        assert len(bank) == min(cap, i + 1)
        assert i in bank  # the newest block seeds the selection
        assert bank.ids == sorted(bank.ids)
        assert set(res.evicted) | set(bank.ids) == before | {i}
        assert not set(res.evicted) & set(bank.ids)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(1, 4), st.sampled_from([2, 4, 64]))
def test_greedy_within_chord_bound_of_oracle(seed, n, k, d):
    # 1 - cos is half the squared chord length, so the metric 2x guarantee
    # on chords becomes 4x here
    k = min(k, n)
    pool = random_pool(np.random.default_rng(seed), n, d)
    greedy = select_k_center(pool, k, seed_id=n - 1)
    opt = exact_k_center(pool, k, pinned=n - 1)
    assert opt.objective <= greedy.radius + 1e-12
    assert greedy.radius <= 4 * opt.objective + 1e-12
    assert math.sqrt(2 * greedy.radius) <= 2 * math.sqrt(2 * opt.objective) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12))
def test_radius_equals_objective_of_selection(seed, n, k):
    pool = random_pool(np.random.default_rng(seed), n, 3)
    sel = select_k_center(pool, k, seed_id=0)
    by_id = dict(pool)
    centers = [by_id[i] for i in sel.order]
    assert sel.radius == pytest.approx(k_center_objective(centers, [p for _, p in pool]), abs=1e-12)
    assert len(sel.order) == min(k, n) == len(set(sel.order))
