import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framekv.anchor_tier import EMPTY_TIER_NOVELTY, AnchorTier, maybe_promote, normalize_pose, novelty
from framekv.errors import ConfigError, StructuralError

from conftest import make_block


def pose(yaw=0.0, t=(0.0, 0.0, 0.0)):
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2), *t])


def block(fid, q=0.9, s=0.9, p=None, key=None):
    key = np.ones(4) if key is None else np.asarray(key, dtype=np.float64)
    return make_block(fid, [key.reshape(1, 1, -1)], confidence=q, sharpness=s, pose_signature=p)


def test_normalize_pose_by_hand():
    sig = normalize_pose([1, 0, 0, 0, 3, 4, 0])
    # |t| = 5 -> t / 6 = (0.5, 2/3, 0); norm^2 = 1 + 1/4 + 4/9
    norm = np.sqrt(1 + 0.25 + 4 / 9)
    np.testing.assert_allclose(sig, np.array([1, 0, 0, 0, 0.5, 2 / 3, 0]) / norm)
    assert np.linalg.norm(sig) == pytest.approx(1.0)


def test_first_frame_pinned_without_gates():
    tier = AnchorTier(capacity=2, gap=10)
    res = tier.maybe_promote(block(0, q=0.0, s=0.0, p=pose()))
    assert res.promoted and res.reason == "pinned-first"
    assert tier.slots[0].pinned and tier.t_last == 0


def test_gap_reliability_and_novelty_gates():
    tier = AnchorTier(capacity=3, gap=10, phi_min=0.3, nu_min=0.05)
    tier.maybe_promote(block(0, p=pose(0.0)))
    assert tier.maybe_promote(block(5, p=pose(3.0))).reason == "gap"
    assert tier.maybe_promote(block(10, q=0.5, s=0.5, p=pose(3.0))).reason == "reliability"  # 0.25 < 0.3
    assert tier.maybe_promote(block(11, p=pose(0.0))).reason == "novelty"
    res = tier.maybe_promote(block(12, p=pose(3.0)))
    assert res.promoted and res.delta_t == 12
    assert res.phi == pytest.approx(0.81)
    # t_last moves only on promotion
    assert tier.t_last == 12
    assert tier.maybe_promote(block(20, p=pose(1.5))).reason == "gap"


def test_novelty_values():
    tier = AnchorTier(capacity=3, gap=1)
    sig = normalize_pose(pose(1.0))
    assert novelty(sig, tier) == EMPTY_TIER_NOVELTY
    tier.maybe_promote(block(0, p=pose(0.0)))
    expected = 1.0 - float(normalize_pose(pose(0.0)) @ sig)
    assert novelty(sig, tier) == pytest.approx(expected)
    assert tier.novelty(block(1, p=pose(1.0))) == (pytest.approx(expected), False)


def test_pose_fallback_uses_prototypes():
    tier = AnchorTier(capacity=3, gap=1, nu_min=0.5)
    tier.maybe_promote(block(0, key=[1, 0, 0, 0]))
    res = tier.maybe_promote(block(1, key=[0, 1, 0, 0]))
    assert res.pose_fallback
    assert res.nu == pytest.approx(1.0)
    assert res.promoted


def test_fifo_over_non_pinned():
    tier = AnchorTier(capacity=3, gap=1, nu_min=0.0)
    for t in range(5):
        tier.maybe_promote(block(t, p=pose(0.5 * t)))
    assert tier.ids == [0, 3, 4]
    assert tier.slots[0].pinned


def test_capacity_one_keeps_only_pinned():
    tier = AnchorTier(capacity=1, gap=1, nu_min=0.0)
    tier.maybe_promote(block(0, p=pose()))
    assert tier.maybe_promote(block(1, p=pose(2.0))).reason == "full"
    assert tier.ids == [0]


def test_disabled_and_ordering_errors():
    tier = AnchorTier(capacity=0)
    assert tier.maybe_promote(block(0)).reason == "disabled"
    with pytest.raises(StructuralError):
        tier.maybe_promote(block(0))
    with pytest.raises(ConfigError):
        AnchorTier(capacity=-1)
    with pytest.raises(ConfigError):
        AnchorTier(capacity=2, gap=0)


def test_functional_wrapper():
    tier = AnchorTier(capacity=2, gap=1)
    tier, promoted, evicted = maybe_promote(tier, block(0, p=pose()))
    assert promoted and evicted is None


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 5),
    st.integers(1, 20),
    st.integers(5, 120),
)
def test_contract_on_random_streams(seed, cap, gap, n):
    rng = np.random.default_rng(seed)
    tier = AnchorTier(capacity=cap, gap=gap, phi_min=0.3, nu_min=0.05)
    promotions = []
    for t in range(n):
        p = pose(rng.uniform(-3, 3), rng.normal(size=3)) if rng.random() < 0.9 else None
        before = [s.frame_id for s in tier.slots if not s.pinned]
        res = tier.maybe_promote(block(t, q=rng.random(), s=rng.random(), p=p, key=rng.normal(size=4)))
        if res.promoted:
            promotions.append(t)
        if res.evicted is not None:
            assert res.evicted == before[0]
        assert len(tier) <= cap
        assert tier.slots[0].frame_id == 0 and tier.slots[0].pinned
        assert [s.frame_id for s in tier.slots] == sorted(s.frame_id for s in tier.slots)
    assert promotions[0] == 0
    assert all(b - a >= gap for a, b in zip(promotions, promotions[1:]))
