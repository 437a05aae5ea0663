import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from framekv.errors import ConfigError, StructuralError
from framekv.memory_core import (
    FrameMeta,
    Prototype,
    StreamConfig,
    compute_prototype,
    cosine_distance,
    distance_matrix,
    mean_key,
    stack_units,
)

from conftest import make_block


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=32)


def test_config_broadcasts_per_layer_ints():
    cfg = StreamConfig(num_layers=3, heads_per_layer=2, tokens_per_frame=5, key_dim=8)
    assert cfg.heads_per_layer == (2, 2, 2)
    assert cfg.key_dim == (8, 8, 8)
    assert cfg.block_shape(1) == (2, 5, 8)


def test_config_roundtrip_dict():
    cfg = StreamConfig(num_layers=2, heads_per_layer=(1, 3), tokens_per_frame=4, key_dim=(8, 16), bytes_per_element=2)
    assert StreamConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_layers=0, heads_per_layer=1, tokens_per_frame=1, key_dim=1),
        dict(num_layers=1, heads_per_layer=0, tokens_per_frame=1, key_dim=1),
        dict(num_layers=1, heads_per_layer=1, tokens_per_frame=0, key_dim=1),
        dict(num_layers=2, heads_per_layer=(1,), tokens_per_frame=1, key_dim=1),
    ],
)
def test_config_rejects_bad_dimensions(kwargs):
    with pytest.raises(ConfigError):
        StreamConfig(**kwargs)


def test_meta_validation():
    with pytest.raises(StructuralError):
        FrameMeta(frame_id=-1)
    with pytest.raises(StructuralError):
        FrameMeta(frame_id=0, confidence=1.5)
    with pytest.raises(StructuralError):
        FrameMeta(frame_id=0, pose_signature=np.array([2.0, 0, 0, 0, 0, 0, 0]))
    with pytest.raises(StructuralError):
        FrameMeta(frame_id=0, token_positions=np.zeros((3, 3)))


def test_block_shape_checks(tiny_config):
    good = make_block(0, [np.zeros((2, 4, 8)), np.zeros((2, 4, 8))])
    good.validate(tiny_config)
    bad = make_block(0, [np.zeros((2, 4, 8)), np.zeros((2, 5, 8))])
    with pytest.raises(StructuralError):
        bad.validate(tiny_config)
    with pytest.raises(StructuralError):
        make_block(0, [np.zeros((2, 4, 8))], values=(np.zeros((2, 4, 7)),))


def test_prototype_is_normalized_mean():
    keys = np.array([[[1.0, 0.0], [3.0, 0.0]], [[0.0, 2.0], [0.0, 2.0]]])  # mean (1, 1)
    proto = compute_prototype(make_block(0, [keys]), 0)
    np.testing.assert_allclose(proto.raw, [1.0, 1.0])
    np.testing.assert_allclose(proto.unit, [2**-0.5, 2**-0.5])
    assert not proto.degenerate


def test_prototype_cached_once():
    block = make_block(0, [np.ones((1, 2, 3))])
    assert block.prototype(0) is block.prototype(0)


def test_zero_mean_block_is_degenerate():
    keys = np.array([[[1.0, -2.0], [-1.0, 2.0]]])
    proto = compute_prototype(make_block(0, [keys]), 0)
    assert proto.degenerate
    assert np.all(proto.unit == 0)
    other = Prototype.from_vector([1.0, 0.0])
    assert cosine_distance(proto, other) == 1.0
    assert cosine_distance(proto, proto) == 1.0


def test_distance_known_values():
    a = Prototype.from_vector([1.0, 0.0])
    assert cosine_distance(a, Prototype.from_vector([2.0, 0.0])) == 0.0
    assert cosine_distance(a, Prototype.from_vector([0.0, 5.0])) == pytest.approx(1.0)
    assert cosine_distance(a, Prototype.from_vector([-1.0, 0.0])) == pytest.approx(2.0)


def test_distance_dim_mismatch():
    with pytest.raises(StructuralError):
        cosine_distance(Prototype.from_vector([1.0, 0.0]), Prototype.from_vector([1.0, 0.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_distance_symmetric_and_bounded(rows):
    a, b = Prototype.from_vector(rows[0]), Prototype.from_vector(rows[1])
    d = cosine_distance(a, b)
    assert 0.0 <= d <= 2.0
    assert d == cosine_distance(b, a)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, (3, 6, 4), elements=finite), st.randoms(use_true_random=False))
def test_mean_key_exactly_order_invariant(keys, rnd):
    flat = keys.reshape(-1, 4)
    perm = list(range(len(flat)))
    rnd.shuffle(perm)
    shuffled = flat[perm].reshape(keys.shape)
    assert np.array_equal(mean_key(keys), mean_key(shuffled))


def test_distance_matrix_matches_pairwise():
    rng = np.random.default_rng(3)
    protos = [Prototype.from_vector(rng.standard_normal(6)) for _ in range(5)] + [Prototype.from_vector(np.zeros(6))]
    u, d = stack_units(protos)
    m = distance_matrix(u, d, u, d)
    for i, a in enumerate(protos):
        for j, b in enumerate(protos):
            assert m[i, j] == pytest.approx(cosine_distance(a, b), abs=1e-12)


def test_stack_units_rejects_mixed_dims():
    with pytest.raises(StructuralError):
        stack_units([Prototype.from_vector([1.0]), Prototype.from_vector([1.0, 0.0])])
    with pytest.raises(StructuralError):
        stack_units([])
