import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from baggagedet.augment import (
    ALL_TRANSFORMS,
    AugmentConfig,
    TransformId,
    apply_transform,
    random_augment,
    sample_rng,
    transformed_dims,
)
from baggagedet.volcore import Box3D, Volume

from oracles import raster

FLIPS = [t for t in ALL_TRANSFORMS if t.kind == "flip"]
ROTS = [t for t in ALL_TRANSFORMS if t.kind == "rotation"]


def rand_volume(dims=(6, 7, 8), c=1, seed=0):
    return Volume(np.random.default_rng(seed).random((c, *dims)).astype(np.float32))


def test_twelve_distinct_transforms():
    assert len(set(ALL_TRANSFORMS)) == 12
    assert len(FLIPS) == 6 and len(ROTS) == 6
    v = rand_volume((5, 5, 5))
    outs = {apply_transform(v, [], t)[0].voxels.tobytes() for t in ALL_TRANSFORMS}
    assert len(outs) == 12
    with pytest.raises(ValueError):
        TransformId("flip", 6)


def test_z_flip_box_example():
    v = Volume(np.zeros((1, 10, 10, 10), dtype=np.float32))
    _, boxes = apply_transform(v, [Box3D(1, 2, 3, 4, 5, 6)], TransformId("flip", 0))
    assert boxes[0].coords == (6, 2, 3, 9, 5, 6)


def test_z_flip_maps_corners():
    # each corner z -> D - z then reorder
    v = Volume(np.zeros((1, 10, 10, 10), dtype=np.float32))
    _, boxes = apply_transform(v, [Box3D(1, 2, 3, 6, 5, 6)], TransformId("flip", 0))
    assert boxes[0].coords == (4, 2, 3, 9, 5, 6)


@pytest.mark.parametrize("t", FLIPS, ids=str)
def test_flip_is_involution(t):
    v = rand_volume()
    boxes = [Box3D(1, 2, 3, 4, 5, 6)]
    v1, b1 = apply_transform(v, boxes, t)
    v2, b2 = apply_transform(v1, b1, t)
    assert v2.equals(v) and b2 == boxes


@pytest.mark.parametrize("t", ROTS, ids=str)
def test_rotation_inverse_pair(t):
    v = rand_volume()
    boxes = [Box3D(0.5, 2, 3, 4, 5, 7.5)]
    v1, b1 = apply_transform(v, boxes, t)
    assert v1.dims == transformed_dims(v.dims, t)
    v2, b2 = apply_transform(v1, b1, t.inverse())
    assert v2.equals(v)
    np.testing.assert_allclose(b2[0].as_array(), boxes[0].as_array())


@pytest.mark.parametrize("t", ROTS, ids=str)
def test_rotation_matches_rot90(t):
    from baggagedet.augment import ROTATIONS

    v = rand_volume()
    (p, q), k = ROTATIONS[t.index]
    want = np.rot90(v.voxels[0], k, axes=(p, q))
    np.testing.assert_array_equal(apply_transform(v, [], t)[0].voxels[0], want)


@pytest.mark.parametrize("t", ROTS, ids=str)
def test_four_quarter_turns_identity(t):
    v = rand_volume()
    out = v
    for _ in range(4):
        out, _ = apply_transform(out, [], t)
    assert out.equals(v)


@pytest.mark.parametrize("t", ALL_TRANSFORMS, ids=str)
def test_histogram_preserved(t):
    v = rand_volume(c=2)
    out, _ = apply_transform(v, [], t)
    np.testing.assert_array_equal(np.sort(out.voxels.ravel()), np.sort(v.voxels.ravel()))


int_box = st.tuples(
    st.integers(0, 5), st.integers(0, 6), st.integers(0, 7), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)
).map(lambda t: Box3D(t[0], t[1], t[2], t[0] + t[3], t[1] + t[4], t[2] + t[5]))


@settings(deadline=None)
@given(int_box, st.sampled_from(ALL_TRANSFORMS))
def test_box_volume_consistency(box, t):
    dims = (8, 9, 10)
    occ = raster(box.coords, dims).astype(np.float32)[None]
    moved_occ, moved_boxes = apply_transform(Volume(occ), [box], t)
    assert np.array_equal(moved_occ.voxels[0] > 0, raster(moved_boxes[0].coords, moved_occ.dims))


@settings(deadline=None)
@given(st.sampled_from(ALL_TRANSFORMS))
def test_transform_bijective_on_coordinates(t):
    dims = (3, 4, 5)
    ids = np.arange(np.prod(dims), dtype=np.float64).reshape(1, *dims)
    out, _ = apply_transform(Volume(ids), [], t)
    assert sorted(out.voxels.ravel()) == list(range(int(np.prod(dims))))


def test_p_zero_identity():
    v = rand_volume()
    out, boxes, applied = random_augment(v, [Box3D(0, 0, 0, 1, 1, 1)], AugmentConfig(p=0.0), sample_rng(0, 1))
    assert applied == [] and out.equals(v) and boxes == [Box3D(0, 0, 0, 1, 1, 1)]


def test_p_one_applies_all_in_canonical_order():
    v = rand_volume()
    a = random_augment(v, [], AugmentConfig(p=1.0), sample_rng(0, 1))
    b = random_augment(v, [], AugmentConfig(p=1.0), sample_rng(9, 9))
    assert a[2] == list(ALL_TRANSFORMS)
    assert a[0].equals(b[0])
    ref = v
    for t in ALL_TRANSFORMS:
        ref, _ = apply_transform(ref, [], t)
    assert a[0].equals(ref)


def test_disabled_kinds_never_sampled():
    v = rand_volume()
    for i in range(50):
        _, _, applied = random_augment(v, [], AugmentConfig(p=0.9, rotations=False), sample_rng(1, i))
        assert all(t.kind == "flip" for t in applied)


def test_activation_frequency_p02():
    # 10,000 trials: binomial sd = 0.004, so [0.18, 0.22] is a 5-sigma band
    cfg = AugmentConfig(p=0.2)
    counts = {t: 0 for t in ALL_TRANSFORMS}
    from baggagedet.augment import sample_transforms

    for i in range(10_000):
        for t in sample_transforms(cfg, sample_rng(7, i)):
            counts[t] += 1
    for t, c in counts.items():
        assert 0.18 <= c / 10_000 <= 0.22, (t, c)


def test_rng_stream_independent_of_order():
    v = rand_volume()
    cfg = AugmentConfig(p=0.5)
    first = [random_augment(v, [], cfg, sample_rng(3, 0, i))[2] for i in range(10)]
    second = [random_augment(v, [], cfg, sample_rng(3, 0, i))[2] for i in reversed(range(10))]
    assert first == second[::-1]


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(p=1.5)
    assert AugmentConfig().p == 0.2
