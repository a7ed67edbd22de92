import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from baggagedet import volcore as vc
from baggagedet.volcore import Annotation, Box3D, ScaleConfig, Volume

from oracles import raster_iou


# ------------------------------------------------------------------ format

def test_roundtrip_zeros(tmp_path):
    v = Volume(np.zeros((1, 2, 3, 4), dtype=np.float32))
    vc.save_volume(v, tmp_path / "a.bvox")
    back, anns = vc.load_volume(tmp_path / "a.bvox")
    assert back.equals(v) and anns == []


def test_payload_length_dual_channel():
    buf = vc.encode_bvox(np.zeros((2, 8, 8, 8), dtype=np.float32))
    assert len(buf) - 20 == 4096
    assert buf[:4] == b"BVOX"
    assert struct.unpack_from("<BBBB3I", buf, 4) == (1, 0, 2, 0, 8, 8, 8)


def test_bad_magic():
    buf = bytearray(vc.encode_bvox(np.zeros((1, 2, 2, 2), dtype=np.float32)))
    buf[:4] = b"XVOX"
    with pytest.raises(vc.BadMagicError):
        vc.decode_bvox(bytes(buf))


def test_version_mismatch():
    buf = bytearray(vc.encode_bvox(np.zeros((1, 2, 2, 2), dtype=np.float32)))
    buf[4] = 2
    with pytest.raises(vc.VersionMismatchError):
        vc.decode_bvox(bytes(buf))


def test_truncated_payload_and_header():
    buf = vc.encode_bvox(np.zeros((1, 2, 2, 2), dtype=np.float32))
    with pytest.raises(vc.TruncatedPayloadError):
        vc.decode_bvox(buf[:-1])
    with pytest.raises(vc.TruncatedPayloadError):
        vc.decode_bvox(buf[:10])


def test_dims_mismatch_on_extra_bytes():
    buf = vc.encode_bvox(np.zeros((1, 2, 2, 2), dtype=np.float32))
    with pytest.raises(vc.DimsMismatchError):
        vc.decode_bvox(buf + b"\0\0\0\0")


def test_errors_are_distinct():
    kinds = {vc.BadMagicError, vc.VersionMismatchError, vc.TruncatedPayloadError, vc.DimsMismatchError}
    assert len(kinds) == 4
    assert all(issubclass(k, vc.FormatError) for k in kinds)


def test_annotations_and_meta_roundtrip(tmp_path):
    v = Volume(np.random.default_rng(0).random((2, 4, 5, 6)).astype(np.float32),
               vc.VolumeMeta("src-7", "tip-composited", "dual"))
    anns = [Annotation(Box3D(0, 1, 2, 3, 4, 5), 3, 0), Annotation(Box3D(0.5, 0, 0, 2.25, 1, 1), 0, 1)]
    vc.save_volume(v, tmp_path / "v.bvox", anns)
    back, back_anns = vc.load_volume(tmp_path / "v.bvox")
    assert back.equals(v)
    assert back.meta == v.meta
    assert back_anns == anns
    rec = anns[0].to_record()
    assert rec["class_name"] == "glockframe" and rec["box"] == [0, 1, 2, 3, 4, 5]


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(1, 3),
    dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    dtype=st.sampled_from([np.float32, np.float64]),
    seed=st.integers(0, 2**32 - 1),
)
def test_format_roundtrip_bit_exact(c, dims, dtype, seed):
    vox = np.random.default_rng(seed).standard_normal((c, *dims)).astype(dtype)
    back = vc.decode_bvox(vc.encode_bvox(vox))
    assert back.dtype == vox.dtype
    assert back.tobytes() == vox.tobytes()


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 0, 2, 2)))
    with pytest.raises(ValueError):
        Volume(np.full((1, 2, 2, 2), np.nan))
    assert Volume(np.zeros((3, 4, 5))).channels == 1


def test_box_invariants():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, np.inf, 1, 1)


def test_annotation_class_range():
    with pytest.raises(ValueError):
        Annotation(Box3D(0, 0, 0, 1, 1, 1), 5)


# --------------------------------------------------------------------- IoU

def test_iou_examples():
    a = Box3D(0, 0, 0, 4, 4, 4)
    assert vc.iou3d(a, a) == 1.0
    assert vc.iou3d(Box3D(0, 0, 0, 2, 2, 2), Box3D(5, 5, 5, 7, 7, 7)) == 0.0
    b = Box3D(2, 2, 2, 6, 6, 6)
    assert vc.iou3d(a, b) == pytest.approx(raster_iou(a.coords, b.coords))
    assert vc.iou3d(a, b) == pytest.approx(8 / 120)


def _all_boxes(n):
    spans = [(lo, hi) for lo in range(n) for hi in range(lo + 1, n + 1)]
    return [(z0, y0, x0, z1, y1, x1) for (z0, z1), (y0, y1), (x0, x1) in itertools.product(spans, spans, spans)]


def _bitmask(box, n):
    bits = 0
    z0, y0, x0, z1, y1, x1 = box
    for z in range(z0, z1):
        for y in range(y0, y1):
            for x in range(x0, x1):
                bits |= 1 << ((z * n + y) * n + x)
    return bits


def test_iou_exhaustive_against_raster_4cube():
    boxes = _all_boxes(4)  # every integer box in a 4^3 grid
    masks = np.array([_bitmask(b, 4) for b in boxes], dtype=np.uint64)
    lut = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.int64)

    def popcount(x):
        return sum(lut[(x >> np.uint64(16 * k)) & np.uint64(0xFFFF)] for k in range(4))

    arr = np.array(boxes, dtype=np.float64)
    got = vc.iou_matrix(arr, arr)
    for i in range(0, len(boxes), 100):
        inter = popcount(masks[i:i + 100, None] & masks[None, :])
        union = popcount(masks[i:i + 100, None] | masks[None, :])
        assert np.array_equal(got[i:i + 100], inter / union)


def test_iou_random_pairs_against_raster_10cube():
    rng = np.random.default_rng(5)
    for _ in range(2000):
        lo = rng.integers(0, 10, size=(2, 3))
        hi = lo + rng.integers(1, 11 - lo)
        a, b = np.concatenate([lo[0], hi[0]]), np.concatenate([lo[1], hi[1]])
        assert vc.iou3d(Box3D(*a), Box3D(*b)) == raster_iou(a, b)


box_st = st.tuples(
    st.floats(0, 20), st.floats(0, 20), st.floats(0, 20), st.floats(0.5, 10), st.floats(0.5, 10), st.floats(0.5, 10)
).map(lambda t: Box3D(t[0], t[1], t[2], t[0] + t[3], t[1] + t[4], t[2] + t[5]))


@given(box_st, box_st)
def test_iou_symmetric_bounded(a, b):
    assert vc.iou3d(a, b) == pytest.approx(vc.iou3d(b, a), abs=1e-12)
    assert 0.0 <= vc.iou3d(a, b) <= 1.0
    assert vc.iou3d(a, a) == pytest.approx(1.0)


@given(box_st, box_st, st.integers(0, 2))
def test_iou_monotone_when_translating_apart(a, b, axis):
    c = b.center - a.center
    direction = 1.0 if c[axis] >= 0 else -1.0
    prev = vc.iou3d(a, b)
    for step in range(1, 8):
        shift = np.zeros(6)
        shift[[axis, axis + 3]] = direction * step * 0.7
        moved = Box3D.from_array(b.as_array() + shift)
        cur = vc.iou3d(a, moved)
        assert cur <= prev + 1e-12
        prev = cur


# ---------------------------------------------------------------- scaling

def test_resample_identity_for_s1():
    v = Volume(np.random.default_rng(0).random((1, 5, 6, 7)).astype(np.float32))
    assert vc.resample(v, ScaleConfig(1)).equals(v)


@pytest.mark.parametrize("s", [1, 2, 3, 4])
def test_resample_constant(s):
    v = Volume(np.full((2, 7, 9, 10), 0.375, dtype=np.float32))
    out = vc.resample(v, ScaleConfig(s))
    assert out.dims == vc.scaled_dims(v.dims, s)
    np.testing.assert_array_equal(out.voxels, 0.375)


def test_resample_single_voxel_block_mean():
    vox = np.zeros((1, 6, 6, 6), dtype=np.float32)
    vox[0, 0, 0, 0] = 1
    out = vc.resample(Volume(vox), ScaleConfig(3))
    assert out.dims == (2, 2, 2)
    assert out.voxels[0, 0, 0, 0] == pytest.approx(1 / 27)
    assert out.voxels.sum() == pytest.approx(1 / 27)


def test_scale_config_range():
    with pytest.raises(ValueError):
        ScaleConfig(5)
    assert ScaleConfig().s == 3


def test_rescale_boxes_clamps_and_min_size():
    boxes = vc.rescale_boxes([Box3D(0, 0, 0, 1, 1, 1), Box3D(3, 3, 3, 12, 9, 10)], ScaleConfig(3), (10, 10, 10))
    assert boxes[0].coords == (0, 0, 0, 1, 1, 1)
    assert boxes[1].coords == pytest.approx((1, 1, 1, 4, 3, 10 / 3))
    edge = vc.rescale_boxes([Box3D(11.5, 0, 0, 12, 3, 3)], ScaleConfig(3), (12, 12, 12))[0]
    assert edge.coords[3] == 4 and edge.coords[0] == 3


@settings(deadline=None)
@given(st.lists(box_st, min_size=2, max_size=6), st.integers(1, 4))
def test_rescale_preserves_center_order(boxes, s):
    dims = (32, 32, 32)
    out = vc.rescale_boxes(boxes, ScaleConfig(s), dims)
    for axis in range(3):
        before = [b.center[axis] for b in boxes]
        after = [b.center[axis] for b in out]
        for i, j in itertools.combinations(range(len(boxes)), 2):
            if before[i] < before[j]:
                assert after[i] <= after[j] + 1e-9


def test_pad_to_multiple():
    v = Volume(np.ones((1, 32, 32, 32), dtype=np.float32))
    out, off = vc.pad_to_multiple(v, 32)
    assert out.dims == (32, 32, 32) and off == (0, 0, 0)
    v = Volume(np.ones((1, 33, 40, 5), dtype=np.float32))
    out, off = vc.pad_to_multiple(v, 32)
    assert out.dims == (64, 64, 32) and off == (0, 0, 0)
    assert out.voxels[:, :33, :40, :5].min() == 1
    assert out.voxels.sum() == 33 * 40 * 5


def test_select_channels():
    v = Volume(np.stack([np.zeros((2, 2, 2)), np.ones((2, 2, 2))]).astype(np.float32))
    assert vc.select_channels(v, "high").voxels.max() == 1
    assert vc.select_channels(v, "low").voxels.max() == 0
    assert vc.select_channels(v, "dual").channels == 2
    with pytest.raises(ValueError):
        vc.select_channels(Volume(np.zeros((1, 2, 2, 2))), "dual")


def test_manifest_roundtrip(tmp_path):
    entries = [vc.ManifestEntry("a.bvox", "train", 1), vc.ManifestEntry("b.bvox", "test", 3)]
    vc.write_manifest(entries, tmp_path / "m.tsv")
    assert vc.read_manifest(tmp_path / "m.tsv") == entries
    assert vc.manifest_paths(tmp_path / "m.tsv", "test", 3) == [tmp_path / "b.bvox"]
    with pytest.raises(ValueError):
        vc.ManifestEntry("a", "val", 1)
