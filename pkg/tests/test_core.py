import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from xview_seg.core import (
    MaskFileError,
    MaskFormatError,
    NonBinaryMaskError,
    RunConfig,
    binarize,
    check_image,
    clamp_points,
    iou,
    read_mask,
    write_mask,
)

masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


def test_iou_identical_and_disjoint():
    a = np.zeros((6, 6), np.uint8)
    a[:2, :2] = 1
    b = np.zeros_like(a)
    b[4:, 4:] = 1
    assert iou(a, a) == 1.0
    assert iou(a, b) == 0.0


def test_iou_offset_blocks_is_one_seventh():
    a = np.zeros((4, 4), np.uint8)
    b = np.zeros((4, 4), np.uint8)
    a[0:2, 0:2] = 1
    b[1:3, 1:3] = 1
    assert iou(a, b) == pytest.approx(1 / 7, abs=0)


def test_iou_empty_conventions():
    z = np.zeros((3, 3), np.uint8)
    one = z.copy()
    one[1, 1] = 1
    assert iou(z, z) == 1.0
    assert iou(z, one) == 0.0


def test_iou_rejects_bad_input():
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(NonBinaryMaskError):
        iou(np.full((2, 2), 0.5), np.zeros((2, 2)))


@given(masks, st.data())
def test_iou_symmetric(a, data):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    assert iou(a, b) == iou(b, a)
    if a.any():
        assert iou(a, a) == 1.0


def test_binarize_examples():
    assert not binarize(np.full((3, 3), 0.4)).any()
    assert binarize(np.full((3, 3), 0.5)).all()
    np.testing.assert_array_equal(binarize(np.array([0.2, 0.7])), [0, 1])


@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), st.floats(0.01, 0.99))
def test_binarize_idempotent(m, t):
    once = binarize(m, t)
    np.testing.assert_array_equal(binarize(once, t), once)


def test_mask_round_trip_checkerboard(tmp_path):
    m = (np.indices((70, 70)).sum(axis=0) % 2).astype(np.uint8)
    write_mask(m, tmp_path / "c.png")
    np.testing.assert_array_equal(read_mask(tmp_path / "c.png"), m)


def test_mask_round_trip_random_8x8(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "m.png"
    for _ in range(1000):
        m = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        write_mask(m, path)
        got = read_mask(path)
        assert got.dtype == np.uint8
        np.testing.assert_array_equal(got, m)


def test_read_mask_errors_are_distinct(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(NonBinaryMaskError, match="non-binary mask"):
        read_mask(tmp_path / "rgb.png")
    Image.fromarray(np.full((4, 4), 7, np.uint8)).save(tmp_path / "gray.png")
    with pytest.raises(NonBinaryMaskError):
        read_mask(tmp_path / "gray.png")
    (tmp_path / "junk.png").write_bytes(b"\x89PNG not really")
    with pytest.raises(MaskFormatError):
        read_mask(tmp_path / "junk.png")
    with pytest.raises(MaskFileError):
        read_mask(tmp_path / "missing.png")


def test_run_config_invariants():
    with pytest.raises(ValueError):
        RunConfig(image_size=71)
    with pytest.raises(ValueError):
        RunConfig(image_size=518, fusion_ratio=5)
    with pytest.raises(ValueError):
        RunConfig(k_points=0)
    with pytest.raises(ValueError):
        RunConfig(decoder_blocks=0)
    with pytest.raises(ValueError):
        RunConfig(refine_iters=-1)
    c = RunConfig()
    assert (c.patch_size, c.image_size, c.k_points, c.fusion_ratio, c.decoder_blocks, c.refine_iters) == (
        14, 518, 5, 7, 2, 2)
    assert (c.focal_weight, c.dice_weight, c.lr, c.weight_decay, c.epochs) == (20.0, 1.0, 5e-5, 1e-4, 12)
    assert c.decay_epochs == (8, 11) and c.decay_factor == 0.1 and c.clip_norm == 1.0 and c.batch_size == 8
    assert c.fusion_grid == 37


def test_run_config_file_round_trip(tmp_path):
    c = RunConfig.toy(seed=3, use_points=False, decay_epochs=(2, 5))
    c.write(tmp_path / "c.ini")
    assert RunConfig.read(tmp_path / "c.ini") == c


def test_check_image_and_clamp():
    with pytest.raises(ValueError):
        check_image(np.zeros((15, 14, 3)))
    with pytest.raises(ValueError):
        check_image(np.full((14, 14, 3), 1.5))
    p = clamp_points(np.array([[-3.0, 80.0], [10.0, 10.0]]), 70, 70)
    np.testing.assert_array_equal(p, [[0.0, 69.0], [10.0, 10.0]])
