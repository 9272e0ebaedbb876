import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_lines, square_outline
from oracles import flood_fill_labels, modal_color
from paintmatch.segmentation import (
    SegmentationError,
    SegmentMap,
    SegmentPalette,
    extract_segments,
    identify_background,
    load_segment_map,
    palette_with_background,
    read_segment_colors,
    save_segment_map,
    unify_line_colors,
)


def test_blank_canvas_is_one_segment():
    seg = extract_segments(np.full((8, 8, 3), 255, np.uint8))
    assert seg.segment_count == 1
    assert seg.areas.tolist() == [64]


def test_square_outline_gives_interior_and_exterior():
    seg = extract_segments(square_outline())
    assert seg.segment_count == 2
    # exterior starts at (0, 0), so it gets id 1; 64 - 12 outline - 4 interior = 48
    assert seg.areas.tolist() == [48, 4]
    np.testing.assert_array_equal(seg.labels, flood_fill_labels(square_outline()))
    assert seg.labels[3, 3] == 2 and seg.labels[0, 0] == 1
    assert (seg.labels[2, 2:6] == 0).all()


def test_all_line_image_raises():
    with pytest.raises(SegmentationError, match="no segments"):
        extract_segments(np.zeros((4, 4, 3), np.uint8))


def test_line_threshold_boundary():
    img = np.full((1, 3, 3), 255, np.uint8)
    img[0, 1] = 245  # exactly 255 - 10 is canvas
    assert extract_segments(img).segment_count == 1
    img[0, 1] = 244
    assert extract_segments(img).segment_count == 2


@pytest.mark.parametrize("seed", range(10))
def test_labels_match_flood_fill_oracle(seed):
    img = random_lines(np.random.default_rng(seed), 16, 16)
    if (img == 0).all():
        pytest.skip("no canvas")
    seg = extract_segments(img)
    # raster-order ids make the labeling unique, so compare exactly
    np.testing.assert_array_equal(seg.labels, flood_fill_labels(img))
    assert seg.areas.sum() == (seg.labels > 0).sum()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 20), st.integers(4, 20))
def test_labels_match_oracle_property(seed, h, w):
    img = random_lines(np.random.default_rng(seed), h, w, density=0.3)
    if (img == 0).all():
        return
    np.testing.assert_array_equal(extract_segments(img).labels, flood_fill_labels(img))


def test_modal_color_constant_and_majority_and_tie():
    labels = np.array([[1, 1, 1, 1], [2, 2, 2, 2], [3, 3, 3, 3]])
    seg = SegmentMap.from_labels(labels)
    gt = np.zeros((3, 4, 3), np.uint8)
    gt[0] = (255, 0, 0)
    gt[1] = (0, 0, 255)
    gt[1, 3] = (0, 0, 254)
    gt[2, :2] = (1, 2, 3)
    gt[2, 2:] = (0, 9, 9)
    colors = read_segment_colors(gt, seg).colors.tolist()
    assert colors == [[255, 0, 0], [0, 0, 255], [0, 9, 9]]


@pytest.mark.parametrize("seed", range(5))
def test_modal_color_matches_counter_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(1, 5, size=(12, 12))
    labels[0, :4] = [1, 2, 3, 4]
    seg = SegmentMap.from_labels(labels)
    gt = rng.integers(0, 3, size=(12, 12, 3)).astype(np.uint8)
    got = read_segment_colors(gt, seg).colors
    for s in range(1, 5):
        px = [tuple(int(v) for v in gt[y, x]) for y, x in zip(*np.nonzero(labels == s))]
        assert tuple(got[s - 1]) == modal_color(px)


def test_unify_blackens_colored_lines_only():
    img = np.full((6, 6, 3), 255, np.uint8)
    img[2, :] = (200, 0, 0)
    out = unify_line_colors(img)
    assert (out[2] == 0).all()
    assert (out[[0, 1, 3, 4, 5]] == 255).all()
    white = np.full((5, 5, 3), 255, np.uint8)
    np.testing.assert_array_equal(unify_line_colors(white), white)


@pytest.mark.parametrize("seed", range(8))
def test_unify_preserves_segments(seed):
    img = random_lines(np.random.default_rng(seed), 20, 20, colored=True)
    if not (img.min(axis=2) >= 245).any():
        pytest.skip("no canvas")
    np.testing.assert_array_equal(extract_segments(unify_line_colors(img)).labels, extract_segments(img).labels)


def test_background_rules():
    assert identify_background(extract_segments(np.full((8, 8, 3), 255, np.uint8))) == {1}
    seg = extract_segments(square_outline())
    assert identify_background(seg) == {1}
    gt = np.full((8, 8, 3), 255, np.uint8)
    gt[3:5, 3:5] = (10, 20, 30)
    assert palette_with_background(gt, seg).background_flags.tolist() == [True, False]
    # a colored full-frame character: the border region is not the background color
    gt[:] = (10, 20, 30)
    assert identify_background(seg, read_segment_colors(gt, seg)) == set()


def test_background_without_gt_uses_area_fraction():
    img = np.full((20, 20, 3), 255, np.uint8)
    img[:, 1] = 0  # left strip of 20 px (5%) touches the border
    seg = extract_segments(img)
    assert seg.areas.tolist() == [20, 360]
    assert identify_background(seg) == {2}
    assert identify_background(seg, min_area_fraction=0.01) == {1, 2}


def test_segment_map_round_trip(tmp_path):
    seg = extract_segments(square_outline())
    gt = np.full((8, 8, 3), 255, np.uint8)
    gt[3:5, 3:5] = (1, 2, 3)
    pal = palette_with_background(gt, seg)
    png, sidecar = save_segment_map(tmp_path / "m.png", seg, pal)
    assert sidecar.exists()
    seg2, pal2 = load_segment_map(png)
    np.testing.assert_array_equal(seg2.labels, seg.labels)
    np.testing.assert_array_equal(pal2.colors, pal.colors)
    np.testing.assert_array_equal(pal2.background_flags, pal.background_flags)


def test_segment_map_without_palette_round_trip(tmp_path):
    seg = extract_segments(square_outline())
    png, _ = save_segment_map(tmp_path / "m.png", seg)
    seg2, pal2 = load_segment_map(png)
    assert pal2 is None and seg2.segment_count == 2


def test_from_labels_rejects_gaps():
    with pytest.raises(SegmentationError):
        SegmentMap.from_labels(np.array([[1, 3]]))


def test_palette_length():
    assert len(SegmentPalette(np.zeros((3, 3), np.uint8))) == 3
