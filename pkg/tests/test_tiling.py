import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfbpath.tiling import (
    NO_LABEL,
    PatchRecord,
    PatchRect,
    export_tiles,
    extract_patches,
    label_patch,
    map_to_lowres,
    mean_dfb,
    read_manifest,
    stitch_prediction_map,
    tile_grid,
    write_manifest,
)

NON_NEOP, LSIL, HSIL = 0, 1, 2


def test_grid_counts():
    assert len(tile_grid(512, 512, 256, 256)) == 4
    assert tile_grid(255, 255, 256, 256) == []
    rects = tile_grid(600, 300, 256, 256)
    assert [(r.x, r.y) for r in rects] == [(0, 0), (256, 0)]


def test_grid_row_major():
    rects = tile_grid(30, 20, 10, 10)
    assert [(r.x, r.y) for r in rects] == [(0, 0), (10, 0), (20, 0), (0, 10), (10, 10), (20, 10)]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 80), st.integers(1, 80), st.integers(1, 20), st.integers(0, 10))
def test_grid_disjoint_cover(w, h, patch, extra):
    stride = patch + extra
    rects = tile_grid(w, h, patch, stride)
    if w >= patch and h >= patch:
        assert len(rects) == ((w - patch) // stride + 1) * ((h - patch) // stride + 1)
    cover = np.zeros((h, w), int)
    for r in rects:
        assert r.fits(w, h)
        cover[r.slices()] += 1
    assert cover.max(initial=0) <= 1
    assert cover.sum() == len(rects) * patch * patch


def test_map_to_lowres():
    assert map_to_lowres(PatchRect(256, 512, 256), 16) == PatchRect(16, 32, 16)
    assert map_to_lowres(PatchRect(8, 8, 256), 16) == PatchRect(0, 0, 16)
    r = PatchRect(3, 7, 11)
    assert map_to_lowres(r, 1) == r


def test_map_to_lowres_clamps():
    assert map_to_lowres(PatchRect(48, 0, 32), 16, shape=(10, 4)) == PatchRect(3, 0, 1)


def test_mean_dfb():
    d = np.full((20, 20), 10.0)
    assert mean_dfb(d, PatchRect(2, 2, 8)) == 10.0
    d = np.zeros((16, 16))
    d[:, 8:] = 20.0
    assert mean_dfb(d, PatchRect(0, 0, 16)) == 10.0


def test_mean_dfb_matches_sum_and_partition():
    rng = np.random.default_rng(0)
    d = rng.random((40, 40)) * 100
    r = PatchRect(5, 9, 16)
    total = sum(d[y, x] for y in range(9, 25) for x in range(5, 21))
    assert mean_dfb(d, r) == pytest.approx(total / 256, abs=1e-9)
    # recombine four quadrants, weighted by their areas
    quads = [PatchRect(5 + dx, 9 + dy, 8) for dy in (0, 8) for dx in (0, 8)]
    assert np.mean([mean_dfb(d, q) for q in quads]) == pytest.approx(mean_dfb(d, r), abs=1e-9)


def test_mean_dfb_out_of_bounds():
    with pytest.raises(ValueError):
        mean_dfb(np.zeros((4, 4)), PatchRect(2, 2, 4))


def test_label_patch():
    gt = np.full((8, 8), LSIL + 1, dtype=np.uint8)
    assert label_patch(gt, PatchRect(0, 0, 8)) == LSIL
    gt[:, 4:] = HSIL + 1
    gt[:, :4] = NON_NEOP + 1
    assert label_patch(gt, PatchRect(0, 0, 8)) is None
    assert label_patch(np.zeros((8, 8), np.uint8), PatchRect(0, 0, 8)) is None


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_label_patch_implies_uniform(seed):
    rng = np.random.default_rng(seed)
    gt = rng.choice([0, 1, 2, 3], size=(6, 6), p=[0.05, 0.85, 0.05, 0.05]).astype(np.uint8)
    for r in tile_grid(6, 6, 2, 1):
        lab = label_patch(gt, r)
        if lab is not None:
            assert np.all(gt[r.slices()] == lab + 1)


def test_stitch_uniform():
    grid = tile_grid(4, 4, 2, 2)
    out = stitch_prediction_map(grid, [NON_NEOP] * 4, np.ones((4, 4), bool))
    assert np.all(out == NON_NEOP + 1)


def test_stitch_background_blanks_everything():
    grid = tile_grid(4, 4, 2, 2)
    out = stitch_prediction_map(grid, [LSIL] * 4, np.zeros((4, 4), bool))
    assert np.all(out == NO_LABEL)


def test_stitch_quadrants():
    grid = tile_grid(4, 4, 2, 2)
    out = stitch_prediction_map(grid, [LSIL, HSIL, NON_NEOP, NON_NEOP], np.ones((4, 4), bool))
    expect = np.array([[2, 2, 3, 3], [2, 2, 3, 3], [1, 1, 1, 1], [1, 1, 1, 1]])
    assert np.array_equal(out, expect)


def test_stitch_upscaled_masks():
    tissue = np.array([[True, False], [True, True]])
    gt = np.array([[1, 1], [0, 1]], dtype=np.uint8)
    grid = tile_grid(4, 4, 2, 2)
    out = stitch_prediction_map(grid, [HSIL] * 4, tissue, gt, factor=2)
    expect = np.array([[3, 3, 0, 0], [3, 3, 0, 0], [0, 0, 3, 3], [0, 0, 3, 3]])
    assert np.array_equal(out, expect)


def test_stitch_length_mismatch():
    with pytest.raises(ValueError):
        stitch_prediction_map(tile_grid(4, 4, 2, 2), [0], np.ones((4, 4), bool))


def test_stitch_label_round_trip():
    rng = np.random.default_rng(3)
    gt = np.kron(rng.integers(1, 4, (3, 4)), np.ones((5, 5), int)).astype(np.uint8)
    grid = tile_grid(20, 15, 5, 5)
    labels = [label_patch(gt, r) for r in grid]
    assert None not in labels
    out = stitch_prediction_map(grid, labels, np.ones(gt.shape, bool))
    assert np.array_equal(out, gt)


def test_extract_and_manifest(tmp_path):
    image = np.random.default_rng(4).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    gt = np.zeros((16, 16), np.uint8)
    gt[:8, :8] = 2  # LSIL
    gt[8:, :] = 1  # NonNeop
    gt[:8, 8:] = 3  # HSIL
    gt[0, 15] = 1  # spoil one patch
    dfb = np.arange(256, dtype=float).reshape(16, 16)
    recs = extract_patches("s1", image, dfb, gt, factor=4, patch_size=32)
    assert [(r.rect.x, r.rect.y, r.label) for r in recs] == [(0, 0, 1), (0, 32, 0), (32, 32, 0)]
    assert recs[0].dfb_mean == pytest.approx(dfb[:8, :8].mean())
    assert np.array_equal(recs[1].image, image[32:64, 0:32])

    write_manifest(tmp_path / "p.csv", recs)
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "wsi_id,x,y,size,dfb_mean,label"
    back = read_manifest(tmp_path / "p.csv")
    assert [(r.wsi_id, r.rect, r.dfb_mean, r.label) for r in back] == [
        (r.wsi_id, r.rect, r.dfb_mean, r.label) for r in recs
    ]
    export_tiles(tmp_path, recs)
    assert (tmp_path / "tiles" / "s1" / "0_32.png").exists()


def test_extract_all_tissue_patches_for_maps():
    image = np.zeros((64, 64, 3), dtype=np.uint8)
    tissue = np.zeros((16, 16), bool)
    tissue[0:2, 0:2] = True
    recs = extract_patches("s", image, np.zeros((16, 16)), None, 4, 32, tissue=tissue, single_class=False)
    assert len(recs) == 1 and recs[0].label is None


def test_patch_rect_validation():
    with pytest.raises(ValueError):
        PatchRect(-1, 0, 4)
    with pytest.raises(ValueError):
        PatchRect(0, 0, 0)
    PatchRecord("a", PatchRect(0, 0, 1), 0.0, None)
