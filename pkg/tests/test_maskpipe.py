import os

import numpy as np
import pytest

from maskpipe import (CRITERIA_PRESETS, BinaryMask, FusionCriterion, MaskShapeError, apply_mask,
                      batch_fuse, criterion_score, decode_rle, encode_rle, fuse_masks, load_mask,
                      read_image, save_mask, write_image)


def square(size, top, left, height, width=None):
    bits = np.zeros(size, dtype=bool)
    bits[top:top + height, left:left + (width or height)] = True
    return BinaryMask(bits)


# ==================== Критерий ====================

def test_iou_identical_squares():
    a = square((20, 20), 0, 0, 10)
    assert criterion_score(a, a, 'iou') == 1.0


def test_iou_disjoint_squares():
    a = square((20, 20), 0, 0, 10)
    b = square((20, 20), 10, 10, 10)
    assert criterion_score(a, b, 'iou') == 0.0


def test_iou_half_overlap_is_one_third():
    a = square((10, 20), 0, 0, 10, 10)
    b = square((10, 20), 0, 5, 10, 10)
    assert criterion_score(a, b, 'iou') == pytest.approx(1.0 / 3.0, abs=0)


def test_ioc_boundary_half():
    reference = square((10, 20), 0, 0, 10, 10)
    candidate = square((10, 20), 0, 5, 10, 10)
    score = criterion_score(candidate, reference, 'ioc')
    assert score == 0.5
    fused = fuse_masks([candidate], reference, FusionCriterion('ioc', 0.5))
    assert fused.survivors == 1
    fused = fuse_masks([candidate], reference, FusionCriterion('ioc', 0.51))
    assert fused.survivors == 0


def test_empty_masks_score_zero():
    empty = BinaryMask.zeros(5, 5)
    assert criterion_score(empty, empty, 'iou') == 0.0
    assert criterion_score(empty, square((5, 5), 0, 0, 2), 'ioc') == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(MaskShapeError):
        criterion_score(BinaryMask.zeros(4, 4), BinaryMask.zeros(4, 5), 'iou')
    with pytest.raises(MaskShapeError):
        fuse_masks([BinaryMask.zeros(4, 4)], BinaryMask.zeros(5, 5), FusionCriterion())


def test_long_criterion_name_accepted():
    assert FusionCriterion('intersection-over-candidate', 0.5).kind == 'ioc'
    with pytest.raises(ValueError):
        FusionCriterion('dice', 0.5)
    with pytest.raises(ValueError):
        FusionCriterion('iou', 1.5)


# ==================== Слияние ====================

def test_identical_candidates_union_is_reference():
    reference = square((16, 16), 2, 2, 8)
    result = fuse_masks([reference, BinaryMask(reference.bits.copy())], reference, FusionCriterion('iou', 0.3))
    assert result.mask == reference
    assert result.survivors == 2


def test_disjoint_candidate_rejected():
    reference = square((16, 16), 0, 0, 6)
    disjoint = square((16, 16), 10, 10, 6)
    result = fuse_masks([disjoint, reference], reference, FusionCriterion('iou', 0.3))
    assert result.mask == reference
    assert result.survivors == 1


def test_passthrough_is_union(rng):
    reference = BinaryMask.zeros(12, 12)
    candidates = [BinaryMask(rng.random((12, 12)) > 0.7) for _ in range(4)]
    result = fuse_masks(candidates, reference, FusionCriterion('passthrough', 0.0))
    expected = np.logical_or.reduce([c.bits for c in candidates])
    assert np.array_equal(result.mask.bits, expected)


def test_no_candidates_gives_empty_mask_and_warning():
    result = fuse_masks([], square((8, 8), 0, 0, 4), FusionCriterion())
    assert result.mask.area == 0
    assert result.warning


def test_min_area_prefilter():
    reference = square((16, 16), 0, 0, 8)
    tiny = square((16, 16), 0, 0, 2)
    result = fuse_masks([tiny], reference, FusionCriterion('ioc', 0.5, min_area=5))
    assert result.survivors == 0


def test_threshold_monotonicity(rng):
    for _ in range(100):
        size = (24, 24)
        reference = square(size, *rng.integers(0, 12, size=2), int(rng.integers(4, 12)))
        candidates = [square(size, *rng.integers(0, 20, size=2), int(rng.integers(1, 10)), int(rng.integers(1, 10)))
                      for _ in range(5)]
        kind = 'iou' if rng.random() < 0.5 else 'ioc'
        low, high = sorted(rng.uniform(0, 1, size=2))
        loose = fuse_masks(candidates, reference, FusionCriterion(kind, low)).mask.bits
        strict = fuse_masks(candidates, reference, FusionCriterion(kind, high)).mask.bits
        assert not np.any(strict & ~loose)


def test_presets():
    assert CRITERIA_PRESETS['atrw'].kind == 'iou' and CRITERIA_PRESETS['atrw'].threshold == 0.3
    assert CRITERIA_PRESETS['elpephants'].kind == 'ioc' and CRITERIA_PRESETS['elpephants'].threshold == 0.5
    assert CRITERIA_PRESETS['yakreid'].kind == 'passthrough'


# ==================== Удаление фона ====================

def test_apply_all_ones_is_identity(rng):
    image = rng.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
    masked = apply_mask(image, BinaryMask(np.ones((6, 7))), (9, 9, 9))
    assert np.array_equal(masked.pixels, image)


def test_apply_all_zeros_is_fill(rng):
    image = rng.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
    masked = apply_mask(image, BinaryMask.zeros(6, 7), (10, 20, 30))
    assert np.all(masked.pixels == np.array([10, 20, 30], dtype=np.uint8))


def test_apply_checkerboard_blanks_half():
    image = np.full((8, 8, 3), 200, dtype=np.uint8)
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(bool)
    masked = apply_mask(image, BinaryMask(board), (0, 0, 0))
    assert int(np.all(masked.pixels == 0, axis=-1).sum()) == 32


def test_apply_shape_mismatch():
    with pytest.raises(MaskShapeError):
        apply_mask(np.zeros((4, 4, 3), dtype=np.uint8), BinaryMask.zeros(4, 5))


# ==================== Файлы ====================

def test_rle_literal_encoding():
    mask = BinaryMask(np.array([[1, 1, 0], [0, 0, 1]]))
    assert encode_rle(mask) == "2 3\n0 2 3 1\n"
    assert decode_rle("2 3\n0 2 3 1\n") == mask


def test_rle_bad_run_sum():
    with pytest.raises(ValueError):
        decode_rle("2 2\n1 1\n")


@pytest.mark.parametrize('text', ['', '\n', '7\n1 2\n', '2 2\n-1 5\n'])
def test_rle_malformed_header_rejected(text):
    with pytest.raises(ValueError):
        decode_rle(text)


def test_soft_reference_binarized_at_half_peak(tmp_path):
    from PIL import Image

    values = np.array([[0, 50, 100], [101, 200, 0]], dtype=np.uint8)
    path = str(tmp_path / 'soft.png')
    Image.fromarray(values).save(path)
    mask = load_mask(path, soft=True)
    assert mask.bits.tolist() == [[False, False, True], [True, True, False]]
    assert load_mask(path).area == 4


def _write_entry(root, name, reference, candidates, size=(16, 16)):
    write_image(np.full(size + (3,), 128, dtype=np.uint8), os.path.join(root, 'images', name))
    stem = os.path.splitext(name)[0]
    if reference is not None:
        save_mask(reference, os.path.join(root, 'reference', stem + '.png'))
    for i, candidate in enumerate(candidates):
        save_mask(candidate, os.path.join(root, 'candidates', stem, f"{i}.png"))


def test_batch_fuse_report_and_outputs(tmp_path):
    root = str(tmp_path)
    reference = square((16, 16), 4, 4, 8)
    _write_entry(root, 'a.png', reference, [reference])
    _write_entry(root, 'b.png', reference, [reference, square((16, 16), 0, 0, 2)])
    _write_entry(root, 'c.png', None, [reference])
    _write_entry(root, 'd.png', reference, [square((16, 16), 0, 12, 3)])
    out = os.path.join(root, 'out')

    report = batch_fuse(['a.png', 'b.png', 'c.png', 'd.png'], os.path.join(root, 'images'),
                        os.path.join(root, 'candidates'), os.path.join(root, 'reference'), out,
                        FusionCriterion('iou', 0.3), workers=3)

    assert report['path'].tolist() == ['a.png', 'b.png', 'c.png', 'd.png']
    assert report['status'].tolist() == ['ok', 'ok', 'skipped', 'warning']
    assert report['survivors'].tolist() == [1, 1, 0, 0]
    assert os.path.exists(os.path.join(out, 'masks', 'a.png'))
    assert not os.path.exists(os.path.join(out, 'masks', 'c.png'))
    assert load_mask(os.path.join(out, 'masks', 'd.png')).area == 0
    fused_b = read_image(os.path.join(out, 'images', 'b.png'))
    assert np.all(fused_b[0, 0] == 0)
    assert np.all(fused_b[8, 8] == 128)


def test_batch_fuse_unreadable_candidate_continues(tmp_path):
    root = str(tmp_path)
    reference = square((16, 16), 4, 4, 8)
    _write_entry(root, 'a.png', reference, [reference])
    _write_entry(root, 'b.png', reference, [])
    os.makedirs(os.path.join(root, 'candidates', 'b'))
    with open(os.path.join(root, 'candidates', 'b', 'broken.png'), 'w') as f:
        f.write('not an image')
    report = batch_fuse(['a.png', 'b.png'], os.path.join(root, 'images'), os.path.join(root, 'candidates'),
                        os.path.join(root, 'reference'), os.path.join(root, 'out'), FusionCriterion())
    assert report['status'].tolist() == ['ok', 'error']


def test_batch_fuse_empty_rle_candidate_reports_error(tmp_path):
    root = str(tmp_path)
    reference = square((16, 16), 4, 4, 8)
    for name in ('a.png', 'b.png', 'c.png'):
        _write_entry(root, name, reference, [reference])
    open(os.path.join(root, 'candidates', 'a', 'empty.rle'), 'w').close()
    report = batch_fuse(['a.png', 'b.png', 'c.png'], os.path.join(root, 'images'),
                        os.path.join(root, 'candidates'), os.path.join(root, 'reference'),
                        os.path.join(root, 'out'), FusionCriterion(), workers=1)
    assert report['path'].tolist() == ['a.png', 'b.png', 'c.png']
    assert report['status'].tolist() == ['error', 'ok', 'ok']
    assert 'RLE' in report.loc[0, 'message']
