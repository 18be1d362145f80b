import collections
import os

import numpy as np
import pytest

from config import ConfigError
from datacore import (AugmentationConfig, BatchPlan, DatasetManifest, ManifestError, SampleError,
                      SampleRecord, augment, augment_pixels, derive_seed, flip_sample,
                      holdout_identities, load_manifest, make_side_entities, random_batches,
                      sample_batches, save_manifest, validate_disjoint, with_image_root)


def write_manifest(tmp_path, text, name='m.csv'):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return str(path)


def make_manifest(counts):
    """Манифест с заданным числом изображений на сущность."""
    records = []
    for entity, count in enumerate(counts):
        for k in range(count):
            records.append(SampleRecord(f"e{entity}_{k}.png", entity, k % 2, None, None, f"ent{entity}"))
    return DatasetManifest('synthetic', records)


# ==================== Манифесты ====================

def test_dense_entity_remap(tmp_path):
    path = write_manifest(tmp_path, "path,entity,orientation\n"
                                    "a.png,tiger7,L\nb.png,tiger7,R\nc.png,tiger2,L\n"
                                    "d.png,tiger9,R\ne.png,tiger2,R\nf.png,tiger9,L\n")
    manifest = load_manifest(path)
    assert manifest.num_entities == 3
    assert [r.entity_id for r in manifest.records] == [0, 0, 1, 2, 1, 2]
    assert manifest.entity_map == {'tiger7': 0, 'tiger2': 1, 'tiger9': 2}
    assert [r.orientation for r in manifest.records] == [0, 1, 0, 1, 1, 0]


def test_missing_column_named(tmp_path):
    path = write_manifest(tmp_path, "path,entity\na.png,x\n")
    with pytest.raises(ManifestError, match='orientation'):
        load_manifest(path)


def test_unknown_orientation_reports_line(tmp_path):
    path = write_manifest(tmp_path, "# reid-manifest v1\npath,entity,orientation\na.png,x,L\nb.png,x,up\n")
    with pytest.raises(ManifestError, match='строка 4'):
        load_manifest(path)


def test_unsupported_version(tmp_path):
    path = write_manifest(tmp_path, "# reid-manifest v2\npath,entity,orientation\na.png,x,L\n")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_duplicate_paths_kept_with_warning(tmp_path):
    path = write_manifest(tmp_path, "path,entity,orientation\na.png,x,L\na.png,x,L\nb.png,y,R\n")
    manifest = load_manifest(path)
    assert len(manifest) == 3
    assert len(manifest.warnings) == 1
    assert 'a.png' in manifest.warnings[0]


def test_split_filter_and_cameras(tmp_path):
    path = write_manifest(tmp_path, "path\tentity\torientation\tcamera\tsplit\n"
                                    "a.png\tx\tL\t0\ttrain\nb.png\ty\tR\t1\tquery\n"
                                    "c.png\ty\tL\t0\tgallery\n", name='m.tsv')
    test = load_manifest(path, split='test')
    assert [r.image_path for r in test.records] == ['b.png', 'c.png']
    assert test.has_cameras
    assert [r.camera_id for r in test.records] == [1, 0]
    train = load_manifest(path, split='train')
    assert len(train) == 1


def test_save_and_reload_keeps_labels(tmp_path):
    path = write_manifest(tmp_path, "path,entity,orientation,camera\na.png,x,R,1\nb.png,y,L,0\n")
    manifest = load_manifest(path)
    out = str(tmp_path / 'copy.csv')
    save_manifest(manifest, out)
    with open(out, encoding='utf-8') as f:
        assert f.readline().strip() == '# reid-manifest v1'
    again = load_manifest(out)
    assert [(r.raw_entity, r.orientation, r.camera_id) for r in again.records] == [('x', 1, 1), ('y', 0, 0)]


def test_side_entities():
    both = DatasetManifest('m', [SampleRecord('a', 0, 0, raw_entity='a'), SampleRecord('b', 0, 1, raw_entity='a'),
                                 SampleRecord('c', 1, 0, raw_entity='b'), SampleRecord('d', 1, 1, raw_entity='b')])
    assert make_side_entities(both).num_entities == 4
    left_only = DatasetManifest('m', [SampleRecord('a', 0, 0, raw_entity='a'), SampleRecord('b', 0, 0, raw_entity='a')])
    assert make_side_entities(left_only).num_entities == 1
    mixed = DatasetManifest('m', [SampleRecord('a', 0, 0, raw_entity='a'), SampleRecord('b', 0, 1, raw_entity='a'),
                                  SampleRecord('c', 1, 1, raw_entity='b'), SampleRecord('d', 1, 1, raw_entity='b')])
    sided = make_side_entities(mixed)
    assert sided.num_entities == 3
    assert [r.entity_id for r in sided.records] == [0, 1, 2, 2]


def test_validate_disjoint():
    train = make_manifest([2, 2])
    test = DatasetManifest('t', [SampleRecord('z.png', 0, 0, raw_entity='ent1')])
    ok, message = validate_disjoint(train, test)
    assert not ok
    assert 'ent1' in message
    other = DatasetManifest('t', [SampleRecord('z.png', 0, 0, raw_entity='new')])
    assert validate_disjoint(train, other) == (True, None)


def test_validate_disjoint_after_side_split():
    train = make_side_entities(make_manifest([2, 2]))
    assert train.raw_entities() == {'ent0/L', 'ent0/R', 'ent1/L', 'ent1/R'}
    test = DatasetManifest('t', [SampleRecord('z.png', 0, 1, raw_entity='ent1')])
    ok, message = validate_disjoint(train, test)
    assert not ok
    assert 'ent1' in message
    assert validate_disjoint(make_side_entities(test), make_manifest([2])) == (True, None)


def test_holdout_keeps_both_sides_together():
    sided = make_side_entities(make_manifest([4] * 10))
    assert sided.num_entities == 20
    train, val = holdout_identities(sided, 0.2, seed=1)
    assert train.base_entities().isdisjoint(val.base_entities())
    assert val.num_entities == 2 * len(val.base_entities())


def test_holdout_identities_disjoint():
    manifest = make_manifest([3] * 20)
    train, val = holdout_identities(manifest, 0.1, seed=0)
    assert val.num_entities == 2
    assert train.num_entities == 18
    assert not (train.raw_entities() & val.raw_entities())
    assert sorted(r.entity_id for r in train.records)[-1] == 17
    assert holdout_identities(manifest, 0.0, seed=0)[1] is None


def test_with_image_root_drops_masks():
    manifest = DatasetManifest('m', [SampleRecord('a.png', 0, 0, mask_path='/m/a.png', raw_entity='a')], root='/x')
    moved = with_image_root(manifest, '/y', keep_masks=False)
    assert moved.resolve(moved.records[0]) == os.path.join('/y', 'a.png')
    assert moved.records[0].mask_path is None
    assert manifest.records[0].mask_path == '/m/a.png'


# ==================== Пакеты ====================

def test_pk_batch_composition():
    manifest = make_manifest([5] * 12)
    plan = BatchPlan(10, 3)
    batches = list(sample_batches(manifest, plan, seed=3))
    assert plan.batch_size == 30
    for batch in batches:
        assert len(batch) == 30
        counts = collections.Counter(manifest.records[i].entity_id for i in batch)
        assert len(counts) == 10
        assert set(counts.values()) == {3}
    covered = {manifest.records[i].entity_id for batch in batches for i in batch}
    assert covered == set(range(12))


def test_pk_single_image_identity_repeated():
    manifest = make_manifest([1, 4, 4])
    batch = next(sample_batches(manifest, BatchPlan(3, 3), seed=0))
    assert batch.count(0) == 3


def test_pk_determinism():
    manifest = make_manifest([4] * 8)
    plan = BatchPlan(4, 2)
    assert list(sample_batches(manifest, plan, 7, 1)) == list(sample_batches(manifest, plan, 7, 1))
    assert list(sample_batches(manifest, plan, 7, 1)) != list(sample_batches(manifest, plan, 7, 2))


def test_pk_too_many_identities():
    with pytest.raises(ConfigError):
        next(sample_batches(make_manifest([3, 3]), BatchPlan(3, 2), seed=0))


def test_batch_size_must_divide():
    assert BatchPlan.from_batch_size(30, 3) == BatchPlan(10, 3)
    with pytest.raises(ConfigError):
        BatchPlan.from_batch_size(16, 3)


def test_random_batches_cover_records():
    manifest = make_manifest([3] * 5)
    batches = list(random_batches(manifest, 4, seed=0))
    assert [len(b) for b in batches] == [4, 4, 4, 3]
    assert sorted(i for b in batches for i in b) == list(range(15))


def test_derive_seed_varies():
    assert derive_seed(0, 0, 0) == derive_seed(0, 0, 0)
    assert len({derive_seed(0, e, i) for e in range(3) for i in range(3)}) == 9


# ==================== Аугментации ====================

def test_flip_inverts_orientation():
    pixels = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    flipped, orientation = flip_sample(pixels, 0)
    assert orientation == 1
    assert np.array_equal(flipped[:, 0], pixels[:, 2])


def test_flip_probability_zero_keeps_orientation(rng):
    config = AugmentationConfig(target_size=16, resize_size=16, crop=False, flip_prob=0.0, erase_prob=0.0)
    pixels = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    result = augment_pixels(pixels, 0, config, rng)
    assert result.orientation == 0
    assert np.array_equal(result.pixels, pixels)


def test_flip_probability_one(rng):
    config = AugmentationConfig(target_size=16, resize_size=16, crop=False, flip_prob=1.0, erase_prob=0.0)
    pixels = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    result = augment_pixels(pixels, 0, config, rng)
    assert result.orientation == 1
    assert np.array_equal(result.pixels, pixels[:, ::-1])


def test_erase_fraction_matches_area():
    config = AugmentationConfig(target_size=224, resize_size=224, crop=False, flip_prob=0.0, erase_prob=1.0,
                                erase_area=(0.1, 0.1), erase_aspect=(1.0, 1.0), erase_fill=(7, 7, 7))
    pixels = np.full((224, 224, 3), 200, dtype=np.uint8)
    result = augment_pixels(pixels, 1, config, np.random.default_rng(0))
    erased = int(np.all(result.pixels == 7, axis=-1).sum())
    side = int(round((0.1 * 224 * 224) ** 0.5))
    assert erased == side * side
    assert abs(erased - int(0.1 * 224 * 224)) <= 2 * side


def test_augment_applies_mask_before_geometry(toy_data):
    manifest = load_manifest(toy_data['train_manifest'])
    manifest = with_image_root(manifest, toy_data['original_root'])
    record = manifest.records[0].replace(mask_path=os.path.join(toy_data['gt_masks'], manifest.records[0].image_path))
    config = AugmentationConfig(target_size=32, resize_size=32, crop=False, flip_prob=0.0, erase_prob=0.0)
    result = augment(manifest, record, config, seed=0)
    assert result.pixels.shape == (32, 32, 3)
    assert np.all(result.pixels[0, 0] == 0)


def test_unreadable_sample(tmp_path):
    manifest = DatasetManifest('m', [SampleRecord('missing.png', 0, 0, raw_entity='a')], root=str(tmp_path))
    with pytest.raises(SampleError):
        augment(manifest, manifest.records[0], AugmentationConfig(), seed=0)
