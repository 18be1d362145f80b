import dataclasses
import os

import pytest
import torch

from config import ConfigError
from datacore import AugmentationConfig, load_manifest, with_image_root
from evalkit import EvalConfig
from logger import read_step_log
from losskit import LossCounters
from nettower import ReIDNet, load_checkpoint
from trainer import (TABLE_ABLATION_GRID, AblationRow, TrainConfig, ablation_run, build_optimizer, clip_gradients,
                     compute_losses, config_for_row, lambda_sweep_grid, lr_at, set_learning_rates, train,
                     validate_ablation_row, validate_train_config)


def quick_config(**changes):
    config = TrainConfig(epochs=2, freeze_epochs=1, lr_backbone=0.01, lr_heads=0.05, batch_size=8,
                         instances=2, val_fraction=0.0, log_every=1)
    return dataclasses.replace(config, **changes)


@pytest.fixture
def toy_manifests(toy_data):
    train_manifest = with_image_root(load_manifest(toy_data['train_manifest']), toy_data['original_root'])
    test_manifest = with_image_root(load_manifest(toy_data['test_manifest']), toy_data['original_root'])
    return train_manifest, test_manifest


@pytest.fixture
def aug():
    return AugmentationConfig(target_size=32, resize_size=36)


# ==================== Расписание и оптимизатор ====================

def test_lr_drop_at_two_thirds():
    config = TrainConfig(epochs=9, lr_backbone=0.001, lr_heads=0.01)
    assert lr_at(5, config) == (0.001, 0.01)
    assert lr_at(6, config) == pytest.approx((0.0001, 0.001))
    assert lr_at(52, TrainConfig(epochs=80))[0] == 0.001
    assert lr_at(53, TrainConfig(epochs=80))[0] == pytest.approx(0.0001)


def test_lr_outside_range():
    with pytest.raises(ValueError):
        lr_at(9, TrainConfig(epochs=9))
    with pytest.raises(ValueError):
        lr_at(-1, TrainConfig(epochs=9))


def test_optimizer_groups_cover_parameters(tiny_config):
    model = ReIDNet(tiny_config, num_classes=4)
    optimizer = build_optimizer(model, TrainConfig())
    assert len(optimizer.param_groups) == 4
    assert [g['kind'] for g in optimizer.param_groups] == ['backbone', 'backbone', 'heads', 'heads']
    grouped = [id(p) for g in optimizer.param_groups for p in g['params']]
    assert sorted(grouped) == sorted(id(p) for p in model.parameters())
    for group in optimizer.param_groups:
        if group['weight_decay'] == 0.0:
            assert all(p.dim() <= 1 for p in group['params'])


def test_warmup_ramps_learning_rate():
    config = TrainConfig(epochs=9, warmup_epochs=2, lr_backbone=0.003, lr_heads=0.03)
    assert lr_at(0, config) == pytest.approx((0.001, 0.01))
    assert lr_at(1, config) == pytest.approx((0.002, 0.02))
    assert lr_at(2, config) == pytest.approx((0.003, 0.03))
    assert lr_at(6, config) == pytest.approx((0.0003, 0.003))
    assert not validate_train_config(TrainConfig(epochs=3, freeze_epochs=1, warmup_epochs=3))[0]
    assert not validate_train_config(TrainConfig(grad_clip=-1.0))[0]


def test_clip_gradients_bounds_norm(tiny_config):
    torch.manual_seed(0)
    model = ReIDNet(tiny_config, num_classes=4)
    out = model(torch.randn(4, 3, 32, 32))
    (1000.0 * out.id_logits.pow(2).sum()).backward()
    before = clip_gradients(model, 0.0)
    assert before > 1.0
    assert clip_gradients(model, 1.0) == pytest.approx(before, rel=1e-5)
    after = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad)
                                                  for p in model.parameters() if p.grad is not None]))
    assert float(after) <= 1.0 + 1e-4


def test_set_learning_rates(tiny_config):
    model = ReIDNet(tiny_config, num_classes=4)
    config = TrainConfig(epochs=3, lr_backbone=0.002, lr_heads=0.02)
    optimizer = build_optimizer(model, config)
    set_learning_rates(optimizer, 2, config)
    rates = {g['kind']: g['lr'] for g in optimizer.param_groups}
    assert rates == pytest.approx({'backbone': 0.0002, 'heads': 0.002})


def test_validate_train_config():
    assert validate_train_config(TrainConfig()) == (True, None)
    assert not validate_train_config(TrainConfig(epochs=3, freeze_epochs=3))[0]
    ok, message = validate_train_config(TrainConfig(batch_size=16, instances=3))
    assert not ok and '16' in message
    assert validate_train_config(TrainConfig(batch_size=16, instances=3, use_sampler=False))[0]
    assert not validate_train_config(TrainConfig(use_id=False, use_lr=False, use_reid=False, use_dve=False))[0]


# ==================== Потери шага ====================

def test_compute_losses_respects_switches(tiny_config):
    torch.manual_seed(0)
    model = ReIDNet(tiny_config, num_classes=2)
    images = torch.randn(4, 3, 32, 32)
    labels = torch.tensor([0, 0, 1, 1])
    sides = torch.tensor([0.0, 1.0, 0.0, 1.0])
    config = TrainConfig(use_dve=False, use_lr=False)
    total, breakdown = compute_losses(model, images, labels, sides, config, LossCounters(), warp_seed=1)
    assert breakdown['L_DVE'] == 0.0
    assert breakdown['L_LR'] == 0.0
    assert breakdown['total'] == pytest.approx(breakdown['L_ID'] + 2.0 * breakdown['L_reID'], rel=1e-5)
    total.backward()


def test_compute_losses_deterministic_warp(tiny_config):
    torch.manual_seed(0)
    model = ReIDNet(tiny_config, num_classes=2).eval()
    images = torch.randn(4, 3, 32, 32)
    labels = torch.tensor([0, 0, 1, 1])
    sides = torch.zeros(4)
    config = TrainConfig(use_id=False, use_lr=False, use_reid=False)
    _, first = compute_losses(model, images, labels, sides, config, LossCounters(), warp_seed=5)
    _, second = compute_losses(model, images, labels, sides, config, LossCounters(), warp_seed=5)
    assert first['L_DVE'] == second['L_DVE'] > 0


# ==================== Цикл обучения ====================

def test_quick_train_writes_logs_and_checkpoint(tmp_path, toy_manifests, tiny_config, aug):
    train_manifest, _ = toy_manifests
    out_dir = str(tmp_path / 'run')
    result = train(quick_config(), tiny_config, aug, train_manifest, out_dir, seed=0)
    assert len(result.history) == 2
    assert result.history[0]['frozen'] and not result.history[1]['frozen']
    assert result.best_checkpoint is None
    assert os.path.exists(result.final_checkpoint)
    steps = read_step_log(os.path.join(out_dir, 'steps.jsonl'))
    assert steps and {'step', 'epoch', 'L_ID', 'L_LR', 'L_reID', 'L_DVE', 'total'} <= set(steps[0])
    assert [e['epoch'] for e in read_step_log(os.path.join(out_dir, 'epochs.jsonl'))] == [0, 1]
    payload = load_checkpoint(result.final_checkpoint)
    assert payload['epoch'] == 1
    assert payload['entity_map'] == train_manifest.entity_map


def test_high_head_rate_stays_bounded_with_clipping(tmp_path, toy_manifests, tiny_config, aug):
    train_manifest, _ = toy_manifests
    out_dir = str(tmp_path / 'run')
    train(quick_config(lr_heads=0.05, grad_clip=1.0, epochs=3), tiny_config, aug, train_manifest, out_dir, seed=0)
    steps = read_step_log(os.path.join(out_dir, 'steps.jsonl'))
    assert all(isinstance(s['grad_norm'], float) for s in steps)
    assert max(s['L_ID'] for s in steps) < 10.0
    assert max(s['L_LR'] for s in steps) < 10.0


def test_train_with_validation_keeps_best(tmp_path, toy_manifests, tiny_config, aug):
    train_manifest, _ = toy_manifests
    config = quick_config(val_fraction=0.25, batch_size=4)
    result = train(config, tiny_config, aug, train_manifest, str(tmp_path / 'run'), seed=0)
    assert result.best_checkpoint is not None
    assert all('val_mAP' in h for h in result.history)
    best = load_checkpoint(result.best_checkpoint)
    assert best['best_map'] == max(h['val_mAP'] for h in result.history)


def test_train_same_seed_same_losses(tmp_path, toy_manifests, tiny_config, aug):
    train_manifest, _ = toy_manifests
    config = quick_config(epochs=1, freeze_epochs=0)
    first = train(config, tiny_config, aug, train_manifest, str(tmp_path / 'a'), seed=3)
    second = train(config, tiny_config, aug, train_manifest, str(tmp_path / 'b'), seed=3)
    assert first.history[0]['total'] == second.history[0]['total']


def test_train_rejects_size_mismatch(tmp_path, toy_manifests, tiny_config):
    train_manifest, _ = toy_manifests
    with pytest.raises(ConfigError) as info:
        train(quick_config(), tiny_config, AugmentationConfig(target_size=64, resize_size=72),
              train_manifest, str(tmp_path), seed=0)
    assert info.value.key == 'AUG_TARGET_SIZE'


def test_train_rejects_infeasible_plan(tmp_path, toy_manifests, tiny_config, aug):
    train_manifest, _ = toy_manifests
    with pytest.raises(ConfigError):
        train(quick_config(batch_size=10, instances=1), tiny_config, aug, train_manifest, str(tmp_path), seed=0)


@pytest.mark.slow
def test_resume_matches_uninterrupted(tmp_path, toy_manifests, tiny_config, aug):
    # при E=3 и E=4 снижение скорости приходится на эпоху 2
    train_manifest, _ = toy_manifests
    full = train(quick_config(epochs=4), tiny_config, aug, train_manifest, str(tmp_path / 'full'), seed=1)
    partial_dir = str(tmp_path / 'partial')
    partial = train(quick_config(epochs=3), tiny_config, aug, train_manifest, partial_dir, seed=1)
    assert load_checkpoint(partial.final_checkpoint)['epoch'] == 2
    resumed = train(quick_config(epochs=4), tiny_config, aug, train_manifest, partial_dir, seed=1,
                    resume=partial.final_checkpoint)
    assert len(resumed.history) == 4
    for key in ('L_ID', 'L_LR', 'L_reID', 'L_DVE', 'total'):
        assert resumed.history[3][key] == pytest.approx(full.history[3][key], rel=1e-5)


# ==================== Абляции ====================

def test_ablation_grid_rows():
    assert len(TABLE_ABLATION_GRID) == 9
    assert TABLE_ABLATION_GRID[-1].label() == 'DVE+ID+ReID+LR+BS'
    assert all(validate_ablation_row(row)[0] for row in TABLE_ABLATION_GRID)
    assert not validate_ablation_row(AblationRow(sampler=True))[0]


def test_lambda_grid():
    grid = lambda_sweep_grid()
    assert len(grid) == 33
    assert grid[0] == (1.0, 0.0)
    assert grid[-1] == (5.0, 2.0)
    assert (2.0, 0.2) in grid


def test_config_for_row():
    config = config_for_row(TrainConfig(), AblationRow(reid=True, lr=True))
    assert (config.use_dve, config.use_id, config.use_reid, config.use_lr, config.use_sampler) == \
           (False, False, True, True, False)


def test_ablation_rejects_empty_row_before_training(tmp_path, toy_manifests, tiny_config, aug):
    train_manifest, test_manifest = toy_manifests
    grid = [AblationRow(id=True), AblationRow()]
    with pytest.raises(ConfigError):
        ablation_run(quick_config(), grid, tiny_config, aug, train_manifest, test_manifest,
                     EvalConfig(), str(tmp_path))
    assert not os.listdir(tmp_path)


def test_ablation_single_row_table(tmp_path, toy_manifests, tiny_config, aug):
    train_manifest, test_manifest = toy_manifests
    table = ablation_run(quick_config(epochs=1, freeze_epochs=0), [AblationRow(id=True, reid=True, sampler=True)],
                         tiny_config, aug, train_manifest, test_manifest, EvalConfig(protocol='plain'),
                         str(tmp_path))
    assert list(table.columns) == ['L_DVE', 'L_ID', 'L_ReID', 'L_LR', 'B.S.', 'mAP', 'R@1']
    assert 0.0 < table.loc[0, 'mAP'] <= 1.0
