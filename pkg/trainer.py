"""
Модуль обучения модели.

Группы параметров оптимизатора, расписание скорости обучения, заморозка
основы на первых эпохах, цикл обучения с журналом шагов, контрольные
точки (последняя и лучшая по валидации) и абляционные запуски.
"""
import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import pandas as pd
import torch

from config import ConfigError
from datacore import (AugmentationConfig, BatchPlan, DatasetManifest, augment, channel_mean,
                      derive_seed, holdout_identities, random_batches, sample_batches,
                      validate_batch_plan)
from evalkit import EvalConfig, evaluate_store, extract_features
from logger import StepLog, get_logger, log_action
from losskit import (CircleParams, LossCounters, LossWeights, NonFiniteLossError, WarpField,
                     circle_batch_loss, dve_loss, id_loss, lr_loss, pick_auxiliary, total_loss)
from nettower import (ModelConfig, ReIDNet, load_checkpoint, model_from_checkpoint, save_checkpoint,
                      to_input_tensor)

# Номера потоков случайности эпохи (сверх позиций образцов в пакетах)
TORCH_STREAM = 2 ** 31 - 1
WARP_STREAM = 2 ** 31 - 2


@dataclass
class TrainConfig:
    """Параметры обучения (ключи TRAIN_*)."""
    epochs: int = 80
    freeze_epochs: int = 3
    lr_backbone: float = 0.001
    lr_heads: float = 0.01
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 30
    instances: int = 3
    use_sampler: bool = True
    use_id: bool = True
    use_lr: bool = True
    use_reid: bool = True
    use_dve: bool = True
    lambda_reid: float = 2.0
    lambda_dve: float = 0.2
    label_smoothing: float = 0.1
    circle_gamma: float = 64.0
    circle_margin: float = 0.25
    dve_temperature: Optional[float] = None
    dve_queries: Optional[int] = None
    warp_strength: float = 1.0
    warmup_epochs: int = 0
    grad_clip: float = 5.0
    val_fraction: float = 0.1
    log_every: int = 10


def validate_train_config(config: TrainConfig) -> Tuple[bool, Optional[str]]:
    """
    Проверить параметры обучения.

    Returns:
        Кортеж (успешность проверки, сообщение об ошибке или None)
    """
    if config.epochs < 1:
        return False, "число эпох должно быть положительным"
    if not 0 <= config.freeze_epochs < config.epochs:
        return False, f"freeze_epochs={config.freeze_epochs} должно быть меньше epochs={config.epochs}"
    if config.lr_backbone <= 0 or config.lr_heads <= 0 or config.lr_drop_factor <= 0:
        return False, "скорости обучения и множитель снижения должны быть положительными"
    if config.weight_decay < 0 or not 0 <= config.momentum < 1:
        return False, "некорректные momentum или weight_decay"
    if config.batch_size < 2:
        return False, "размер пакета должен быть не меньше 2"
    if config.use_sampler and (config.instances < 1 or config.batch_size % config.instances):
        return False, f"размер пакета {config.batch_size} не делится на K={config.instances}"
    if not any((config.use_id, config.use_lr, config.use_reid, config.use_dve)):
        return False, "не включено ни одной потери"
    if not 0 <= config.val_fraction < 1:
        return False, f"val_fraction {config.val_fraction} вне [0, 1)"
    if not 0 <= config.warmup_epochs < config.epochs:
        return False, f"warmup_epochs={config.warmup_epochs} должно быть в [0, epochs={config.epochs})"
    if config.grad_clip < 0:
        return False, "grad_clip не может быть отрицательным (0 - без ограничения)"
    return True, None


def lr_at(epoch: int, config: TrainConfig) -> Tuple[float, float]:
    """
    Скорости обучения (основа, головы) на эпохе.

    Первые warmup_epochs эпох скорость растёт линейно: (e+1)/(W+1) от базовой.
    Снижение в lr_drop_factor раз начиная с эпохи ⌊2E/3⌋ (счёт с нуля).

    Raises:
        ValueError: Эпоха вне [0, E)
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"эпоха {epoch} вне [0, {config.epochs})")
    factor = config.lr_drop_factor if epoch >= (2 * config.epochs) // 3 else 1.0
    if epoch < config.warmup_epochs:
        factor *= (epoch + 1) / (config.warmup_epochs + 1)
    return config.lr_backbone * factor, config.lr_heads * factor


def clip_gradients(model: torch.nn.Module, max_norm: float) -> float:
    """
    Ограничить общую норму градиентов модели.

    Args:
        model: Модель после backward
        max_norm: Порог нормы (0 - не ограничивать)

    Returns:
        Норма градиентов до ограничения
    """
    params = [p for p in model.parameters() if p.grad is not None]
    if not params:
        return 0.0
    if max_norm <= 0:
        return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in params])))
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def build_optimizer(model: ReIDNet, config: TrainConfig) -> torch.optim.SGD:
    """
    SGD с четырьмя группами: основа/головы × с затуханием/без.

    Смещения и параметры нормализации (одномерные тензоры) без weight decay.
    """
    groups = []
    for kind, params, lr in (('backbone', model.backbone_parameters(), config.lr_backbone),
                             ('heads', model.head_parameters(), config.lr_heads)):
        decay = [p for p in params if p.dim() > 1]
        no_decay = [p for p in params if p.dim() <= 1]
        groups.append({'params': decay, 'lr': lr, 'weight_decay': config.weight_decay, 'kind': kind})
        groups.append({'params': no_decay, 'lr': lr, 'weight_decay': 0.0, 'kind': kind})
    return torch.optim.SGD(groups, lr=config.lr_heads, momentum=config.momentum, nesterov=False)


def set_learning_rates(optimizer: torch.optim.Optimizer, epoch: int, config: TrainConfig) -> Tuple[float, float]:
    lr_backbone, lr_heads = lr_at(epoch, config)
    for group in optimizer.param_groups:
        group['lr'] = lr_backbone if group['kind'] == 'backbone' else lr_heads
    return lr_backbone, lr_heads


class TrainResult:
    """Итог обучения: пути к контрольным точкам и история по эпохам."""

    def __init__(self, final_checkpoint: str, best_checkpoint: Optional[str],
                 history: List[Dict], counters: LossCounters):
        self.final_checkpoint = final_checkpoint
        self.best_checkpoint = best_checkpoint
        self.history = history
        self.counters = counters


def _dump_nonfinite(out_dir: str, epoch: int, step: int, manifest: DatasetManifest,
                    batch: List[int], error: NonFiniteLossError) -> str:
    path = os.path.join(out_dir, 'nonfinite_batch.json')
    data = {
        'epoch': epoch,
        'step': step,
        'term': error.term,
        'value': str(error.value),
        'samples': [manifest.records[i].image_path for i in batch],
        'entities': [manifest.records[i].raw_entity for i in batch],
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
    return path


def _batch_tensors(manifest: DatasetManifest, batch: List[int], aug: AugmentationConfig,
                   model_config: ModelConfig, seed: int, epoch: int,
                   position: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pixels, labels, sides = [], [], []
    for offset, index in enumerate(batch):
        record = manifest.records[index]
        result = augment(manifest, record, aug, derive_seed(seed, epoch, position + offset))
        pixels.append(result.pixels)
        labels.append(record.entity_id)
        sides.append(result.orientation)
    return (to_input_tensor(pixels, model_config),
            torch.tensor(labels, dtype=torch.long),
            torch.tensor(sides, dtype=torch.float32))


def compute_losses(model: ReIDNet, images: torch.Tensor, labels: torch.Tensor, sides: torch.Tensor,
                   config: TrainConfig, counters: LossCounters,
                   warp_seed: int) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Прямой проход и взвешенная сумма потерь для одного пакета.

    Выключенные потери не вычисляются вовсе (в том числе вход DVE).

    Returns:
        Кортеж (итоговая потеря, значения слагаемых)
    """
    out = model(images)
    parts = {}
    if config.use_id:
        parts['id'] = id_loss(out.id_logits, labels, config.label_smoothing)
    if config.use_lr:
        parts['lr'] = lr_loss(out.lr_logit, sides)
    if config.use_reid and config.lambda_reid > 0:
        params = CircleParams(config.circle_gamma, config.circle_margin)
        parts['reid'] = circle_batch_loss(out.embedding, labels, params, counters)
    if config.use_dve and config.lambda_dve > 0:
        warp = WarpField(warp_seed, config.warp_strength)
        phi_warped = model.dve_descriptors(warp.apply(images))
        generator = torch.Generator().manual_seed(warp_seed)
        aux = pick_auxiliary(labels, generator)
        grid = warp.grid(out.dve.shape[2], out.dve.shape[3]).to(images.device)
        parts['dve'] = dve_loss(phi_warped, out.dve, out.dve[aux.to(images.device)], grid,
                                config.dve_temperature, config.dve_queries, counters, generator)
    weights = LossWeights(config.lambda_reid if config.use_reid else 0.0,
                          config.lambda_dve if config.use_dve else 0.0)
    return total_loss(parts, weights)


def _validation_map(model: ReIDNet, manifest: DatasetManifest, device: str) -> float:
    store = extract_features(model, manifest, device=device)
    return evaluate_store(store, EvalConfig(protocol='plain'))['mAP']


def train(config: TrainConfig, model_config: ModelConfig, aug: AugmentationConfig,
          manifest: DatasetManifest, out_dir: str, seed: int = 0, device: str = 'cpu',
          resume: Optional[str] = None) -> TrainResult:
    """
    Обучить модель на манифесте.

    Пишет в out_dir: steps.jsonl (потери по шагам), epochs.jsonl (сводка по
    эпохам), checkpoints/last.pt и checkpoints/best.pt (если есть валидация).

    Args:
        config: Параметры обучения
        model_config: Параметры модели
        aug: Параметры аугментаций
        manifest: Обучающий манифест
        out_dir: Каталог запуска
        seed: Глобальное зерно
        device: Устройство torch
        resume: Контрольная точка для продолжения

    Returns:
        TrainResult

    Raises:
        ConfigError: Некорректные параметры или невыполнимый план пакетов
        NonFiniteLossError: Потеря стала не конечной (пакет сохранён в nonfinite_batch.json)
    """
    logger = get_logger()
    ok, message = validate_train_config(config)
    if not ok:
        raise ConfigError('TRAIN', message)
    if aug.target_size != model_config.input_size:
        raise ConfigError('AUG_TARGET_SIZE',
                          f"размер аугментаций {aug.target_size} не равен MODEL_INPUT_SIZE={model_config.input_size}")

    train_manifest, val_manifest = holdout_identities(manifest, config.val_fraction, seed)
    plan = BatchPlan.from_batch_size(config.batch_size, config.instances) if config.use_sampler else None
    if plan is not None:
        ok, message = validate_batch_plan(train_manifest, plan)
        if not ok:
            raise ConfigError('TRAIN_BATCH_SIZE', message)
    if aug.erase_fill is None:
        aug = dataclasses.replace(aug, erase_fill=channel_mean(train_manifest))

    os.makedirs(os.path.join(out_dir, 'checkpoints'), exist_ok=True)
    last_path = os.path.join(out_dir, 'checkpoints', 'last.pt')
    best_path = os.path.join(out_dir, 'checkpoints', 'best.pt')

    torch.manual_seed(seed)
    model = ReIDNet(model_config, train_manifest.num_entities).to(device)
    optimizer = build_optimizer(model, config)
    history: List[Dict] = []
    start_epoch = 0
    best_map = -1.0
    if resume:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload['state_dict'])
        optimizer.load_state_dict(payload['optimizer'])
        history = list(payload.get('history', []))
        start_epoch = payload['epoch'] + 1
        best_map = payload.get('best_map', -1.0)
        logger.info(f"Продолжение обучения с эпохи {start_epoch} ({resume})")

    log_action(logger, "Обучение", f"сущностей={train_manifest.num_entities}, изображений={len(train_manifest)}, "
                                   f"валидация={'нет' if val_manifest is None else val_manifest.num_entities}")
    counters = LossCounters()
    best_written = best_path if resume and val_manifest is not None and os.path.exists(best_path) else None

    with StepLog(os.path.join(out_dir, 'steps.jsonl')) as steps, \
            StepLog(os.path.join(out_dir, 'epochs.jsonl')) as epochs_log:
        step = sum(h.get('steps', 0) for h in history)
        for epoch in range(start_epoch, config.epochs):
            torch.manual_seed(derive_seed(seed, epoch, TORCH_STREAM))
            model.train()
            model.freeze_backbone(epoch < config.freeze_epochs)
            lr_backbone, lr_heads = set_learning_rates(optimizer, epoch, config)

            if plan is not None:
                batches = sample_batches(train_manifest, plan, seed, epoch)
            else:
                batches = random_batches(train_manifest, config.batch_size, seed, epoch)

            sums: Dict[str, float] = {}
            epoch_steps = 0
            position = 0
            for batch in batches:
                images, labels, sides = _batch_tensors(train_manifest, batch, aug, model_config,
                                                       seed, epoch, position)
                position += len(batch)
                images, labels, sides = images.to(device), labels.to(device), sides.to(device)
                warp_seed = derive_seed(seed, epoch, WARP_STREAM - epoch_steps)
                try:
                    loss, breakdown = compute_losses(model, images, labels, sides, config, counters, warp_seed)
                except NonFiniteLossError as e:
                    dump = _dump_nonfinite(out_dir, epoch, step, train_manifest, batch, e)
                    logger.error(f"Обучение прервано: {e}. Пакет сохранён в {dump}")
                    raise
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                grad_norm = clip_gradients(model, config.grad_clip)
                optimizer.step()

                record = {'step': step, 'epoch': epoch, 'grad_norm': grad_norm, **breakdown}
                steps.write(record)
                for key, value in breakdown.items():
                    sums[key] = sums.get(key, 0.0) + value
                if config.log_every and step % config.log_every == 0:
                    logger.debug(f"Шаг {step}: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(breakdown.items())))
                step += 1
                epoch_steps += 1

            summary = {
                'epoch': epoch,
                'steps': epoch_steps,
                'lr_backbone': lr_backbone,
                'lr_heads': lr_heads,
                'frozen': epoch < config.freeze_epochs,
                **{k: v / max(epoch_steps, 1) for k, v in sums.items()},
                **counters.to_dict(),
            }
            if val_manifest is not None:
                summary['val_mAP'] = _validation_map(model, val_manifest, device)
            history.append(summary)
            epochs_log.write(summary)
            logger.info(f"Эпоха {epoch + 1}/{config.epochs}: потеря {summary.get('total', 0.0):.4f}"
                        + (f", mAP валидации {summary['val_mAP']:.4f}" if 'val_mAP' in summary else ''))

            extra = {
                'epoch': epoch,
                'optimizer': optimizer.state_dict(),
                'train_config': dataclasses.asdict(config),
                'history': history,
                'seed': seed,
                'best_map': best_map,
            }
            if val_manifest is not None and summary['val_mAP'] > best_map:
                best_map = summary['val_mAP']
                extra['best_map'] = best_map
                best_written = save_checkpoint(model, best_path, train_manifest.entity_map, extra)
            save_checkpoint(model, last_path, train_manifest.entity_map, extra)

    log_action(logger, "Обучение завершено", f"эпох={config.epochs}, контрольная точка={last_path}")
    return TrainResult(last_path, best_written, history, counters)


# ==================== Абляции ====================

@dataclass
class AblationRow:
    """Строка абляции: какие потери включены и используется ли выборка P×K."""
    dve: bool = False
    id: bool = False
    reid: bool = False
    lr: bool = False
    sampler: bool = False

    def label(self) -> str:
        parts = [name for name, on in (('DVE', self.dve), ('ID', self.id), ('ReID', self.reid),
                                       ('LR', self.lr), ('BS', self.sampler)) if on]
        return '+'.join(parts) or 'none'


TABLE_ABLATION_GRID = [
    AblationRow(id=True),
    AblationRow(reid=True),
    AblationRow(id=True, reid=True),
    AblationRow(id=True, lr=True),
    AblationRow(reid=True, lr=True),
    AblationRow(id=True, reid=True, lr=True),
    AblationRow(dve=True, id=True, reid=True, lr=True),
    AblationRow(id=True, reid=True, lr=True, sampler=True),
    AblationRow(dve=True, id=True, reid=True, lr=True, sampler=True),
]


def lambda_sweep_grid() -> List[Tuple[float, float]]:
    """Пары (λ_reID, λ_DVE): λ_DVE от 0 до 2 с шагом 0.2, λ_reID из {1, 2, 5}."""
    return [(reid, round(0.2 * i, 1)) for reid in (1.0, 2.0, 5.0) for i in range(11)]


def validate_ablation_row(row: AblationRow) -> Tuple[bool, Optional[str]]:
    if not any((row.dve, row.id, row.reid, row.lr)):
        return False, "в строке абляции не включено ни одной потери"
    return True, None


def config_for_row(base: TrainConfig, row: AblationRow) -> TrainConfig:
    return dataclasses.replace(base, use_dve=row.dve, use_id=row.id, use_reid=row.reid,
                               use_lr=row.lr, use_sampler=row.sampler)


def _headline(result: Dict[str, float]) -> Tuple[float, float, str]:
    if 'mmAP' in result:
        return result['mmAP'], result['R@1(c)'], 'R@1(c)'
    return result['mAP'], result['R@1'], 'R@1'


def ablation_run(base: TrainConfig, grid: List[AblationRow], model_config: ModelConfig,
                 aug: AugmentationConfig, train_manifest: DatasetManifest,
                 test_manifest: DatasetManifest, eval_config: EvalConfig, out_dir: str,
                 seed: int = 0, device: str = 'cpu') -> pd.DataFrame:
    """
    Обучить и оценить по модели на каждую строку абляции (без переранжирования).

    Returns:
        Таблица с колонками L_DVE, L_ID, L_ReID, L_LR, B.S., mAP, R@1(c) (или R@1)

    Raises:
        ConfigError: Строка без потерь (проверяется до начала обучения)
    """
    for index, row in enumerate(grid):
        ok, message = validate_ablation_row(row)
        if not ok:
            raise ConfigError('ablation', f"строка {index}: {message}")
    eval_config = dataclasses.replace(eval_config, rerank=False)
    rows = []
    for index, row in enumerate(grid):
        run_dir = os.path.join(out_dir, f"row{index:02d}_{row.label()}")
        result = train(config_for_row(base, row), model_config, aug, train_manifest, run_dir, seed, device)
        model, _ = model_from_checkpoint(result.final_checkpoint, device)
        metrics = evaluate_store(extract_features(model, test_manifest, eval_config.batch_size, device), eval_config)
        map_value, r1_value, r1_name = _headline(metrics)
        rows.append({'L_DVE': row.dve, 'L_ID': row.id, 'L_ReID': row.reid, 'L_LR': row.lr,
                     'B.S.': row.sampler, 'mAP': map_value, r1_name: r1_value})
        get_logger().info(f"Абляция {row.label()}: mAP={map_value:.4f}, {r1_name}={r1_value:.4f}")
    return pd.DataFrame(rows)


def lambda_sweep(base: TrainConfig, model_config: ModelConfig, aug: AugmentationConfig,
                 train_manifest: DatasetManifest, test_manifest: DatasetManifest,
                 eval_config: EvalConfig, out_dir: str, seed: int = 0, device: str = 'cpu',
                 pairs: Optional[List[Tuple[float, float]]] = None) -> pd.DataFrame:
    """Перебор весов (λ_reID, λ_DVE); полная сетка по умолчанию."""
    eval_config = dataclasses.replace(eval_config, rerank=False)
    rows = []
    for lambda_reid, lambda_dve in pairs or lambda_sweep_grid():
        config = dataclasses.replace(base, lambda_reid=lambda_reid, lambda_dve=lambda_dve)
        run_dir = os.path.join(out_dir, f"reid{lambda_reid:g}_dve{lambda_dve:g}")
        result = train(config, model_config, aug, train_manifest, run_dir, seed, device)
        model, _ = model_from_checkpoint(result.final_checkpoint, device)
        metrics = evaluate_store(extract_features(model, test_manifest, eval_config.batch_size, device), eval_config)
        map_value, r1_value, r1_name = _headline(metrics)
        rows.append({'lambda_reID': lambda_reid, 'lambda_DVE': lambda_dve, 'mAP': map_value, r1_name: r1_value})
    return pd.DataFrame(rows)
