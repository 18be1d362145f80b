"""
Главный файл приложения AnimalReID.
Интерфейс командной строки: слияние масок, обучение, оценка, таблицы
фонового смещения, абляции, межвидовой перенос и визуализация совпадений.
"""
import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import pandas as pd

from config import (ConfigError, apply_block, block_items, check_unknown_keys, coerce_value,
                    get_device, get_num_workers, load_flat_config, write_flat_config)
from datacore import (AugmentationConfig, DatasetManifest, load_manifest, make_side_entities,
                      validate_disjoint, with_image_root)
from evalkit import (EvalConfig, bias_grid, check_variant_dirs, evaluate_store, extract_features,
                     extract_from_checkpoint,
                     transfer_table, validate_eval_config)
from export import write_report
from logger import attach_run_log, get_logger, log_action
from maskpipe import CRITERIA_PRESETS, CRITERION_NAMES, FusionCriterion, batch_fuse, load_mask, read_image
from nettower import ModelConfig, model_from_checkpoint, validate_model_config
from partviz import MatchQuery, compare_models, match_point, render_panel
from toydata import make_toy_dataset
from trainer import (TABLE_ABLATION_GRID, TrainConfig, ablation_run, lambda_sweep, train,
                     validate_train_config)
from version import __version__

VARIANTS = ('original', 'masked')


# ==================== Конфигурация эксперимента ====================

@dataclass
class DataConfig:
    """Пути к данным (ключи DATA_*)."""
    train_manifest: str = ''
    test_manifest: str = ''
    original_root: str = ''
    masked_root: str = ''
    variant: str = 'original'
    side_entities: bool = False


@dataclass
class ExperimentConfig:
    """Полная конфигурация запуска: данные, модель, обучение, аугментации, оценка, зерно."""
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    BLOCKS = (('data', 'DATA_'), ('model', 'MODEL_'), ('train', 'TRAIN_'), ('aug', 'AUG_'), ('eval', 'EVAL_'))

    def items(self) -> List[Tuple[str, str]]:
        result = [('SEED', str(self.seed))]
        for attr, prefix in self.BLOCKS:
            result.extend(block_items(getattr(self, attr), prefix))
        return result

    def known_keys(self) -> List[str]:
        return [key for key, _ in self.items()]


def toy_preset() -> ExperimentConfig:
    """Параметры для синтетического набора и маленькой основы на CPU."""
    return ExperimentConfig(
        model=ModelConfig(backbone='toy', input_size=64, embed_dim=128, dve_dim=64, dropout=0.2),
        train=TrainConfig(epochs=30, freeze_epochs=1, lr_backbone=0.01, lr_heads=0.01, warmup_epochs=2,
                          grad_clip=5.0, batch_size=16, instances=4, val_fraction=0.0, log_every=5),
        aug=AugmentationConfig(target_size=64, resize_size=72),
        eval=EvalConfig(protocol='atrw', k1=10, k2=3),
    )


def validate_experiment_config(cfg: ExperimentConfig) -> None:
    """
    Проверить все блоки конфигурации.

    Raises:
        ConfigError: С указанием блока и причины
    """
    for key, (ok, message) in (('MODEL', validate_model_config(cfg.model)),
                               ('TRAIN', validate_train_config(cfg.train)),
                               ('EVAL', validate_eval_config(cfg.eval))):
        if not ok:
            raise ConfigError(key, message)
    if cfg.data.variant not in VARIANTS:
        raise ConfigError('DATA_VARIANT', f"допустимо: {', '.join(VARIANTS)}")
    if cfg.aug.target_size != cfg.model.input_size:
        raise ConfigError('AUG_TARGET_SIZE', f"должен совпадать с MODEL_INPUT_SIZE={cfg.model.input_size}")


def load_experiment_config(path: Optional[str] = None, toy: bool = False) -> ExperimentConfig:
    """
    Собрать конфигурацию: значения по умолчанию (или пресет toy), файл KEY=VALUE,
    переменные окружения.

    Args:
        path: Путь к файлу конфигурации (опционально)
        toy: Начать с пресета для синтетического набора

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: Неизвестный ключ, некорректное значение или несовместимые блоки
    """
    cfg = toy_preset() if toy else ExperimentConfig()
    values = load_flat_config(path) if path else {}
    unknown = check_unknown_keys(values, cfg.known_keys())
    if unknown:
        raise ConfigError(unknown, "неизвестный ключ конфигурации")
    changes = {}
    for attr, prefix in ExperimentConfig.BLOCKS:
        changes[attr], _ = apply_block(getattr(cfg, attr), values, prefix)
    raw_seed = os.environ.get('SEED', values.get('SEED'))
    if raw_seed is not None:
        changes['seed'] = coerce_value('SEED', raw_seed, int)
    cfg = dataclasses.replace(cfg, **changes)
    validate_experiment_config(cfg)
    return cfg


def dump_config(cfg: ExperimentConfig, path: str) -> None:
    write_flat_config(cfg.items(), path)


# ==================== Вспомогательные функции ====================

class RunDirectory:
    """Каталог запуска: config.resolved.env и run.log."""

    def __init__(self, out_dir: str, items: List[Tuple[str, str]]):
        self.out_dir = out_dir
        self.items = items
        self.handler = None

    def __enter__(self) -> 'RunDirectory':
        os.makedirs(self.out_dir, exist_ok=True)
        write_flat_config(self.items, os.path.join(self.out_dir, 'config.resolved.env'))
        self.handler = attach_run_log(get_logger(), self.out_dir)
        return self

    def __exit__(self, *exc) -> None:
        logger = get_logger()
        if self.handler is not None:
            logger.removeHandler(self.handler)
            self.handler.close()


def load_data_manifest(cfg: ExperimentConfig, path: str, split: Optional[str],
                       variant: Optional[str] = None) -> DatasetManifest:
    """
    Загрузить манифест и привязать его к каталогу нужного варианта изображений.

    Для варианта masked без DATA_MASKED_ROOT фон удаляется на лету по маскам
    из колонки mask.
    """
    if not path:
        raise ConfigError('DATA_TRAIN_MANIFEST' if split == 'train' else 'DATA_TEST_MANIFEST',
                          "не задан путь к манифесту")
    variant = variant or cfg.data.variant
    manifest = load_manifest(path, split)
    if variant == 'masked':
        if cfg.data.masked_root:
            manifest = with_image_root(manifest, cfg.data.masked_root, keep_masks=False)
        elif not all(r.mask_path for r in manifest.records):
            raise ConfigError('DATA_MASKED_ROOT', "нет каталога замаскированных изображений и колонки mask")
        elif cfg.data.original_root:
            manifest = with_image_root(manifest, cfg.data.original_root, keep_masks=True)
    else:
        manifest = with_image_root(manifest, cfg.data.original_root or manifest.root, keep_masks=False)
    if cfg.data.side_entities:
        manifest = make_side_entities(manifest)
    return manifest


def _toy_data(cfg: ExperimentConfig, out_dir: str, biased: bool = False) -> ExperimentConfig:
    """Сгенерировать синтетический набор, если пути к данным не заданы."""
    if cfg.data.train_manifest and cfg.data.test_manifest:
        return cfg
    paths = make_toy_dataset(os.path.join(out_dir, 'toy_data'), biased=biased, seed=cfg.seed)
    data = dataclasses.replace(cfg.data, train_manifest=paths['train_manifest'],
                               test_manifest=paths['test_manifest'],
                               original_root=paths['original_root'], masked_root=paths['masked_root'])
    return dataclasses.replace(cfg, data=data)


def _parse_pairs(values: List[str], flag: str) -> Dict[str, str]:
    pairs = {}
    for value in values or []:
        name, sep, path = value.partition('=')
        if not sep or not name or not path:
            raise ValueError(f"{flag}: ожидалось ИМЯ=ПУТЬ, получено '{value}'")
        pairs[name] = path
    return pairs


def _parse_point(text: str) -> Tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(','))
    except ValueError:
        raise ValueError(f"--point: ожидалось X,Y, получено '{text}'")
    return x, y


# ==================== Подкоманды ====================

def cmd_fuse_masks(args) -> int:
    logger = get_logger()
    if args.preset:
        criterion = CRITERIA_PRESETS[args.preset]
    else:
        criterion = FusionCriterion(args.criterion, args.threshold, args.min_area)
    fill = coerce_value('--fill', args.fill, Tuple[int, int, int])
    if any(not 0 <= v <= 255 for v in fill):
        raise ValueError(f"--fill: значения должны быть в [0, 255], получено '{args.fill}'")
    entries = [r.image_path for r in load_manifest(args.manifest).records]
    items = [('FUSE_CRITERION', criterion.kind), ('FUSE_THRESHOLD', str(criterion.threshold)),
             ('FUSE_MIN_AREA', str(criterion.min_area)), ('FUSE_MANIFEST', args.manifest),
             ('FUSE_FILL', args.fill)]
    with RunDirectory(args.out, items):
        log_action(logger, "Слияние масок", f"{len(entries)} изображений, критерий {criterion}")
        report = batch_fuse(entries, args.images, args.candidates, args.reference, args.out,
                            criterion, fill, workers=args.workers or get_num_workers())
        counts = report['status'].value_counts().to_dict()
        write_report(report, args.out, 'fusion_report', 'Слияние масок', {'status_counts': counts})
    failed = counts.get('error', 0)
    if failed:
        logger.warning(f"Слияние масок: {failed} изображений с ошибками, см. fusion_report.tsv")
    return 0


def cmd_train(args) -> int:
    logger = get_logger()
    cfg = load_experiment_config(args.config, args.toy)
    if args.toy:
        cfg = _toy_data(cfg, args.out)
    manifest_path = args.manifest or cfg.data.train_manifest
    variant = args.variant or cfg.data.variant
    with RunDirectory(args.out, cfg.items()):
        manifest = load_data_manifest(cfg, manifest_path, 'train', variant)
        if cfg.data.test_manifest:
            ok, message = validate_disjoint(manifest, load_manifest(cfg.data.test_manifest, 'test'))
            if not ok:
                raise ValueError(message)
        result = train(cfg.train, cfg.model, cfg.aug, manifest, args.out, cfg.seed, get_device(), args.resume)
        if cfg.data.test_manifest:
            test = load_data_manifest(cfg, cfg.data.test_manifest, 'test', variant)
            model, _ = model_from_checkpoint(result.final_checkpoint, get_device())
            store = extract_features(model, test, cfg.eval.batch_size, get_device())
            # mAP по всему тесту пишется всегда, поля протокола atrw - дополнительно
            row = evaluate_store(store, dataclasses.replace(cfg.eval, protocol='plain', rerank=False))
            if cfg.eval.protocol != 'plain':
                row.update(evaluate_store(store, dataclasses.replace(cfg.eval, rerank=False)))
            write_report(pd.DataFrame([row]), args.out, 'test_metrics', 'Метрики на тестовом наборе')
        write_report(pd.DataFrame(result.history), args.out, 'history', 'История обучения')
        logger.info(f"Контрольная точка: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args.config)
    overrides = {'protocol': args.protocol or cfg.eval.protocol}
    if args.rerank:
        overrides['rerank'] = True
    eval_config = dataclasses.replace(cfg.eval, **overrides)
    cfg = dataclasses.replace(cfg, eval=eval_config)
    with RunDirectory(args.report, cfg.items()):
        manifest = load_data_manifest(cfg, args.manifest, 'test', args.variant)
        log_action(get_logger(), "Оценка", f"{args.checkpoint} на {manifest.name}, протокол {eval_config.protocol}")
        store = extract_from_checkpoint(args.checkpoint, manifest, eval_config.batch_size, get_device())
        row = evaluate_store(store, eval_config)
        if eval_config.protocol == 'atrw':
            columns = ['mmAP', 'mAP(s)', 'mAP(c)', 'R@1(s)', 'R@1(c)']
        else:
            columns = ['mAP'] + [f"R@{k}" for k in eval_config.ks]
        table = pd.DataFrame([{k: row[k] for k in columns}])
        extra = {'counts': {k: v for k, v in row.items() if k not in columns},
                 'skipped': [path for path, _ in store.skipped],
                 'rerank': eval_config.rerank, 'protocol': eval_config.protocol}
        write_report(table, args.report, 'eval', 'Оценка повторной идентификации', extra)
    return 0


def cmd_bias_grid(args) -> int:
    cfg = load_experiment_config(args.config, args.toy)
    if args.toy:
        cfg = _toy_data(cfg, args.out, biased=True)
    check_variant_dirs({'original': cfg.data.original_root, 'masked': cfg.data.masked_root})
    with RunDirectory(args.out, cfg.items()):
        log_action(get_logger(), "Таблица фонового смещения", args.out)
        checkpoints = {}
        for variant in VARIANTS:
            manifest = load_data_manifest(cfg, cfg.data.train_manifest, 'train', variant)
            result = train(cfg.train, cfg.model, cfg.aug, manifest, os.path.join(args.out, f"train_{variant}"),
                           cfg.seed, get_device())
            checkpoints[variant] = result.final_checkpoint
        tests = {v: load_data_manifest(cfg, cfg.data.test_manifest, 'test', v) for v in VARIANTS}
        table = bias_grid(checkpoints, tests, dataclasses.replace(cfg.eval, rerank=False), get_device())
        write_report(table, args.out, 'bias_grid', 'Измерение фонового смещения')
    return 0


def cmd_ablate(args) -> int:
    cfg = load_experiment_config(args.config, args.toy)
    if args.toy:
        cfg = _toy_data(cfg, args.out)
    with RunDirectory(args.out, cfg.items()):
        train_manifest = load_data_manifest(cfg, cfg.data.train_manifest, 'train')
        test_manifest = load_data_manifest(cfg, cfg.data.test_manifest, 'test')
        if args.lambda_sweep:
            table = lambda_sweep(cfg.train, cfg.model, cfg.aug, train_manifest, test_manifest, cfg.eval,
                                 args.out, cfg.seed, get_device())
            write_report(table, args.out, 'lambda_sweep', 'Перебор весов потерь')
            return 0
        grid = TABLE_ABLATION_GRID
        if args.rows:
            grid = [TABLE_ABLATION_GRID[int(i)] for i in args.rows.split(',')]
        table = ablation_run(cfg.train, grid, cfg.model, cfg.aug, train_manifest, test_manifest,
                             cfg.eval, args.out, cfg.seed, get_device())
        write_report(table, args.out, 'ablation', 'Абляция компонентов (без переранжирования)')
    return 0


def cmd_transfer(args) -> int:
    cfg = load_experiment_config(args.config)
    checkpoints = _parse_pairs(args.checkpoint, '--checkpoint')
    manifest_paths = _parse_pairs(args.manifest, '--manifest')
    with RunDirectory(args.out, cfg.items()):
        manifests = {name: load_data_manifest(cfg, path, 'test') for name, path in manifest_paths.items()}
        table = transfer_table(checkpoints, manifests, dataclasses.replace(cfg.eval, rerank=False), get_device())
        write_report(table, args.out, 'transfer', 'Межвидовой перенос')
        matrix = table.pivot(index='Train', columns='Test', values='mAP').reset_index()
        write_report(matrix, args.out, 'transfer_matrix', 'Межвидовой перенос: mAP')
    return 0


def cmd_visualize_match(args) -> int:
    logger = get_logger()
    source, target = read_image(args.source), read_image(args.target)
    mask = load_mask(args.source_mask) if args.source_mask else None
    query = MatchQuery(source, _parse_point(args.point), target, args.layer, mask)
    model, _ = model_from_checkpoint(args.checkpoint, get_device())
    stem, _ = os.path.splitext(args.out)
    directory = os.path.dirname(args.out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if args.compare:
        baseline, _ = model_from_checkpoint(args.compare, get_device())
        results = compare_models({'model': model, 'baseline': baseline}, query)
    else:
        results = {'model': match_point(model, query)}
    for name, result in results.items():
        path = args.out if name == 'model' else f"{stem}_{name}.png"
        render_panel(result, path)
        with open(os.path.splitext(path)[0] + '.json', 'w', encoding='utf-8') as f:
            json.dump({'point': list(result.point), **result.metadata}, f, ensure_ascii=False, indent=2,
                      sort_keys=True)
        logger.info(f"Совпадение ({name}): {result.point}, рисунок {path}")
    return 0


def cmd_validate_manifest(args) -> int:
    manifest = load_manifest(args.manifest)
    print(f"{manifest.name}: {len(manifest)} изображений, {manifest.num_entities} сущностей, "
          f"камеры: {'да' if manifest.has_cameras else 'нет'}")
    for warning in manifest.warnings:
        print(f"предупреждение: {warning}")
    if args.test:
        ok, message = validate_disjoint(manifest, load_manifest(args.test))
        if not ok:
            raise ValueError(message)
        print("пересечений сущностей с тестовым набором нет")
    return 0


def cmd_make_toy(args) -> int:
    paths = make_toy_dataset(args.out, args.train_entities, args.test_entities, args.images, args.size,
                             args.biased, args.seed)
    cfg = toy_preset()
    data = DataConfig(train_manifest=os.path.abspath(paths['train_manifest']),
                      test_manifest=os.path.abspath(paths['test_manifest']),
                      original_root=os.path.abspath(paths['original_root']),
                      masked_root=os.path.abspath(paths['masked_root']))
    size = args.size
    cfg = dataclasses.replace(cfg, data=data, seed=args.seed,
                              model=dataclasses.replace(cfg.model, input_size=size),
                              aug=dataclasses.replace(cfg.aug, target_size=size, resize_size=size + size // 8))
    dump_config(cfg, os.path.join(args.out, 'toy.env'))
    print(f"Набор записан в {args.out}, конфигурация: {os.path.join(args.out, 'toy.env')}")
    return 0


# ==================== Разбор аргументов ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='animalreid', description="Повторная идентификация животных")
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('fuse-masks', help="слияние масок-кандидатов и удаление фона")
    p.add_argument('--manifest', required=True, help="манифест с путями изображений")
    p.add_argument('--images', required=True, help="каталог исходных изображений")
    p.add_argument('--candidates', required=True, help="каталог кандидатов (<имя>/*.png)")
    p.add_argument('--reference', required=True, help="каталог эталонных масок (<имя>.png)")
    p.add_argument('--out', required=True, help="выходной каталог")
    p.add_argument('--criterion', default='iou', choices=CRITERION_NAMES, help="критерий отбора кандидатов")
    p.add_argument('--threshold', type=float, default=0.3, help="порог критерия")
    p.add_argument('--min-area', type=int, default=0, help="минимальная площадь кандидата")
    p.add_argument('--preset', choices=sorted(CRITERIA_PRESETS), help="критерий для известного набора")
    p.add_argument('--workers', type=int, default=0, help="число потоков (0 - REID_NUM_WORKERS)")
    p.add_argument('--fill', default='0,0,0', help="цвет фона R,G,B")
    p.set_defaults(handler=cmd_fuse_masks)

    p = sub.add_parser('train', help="обучение модели")
    p.add_argument('--config', help="файл KEY=VALUE")
    p.add_argument('--manifest', help="обучающий манифест (по умолчанию DATA_TRAIN_MANIFEST)")
    p.add_argument('--out', required=True, help="каталог запуска")
    p.add_argument('--toy', action='store_true', help="пресет и синтетический набор для CPU")
    p.add_argument('--resume', help="продолжить с контрольной точки")
    p.add_argument('--variant', choices=VARIANTS, help="исходные или замаскированные изображения")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', help="оценка контрольной точки")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--protocol', choices=('plain', 'atrw'))
    p.add_argument('--rerank', action='store_true', help="k-взаимное переранжирование")
    p.add_argument('--report', required=True, help="каталог отчёта")
    p.add_argument('--config', help="файл KEY=VALUE")
    p.add_argument('--variant', choices=VARIANTS)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('bias-grid', help="таблица фонового смещения 2×2")
    p.add_argument('--config', help="файл KEY=VALUE")
    p.add_argument('--out', required=True)
    p.add_argument('--toy', action='store_true')
    p.set_defaults(handler=cmd_bias_grid)

    p = sub.add_parser('ablate', help="абляция компонентов")
    p.add_argument('--config', help="файл KEY=VALUE")
    p.add_argument('--out', required=True)
    p.add_argument('--toy', action='store_true')
    p.add_argument('--rows', help="номера строк абляции через запятую (по умолчанию все 9)")
    p.add_argument('--lambda-sweep', action='store_true', help="перебор λ_reID × λ_DVE вместо абляции")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser('transfer', help="межвидовой перенос")
    p.add_argument('--checkpoint', action='append', required=True, help="ВИД=ПУТЬ, можно повторять")
    p.add_argument('--manifest', action='append', required=True, help="ВИД=ПУТЬ, можно повторять")
    p.add_argument('--out', required=True)
    p.add_argument('--config', help="файл KEY=VALUE")
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser('visualize-match', help="совпадение точки по плотным дескрипторам")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--source', required=True)
    p.add_argument('--target', required=True)
    p.add_argument('--point', required=True, help="X,Y на исходном изображении")
    p.add_argument('--layer', choices=('dve', 'stage3'), default='dve')
    p.add_argument('--out', required=True, help="PNG с тремя панелями")
    p.add_argument('--compare', help="контрольная точка для сравнения (например, без DVE)")
    p.add_argument('--source-mask', help="маска исходного изображения (для предупреждения о фоне)")
    p.set_defaults(handler=cmd_visualize_match)

    p = sub.add_parser('validate-manifest', help="проверка манифеста")
    p.add_argument('--manifest', required=True)
    p.add_argument('--test', help="тестовый манифест для проверки пересечения сущностей")
    p.set_defaults(handler=cmd_validate_manifest)

    p = sub.add_parser('make-toy', help="синтетический набор данных")
    p.add_argument('--out', required=True)
    p.add_argument('--train-entities', type=int, default=16)
    p.add_argument('--test-entities', type=int, default=16)
    p.add_argument('--images', type=int, default=8, help="изображений на сущность")
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--biased', action='store_true', help="фон определяется сущностью")
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=cmd_make_toy)
    return parser


def dispatch(argv: List[str]) -> int:
    """
    Выполнить подкоманду.

    Returns:
        0 - успех, 1 - ошибка выполнения или конфигурации, 2 - ошибка аргументов
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logger = get_logger()
    try:
        log_action(logger, f"Запуск {args.command}")
        code = args.handler(args)
        log_action(logger, f"Завершение {args.command}", f"код {code}")
        return code
    except Exception as e:
        logger.debug("Подробности ошибки", exc_info=True)
        print(f"ошибка: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
