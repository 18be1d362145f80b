"""
Модуль оценки качества повторной идентификации.

Извлечение признаков (исходное + отражённое изображение), косинусное
ранжирование, AP/mAP/R@k, протоколы с камерами (mmAP), k-взаимное
переранжирование, таблица фонового смещения и межвидовой перенос.
"""
import dataclasses
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from datacore import DatasetManifest, SampleError, load_record_pixels, resize_pixels
from logger import get_logger
from nettower import ReIDNet, model_from_checkpoint, to_input_tensor

PROTOCOLS = ('plain', 'single-camera', 'cross-camera')
EVAL_PROTOCOLS = ('plain', 'atrw')
CROSS_EXCLUDE_MODES = ('same-id', 'same-camera')


class EmptyProtocolError(ValueError):
    """После исключений не осталось ни одного запроса."""


@dataclass
class EvalConfig:
    """Параметры оценки (ключи EVAL_*)."""
    protocol: str = 'plain'
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3
    ks: Tuple[int, ...] = (1, 5, 10)
    batch_size: int = 32
    cross_exclude: str = 'same-id'


def validate_eval_config(config: EvalConfig) -> Tuple[bool, Optional[str]]:
    if config.protocol not in EVAL_PROTOCOLS:
        return False, f"неизвестный протокол '{config.protocol}', допустимо: {', '.join(EVAL_PROTOCOLS)}"
    if config.k1 < 1 or config.k2 < 1:
        return False, "k1 и k2 должны быть положительными"
    if not 0.0 <= config.lambda_value <= 1.0:
        return False, f"lambda {config.lambda_value} вне [0, 1]"
    if not config.ks or any(k < 1 for k in config.ks):
        return False, "ks должны быть положительными"
    if config.cross_exclude not in CROSS_EXCLUDE_MODES:
        return False, f"cross_exclude должен быть одним из: {', '.join(CROSS_EXCLUDE_MODES)}"
    return True, None


# ==================== Признаки ====================

class FeatureStore:
    """
    Векторы для ранжирования вместе с метками сущностей и камер.
    """

    def __init__(self, ids: Sequence[str], vectors: np.ndarray,
                 cameras: Optional[Sequence[int]] = None, paths: Optional[List[str]] = None,
                 skipped: Optional[List[Tuple[str, str]]] = None):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ValueError(f"форма векторов {vectors.shape} не соответствует числу меток {len(ids)}")
        if cameras is not None and len(cameras) != len(ids):
            raise ValueError("число камер не совпадает с числом меток")
        self.ids = np.asarray([str(i) for i in ids])
        self.vectors = vectors
        self.cameras = None if cameras is None else np.asarray(cameras, dtype=np.int64)
        self.paths = paths or [''] * len(ids)
        self.skipped = skipped or []

    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self):
        return f"FeatureStore(N={len(self)}, dim={self.vectors.shape[1]}, cameras={self.cameras is not None})"

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return self.vectors / np.maximum(norms, 1e-12)


def extract_features(model: ReIDNet, manifest: DatasetManifest, batch_size: int = 32,
                     device: str = 'cpu') -> FeatureStore:
    """
    Извлечь векторы 2d для всех записей манифеста.

    Нечитаемые изображения пропускаются и перечисляются в store.skipped.

    Args:
        model: Модель
        manifest: Манифест (фон удаляется по маске записи, если она задана)
        batch_size: Размер пакета
        device: Устройство torch

    Returns:
        FeatureStore
    """
    logger = get_logger()
    size = model.config.input_size
    ids, cameras, paths, vectors = [], [], [], []
    skipped = []
    pending = []

    def flush():
        if not pending:
            return
        batch = to_input_tensor([p for _, p in pending], model.config).to(device)
        vectors.append(model.embed_eval(batch).cpu().numpy())
        for record, _ in pending:
            ids.append(record.raw_entity)
            cameras.append(record.camera_id)
            paths.append(record.image_path)
        pending.clear()

    model.eval()
    for record in manifest.records:
        try:
            pixels = resize_pixels(load_record_pixels(manifest, record), size)
        except SampleError as e:
            skipped.append((record.image_path, str(e)))
            logger.warning(f"Пропуск при извлечении признаков: {e}")
            continue
        pending.append((record, pixels))
        if len(pending) >= batch_size:
            flush()
    flush()

    if not vectors:
        raise ValueError(f"ни одно изображение манифеста {manifest.name} не прочитано")
    has_cameras = all(c is not None for c in cameras)
    store = FeatureStore(ids, np.concatenate(vectors), cameras if has_cameras else None, paths, skipped)
    logger.info(f"Признаки извлечены: {store}, пропущено {len(skipped)}")
    return store


def extract_from_checkpoint(checkpoint: str, manifest: DatasetManifest, batch_size: int = 32,
                            device: str = 'cpu') -> FeatureStore:
    """Загрузить модель из контрольной точки и извлечь признаки."""
    model, _ = model_from_checkpoint(checkpoint, device)
    return extract_features(model, manifest, batch_size, device)


# ==================== Ранжирование ====================

@dataclass
class ProtocolSpec:
    """
    Правила протокола: какие элементы галереи допустимы и какие позитивны.

    plain - все остальные элементы, позитив = та же сущность;
    single-camera - только элементы той же камеры;
    cross-camera - позитив = та же сущность с другой камеры; элементы той же
    камеры исключаются: только с той же сущностью (same-id) или все (same-camera).
    """
    kind: str = 'plain'
    cross_exclude: str = 'same-id'

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"неизвестный протокол '{self.kind}'")
        if self.cross_exclude not in CROSS_EXCLUDE_MODES:
            raise ValueError(f"неизвестный режим исключения '{self.cross_exclude}'")

    def masks(self, store: FeatureStore, query: int) -> Tuple[np.ndarray, np.ndarray]:
        """Маски (допустимые элементы галереи, позитивы) для запроса."""
        n = len(store)
        eligible = np.ones(n, dtype=bool)
        eligible[query] = False
        same_id = store.ids == store.ids[query]
        if self.kind == 'plain':
            return eligible, same_id & eligible
        if store.cameras is None:
            raise ValueError(f"протокол {self.kind} требует номера камер")
        same_cam = store.cameras == store.cameras[query]
        if self.kind == 'single-camera':
            eligible &= same_cam
            return eligible, same_id & eligible
        if self.cross_exclude == 'same-camera':
            eligible &= ~same_cam
        else:
            eligible &= ~(same_cam & same_id)
        return eligible, same_id & ~same_cam & eligible


class QueryRanking:
    def __init__(self, query: int, order: np.ndarray, flags: np.ndarray):
        self.query = query
        self.order = order
        self.flags = flags


class RankingResult:
    """Ранжирования по запросам и счётчики отброшенных запросов."""

    def __init__(self, rankings: List[QueryRanking], dropped_empty: int, dropped_no_positive: int):
        self.rankings = rankings
        self.dropped_empty = dropped_empty
        self.dropped_no_positive = dropped_no_positive

    def __len__(self) -> int:
        return len(self.rankings)


def cosine_distance(store: FeatureStore) -> np.ndarray:
    """Матрица 1 - cos для всех пар."""
    unit = store.normalized()
    return 1.0 - unit @ unit.T


def rank(store: FeatureStore, protocol: ProtocolSpec,
         distance: Optional[np.ndarray] = None) -> RankingResult:
    """
    Ранжировать галерею для каждого запроса (каждый элемент - запрос к остальным).

    Порядок - по возрастанию расстояния (убыванию косинуса), равные
    значения упорядочены по индексу галереи.

    Args:
        store: Признаки
        protocol: Протокол
        distance: Готовая матрица расстояний (например, после переранжирования)

    Returns:
        RankingResult; запросы без допустимой галереи или без позитивов отброшены со счётом
    """
    if len(store) < 1:
        raise ValueError("пустое хранилище признаков")
    if distance is None:
        distance = cosine_distance(store)
    rankings = []
    dropped_empty = dropped_no_positive = 0
    for q in range(len(store)):
        eligible, positive = protocol.masks(store, q)
        candidates = np.flatnonzero(eligible)
        if candidates.size == 0:
            dropped_empty += 1
            continue
        if not positive.any():
            dropped_no_positive += 1
            continue
        order = candidates[np.argsort(distance[q, candidates], kind='stable')]
        rankings.append(QueryRanking(q, order, positive[order]))
    return RankingResult(rankings, dropped_empty, dropped_no_positive)


def average_precision(flags: Sequence[bool]) -> Optional[float]:
    """
    AP = среднее по позитивам значения i / r_i (r_i - позиция i-го позитива, с 1).

    Returns:
        AP или None, если позитивов нет
    """
    hits = np.flatnonzero(np.asarray(flags, dtype=bool)) + 1
    if hits.size == 0:
        return None
    return float(np.mean(np.arange(1, hits.size + 1) / hits))


def metrics(result: RankingResult, ks: Sequence[int] = (1, 5, 10)) -> Dict[str, float]:
    """
    mAP и R@k по сохранённым запросам.

    Raises:
        EmptyProtocolError: Все запросы отброшены
    """
    if not result.rankings:
        raise EmptyProtocolError(
            f"не осталось запросов (без галереи: {result.dropped_empty}, "
            f"без позитивов: {result.dropped_no_positive})")
    aps = [average_precision(r.flags) for r in result.rankings]
    row = {'mAP': float(np.mean(aps))}
    for k in ks:
        row[f"R@{k}"] = float(np.mean([r.flags[:k].any() for r in result.rankings]))
    row['queries'] = len(result.rankings)
    row['dropped_empty'] = result.dropped_empty
    row['dropped_no_positive'] = result.dropped_no_positive
    return row


def mmap(single_map: float, cross_map: float) -> float:
    return (single_map + cross_map) / 2.0


# ==================== Переранжирование ====================

def _k_reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, :k + 1]
    backward = initial_rank[forward, :k + 1]
    return forward[np.any(backward == i, axis=1)]


def rerank(distance: np.ndarray, k1: int = 20, k2: int = 6, lambda_value: float = 0.3) -> np.ndarray:
    """
    k-взаимное переранжирование матрицы расстояний N×N.

    Итоговое расстояние λ·d + (1-λ)·d_jaccard; при λ = 1 порядок совпадает
    с исходным.

    Args:
        distance: Косинусные расстояния (все пары, включая диагональ)
        k1: Размер k-взаимного окружения
        k2: Размер окружения для расширения запроса
        lambda_value: Вес исходного расстояния

    Returns:
        Матрица N×N (float64)
    """
    original = np.asarray(distance, dtype=np.float64)
    n = original.shape[0]
    if k1 >= n:
        get_logger().warning(f"k1={k1} не меньше числа элементов {n}, используется {n - 1}")
        k1 = max(n - 1, 1)
    k2 = min(k2, n)
    initial_rank = np.argsort(original, axis=1, kind='stable')
    half = int(np.around(k1 / 2))

    weights = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        reciprocal = _k_reciprocal(initial_rank, i, k1)
        expansion = reciprocal
        for candidate in reciprocal:
            candidate_set = _k_reciprocal(initial_rank, candidate, half)
            if len(np.intersect1d(candidate_set, reciprocal)) > 2.0 / 3.0 * len(candidate_set):
                expansion = np.append(expansion, candidate_set)
        expansion = np.unique(expansion)
        w = np.exp(-original[i, expansion])
        weights[i, expansion] = w / w.sum()

    if k2 != 1:
        weights = np.stack([weights[initial_rank[i, :k2]].mean(axis=0) for i in range(n)])

    jaccard = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        shared = np.minimum(weights[i][None, :], weights).sum(axis=1)
        jaccard[i] = 1.0 - shared / (2.0 - shared)

    return lambda_value * original + (1.0 - lambda_value) * jaccard


# ==================== Сводные оценки ====================

def _distance_for(store: FeatureStore, config: EvalConfig) -> np.ndarray:
    distance = cosine_distance(store)
    if config.rerank:
        distance = rerank(distance, config.k1, config.k2, config.lambda_value)
    return distance


def evaluate_store(store: FeatureStore, config: EvalConfig) -> Dict[str, float]:
    """
    Строка результатов в формате протокола.

    plain -> mAP, R@k; atrw -> mmAP, mAP(s), mAP(c), R@1(s), R@1(c).

    Args:
        store: Признаки тестового набора
        config: Параметры оценки

    Returns:
        Словарь метрик и счётчиков отброшенных запросов
    """
    ok, message = validate_eval_config(config)
    if not ok:
        raise ValueError(message)
    distance = _distance_for(store, config)
    if config.protocol == 'plain':
        return metrics(rank(store, ProtocolSpec('plain'), distance), config.ks)

    single = metrics(rank(store, ProtocolSpec('single-camera'), distance), config.ks)
    cross = metrics(rank(store, ProtocolSpec('cross-camera', config.cross_exclude), distance), config.ks)
    return {
        'mmAP': mmap(single['mAP'], cross['mAP']),
        'mAP(s)': single['mAP'],
        'mAP(c)': cross['mAP'],
        'R@1(s)': single['R@1'],
        'R@1(c)': cross['R@1'],
        'queries(s)': single['queries'],
        'queries(c)': cross['queries'],
        'dropped(s)': single['dropped_empty'] + single['dropped_no_positive'],
        'dropped(c)': cross['dropped_empty'] + cross['dropped_no_positive'],
    }


def default_protocol(manifest: DatasetManifest) -> str:
    """atrw для наборов с камерами, plain для остальных."""
    return 'atrw' if manifest.has_cameras else 'plain'


def transfer_eval(checkpoint: str, manifest: DatasetManifest, config: EvalConfig,
                  device: str = 'cpu') -> Dict[str, float]:
    """
    Оценить модель на наборе другого вида.

    Классификатор сущностей не используется: ранжирование идёт только
    по векторам, поэтому пространства меток не связаны.
    """
    store = extract_from_checkpoint(checkpoint, manifest, config.batch_size, device)
    return evaluate_store(store, config)


def transfer_table(checkpoints: Dict[str, str], manifests: Dict[str, DatasetManifest],
                   config: EvalConfig, device: str = 'cpu') -> pd.DataFrame:
    """
    Матрица переноса: строки - вид обучения, колонки - вид оценки.

    Для каждой пары используется протокол набора оценки (atrw при наличии камер).

    Returns:
        Таблица с колонками Train, Test, mAP, R@1
    """
    rows = []
    for train_name, checkpoint in checkpoints.items():
        model, _ = model_from_checkpoint(checkpoint, device)
        for test_name, manifest in manifests.items():
            protocol = 'plain' if config.protocol == 'plain' else default_protocol(manifest)
            store = extract_features(model, manifest, config.batch_size, device)
            local = dataclasses.replace(config, protocol=protocol)
            row = evaluate_store(store, local)
            rows.append({
                'Train': train_name,
                'Test': test_name,
                'mAP': row.get('mAP', row.get('mmAP')),
                'R@1': row.get('R@1', row.get('R@1(s)')),
            })
    return pd.DataFrame(rows, columns=['Train', 'Test', 'mAP', 'R@1'])


def check_variant_dirs(variants: Dict[str, str]) -> None:
    """
    Проверить, что каталоги вариантов изображений существуют.

    Raises:
        ValueError: Перечислены все отсутствующие каталоги
    """
    missing = [f"{name}: {path}" for name, path in variants.items() if not path or not os.path.isdir(path)]
    if missing:
        raise ValueError("нет каталогов вариантов изображений: " + '; '.join(missing))


def bias_grid(checkpoints: Dict[str, str], test_manifests: Dict[str, DatasetManifest],
              config: EvalConfig, device: str = 'cpu') -> pd.DataFrame:
    """
    Таблица фонового смещения: обучение × тест на исходных и замаскированных изображениях.

    Args:
        checkpoints: Вариант обучения ('original'/'masked') -> контрольная точка
        test_manifests: Вариант теста -> манифест с соответствующим корнем
        config: Параметры оценки

    Returns:
        Таблица Train, Test, mmAP, R@1(s), R@1(c) (для протокола atrw)
        или Train, Test, mAP, R@1 (для plain)
    """
    rows = []
    for train_variant, checkpoint in checkpoints.items():
        model, _ = model_from_checkpoint(checkpoint, device)
        for test_variant, manifest in test_manifests.items():
            store = extract_features(model, manifest, config.batch_size, device)
            result = evaluate_store(store, config)
            row = {'Train': train_variant, 'Test': test_variant}
            if config.protocol == 'atrw':
                row.update({k: result[k] for k in ('mmAP', 'R@1(s)', 'R@1(c)')})
            else:
                row.update({'mAP': result['mAP'], 'R@1': result['R@1']})
            rows.append(row)
            get_logger().info(f"Смещение фона: обучение={train_variant}, тест={test_variant}: {row}")
    return pd.DataFrame(rows)
