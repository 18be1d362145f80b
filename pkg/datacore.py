"""
Модуль для работы с наборами данных.

Манифесты (разметка сущностей, ориентации и камер), разбиения, выборка
пакетов P×K и аугментации с учётом отражения.
"""
import dataclasses
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from config import ConfigError
from logger import get_logger
from maskpipe import BinaryMask, apply_mask, load_mask, read_image

MANIFEST_MAGIC = 'reid-manifest'
MANIFEST_VERSION = 1

REQUIRED_COLUMNS = ('path', 'entity', 'orientation')

ORIENTATION_TOKENS = {
    'l': 0, 'left': 0, '0': 0,
    'r': 1, 'right': 1, '1': 1,
}

SPLIT_ALIASES = {
    'train': {'train'},
    'test': {'test', 'query', 'gallery'},
    'query': {'query', 'test'},
    'gallery': {'gallery', 'test'},
}

IMAGENET_MEAN_RGB = (124, 116, 104)


class ManifestError(ValueError):
    """Ошибка разбора или проверки манифеста."""


class SampleError(ValueError):
    """Ошибка чтения отдельного образца."""


class SampleRecord:
    """
    Одно изображение с разметкой сущности, ориентации и (опционально) камеры.
    """

    def __init__(self, image_path: str, entity_id: int, orientation: int,
                 camera_id: Optional[int] = None, mask_path: Optional[str] = None,
                 raw_entity: Optional[str] = None, base_entity: Optional[str] = None):
        """
        Инициализация записи.

        Args:
            image_path: Путь к изображению относительно корня манифеста
            entity_id: Плотный номер сущности в [0, C_id)
            orientation: 0 - левый бок, 1 - правый
            camera_id: Номер камеры (если протокол их использует)
            mask_path: Абсолютный путь к маске переднего плана
            raw_entity: Исходная метка сущности из файла
            base_entity: Метка особи без разделения на бока
        """
        self.image_path = image_path
        self.entity_id = entity_id
        self.orientation = orientation
        self.camera_id = camera_id
        self.mask_path = mask_path
        self.raw_entity = raw_entity if raw_entity is not None else str(entity_id)
        self.base_entity = base_entity if base_entity is not None else self.raw_entity

    def __repr__(self):
        return (f"SampleRecord(path='{self.image_path}', entity={self.entity_id}, "
                f"orientation={self.orientation}, camera={self.camera_id})")

    def to_dict(self) -> dict:
        return {
            'image_path': self.image_path,
            'entity_id': self.entity_id,
            'orientation': self.orientation,
            'camera_id': self.camera_id,
            'mask_path': self.mask_path,
            'raw_entity': self.raw_entity,
            'base_entity': self.base_entity,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SampleRecord':
        return cls(
            image_path=data['image_path'],
            entity_id=data['entity_id'],
            orientation=data['orientation'],
            camera_id=data.get('camera_id'),
            mask_path=data.get('mask_path'),
            raw_entity=data.get('raw_entity'),
            base_entity=data.get('base_entity'),
        )

    def replace(self, **changes) -> 'SampleRecord':
        data = self.to_dict()
        data.update(changes)
        return SampleRecord.from_dict(data)


class DatasetManifest:
    """
    Набор записей одного разбиения с таблицей перекодировки сущностей.
    """

    def __init__(self, name: str, records: List[SampleRecord], split: str = 'train',
                 root: str = '.', entity_map: Optional[Dict[str, int]] = None,
                 warnings: Optional[List[str]] = None):
        self.name = name
        self.records = records
        self.split = split
        self.root = root
        self.entity_map = entity_map if entity_map is not None else \
            {r.raw_entity: r.entity_id for r in records}
        self.warnings = warnings or []

    @property
    def num_entities(self) -> int:
        return len(self.entity_map)

    @property
    def has_cameras(self) -> bool:
        return bool(self.records) and all(r.camera_id is not None for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __repr__(self):
        return f"DatasetManifest(name='{self.name}', split='{self.split}', records={len(self.records)}, C_id={self.num_entities})"

    def resolve(self, record: SampleRecord) -> str:
        """Полный путь к изображению записи."""
        return os.path.join(self.root, record.image_path)

    def entity_index(self) -> Dict[int, List[int]]:
        """Сущность -> индексы записей в порядке манифеста."""
        index: Dict[int, List[int]] = {}
        for i, record in enumerate(self.records):
            index.setdefault(record.entity_id, []).append(i)
        return index

    def raw_entities(self) -> set:
        return {r.raw_entity for r in self.records}

    def base_entities(self) -> set:
        return {r.base_entity for r in self.records}


def _densify(records: List[SampleRecord]) -> Tuple[List[SampleRecord], Dict[str, int]]:
    """Перенумеровать сущности подряд в порядке первого появления."""
    mapping: Dict[str, int] = {}
    for record in records:
        if record.raw_entity not in mapping:
            mapping[record.raw_entity] = len(mapping)
    return [r.replace(entity_id=mapping[r.raw_entity]) for r in records], mapping


def parse_orientation(token: str, line: int) -> int:
    value = ORIENTATION_TOKENS.get(str(token).strip().lower())
    if value is None:
        raise ManifestError(f"строка {line}: неизвестная ориентация '{token}'")
    return value


# ==================== Загрузка и проверка манифестов ====================

def load_manifest(path: str, split: Optional[str] = None, name: Optional[str] = None) -> DatasetManifest:
    """
    Загрузить манифест из текстового файла с заголовком.

    Первая строка может содержать версию формата ("# reid-manifest v1").
    Разделитель - табуляция для .tsv, запятая для остальных.

    Args:
        path: Путь к файлу манифеста
        split: Оставить только строки этого разбиения (если есть колонка split)
        name: Имя набора (по умолчанию - имя файла)

    Returns:
        DatasetManifest с плотной нумерацией сущностей

    Raises:
        ManifestError: Нет обязательной колонки или некорректная строка
    """
    if not os.path.exists(path):
        raise ManifestError(f"файл манифеста не найден: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        first_line = f.readline().strip()
    skip = 0
    if first_line.startswith('#'):
        skip = 1
        if MANIFEST_MAGIC in first_line and not first_line.endswith(f"v{MANIFEST_VERSION}"):
            raise ManifestError(f"неподдерживаемая версия манифеста: '{first_line}'")

    sep = '\t' if path.lower().endswith('.tsv') else ','
    table = pd.read_csv(path, sep=sep, skiprows=skip, dtype=str, keep_default_na=False)
    table.columns = [c.strip().lower() for c in table.columns]
    for column in REQUIRED_COLUMNS:
        if column not in table.columns:
            raise ManifestError(f"в манифесте {path} нет обязательной колонки '{column}'")

    base_dir = os.path.dirname(os.path.abspath(path))
    has_camera = 'camera' in table.columns
    has_mask = 'mask' in table.columns
    wanted = SPLIT_ALIASES.get(split, {split}) if split else None

    records = []
    for row_index, row in enumerate(table.to_dict('records')):
        line = skip + row_index + 2  # строки файла считаются с 1, плюс заголовок
        if wanted is not None and 'split' in table.columns and row['split'].strip().lower() not in wanted:
            continue
        camera = None
        if has_camera:
            token = row['camera'].strip()
            try:
                camera = int(token)
            except ValueError:
                raise ManifestError(f"строка {line}: некорректный номер камеры '{token}'")
        mask_path = None
        if has_mask and row['mask'].strip():
            mask_path = os.path.join(base_dir, row['mask'].strip())
        records.append(SampleRecord(
            image_path=row['path'].strip(),
            entity_id=-1,
            orientation=parse_orientation(row['orientation'], line),
            camera_id=camera,
            mask_path=mask_path,
            raw_entity=row['entity'].strip(),
        ))

    records, mapping = _densify(records)
    warnings = []
    counts = pd.Series([r.image_path for r in records]).value_counts() if records else pd.Series(dtype=int)
    for duplicate, count in counts[counts > 1].items():
        warnings.append(f"путь '{duplicate}' встречается {count} раз(а)")
    manifest = DatasetManifest(
        name=name or os.path.splitext(os.path.basename(path))[0],
        records=records,
        split=split or 'train',
        root=base_dir,
        entity_map=mapping,
        warnings=warnings,
    )
    logger = get_logger()
    for warning in warnings:
        logger.warning(f"Манифест {manifest.name}: {warning}")
    logger.info(f"Загружен манифест {manifest}")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str, split_label: Optional[str] = None) -> None:
    """
    Сохранить манифест в текстовом формате с заголовком версии.

    Args:
        manifest: Манифест
        path: Путь к файлу (.csv или .tsv)
        split_label: Значение колонки split (по умолчанию - manifest.split)
    """
    rows = []
    for record in manifest.records:
        row = {
            'path': record.image_path,
            'entity': record.raw_entity,
            'orientation': 'L' if record.orientation == 0 else 'R',
            'split': split_label or manifest.split,
        }
        if record.camera_id is not None:
            row['camera'] = record.camera_id
        if record.mask_path:
            row['mask'] = os.path.relpath(record.mask_path, os.path.dirname(os.path.abspath(path)))
        rows.append(row)
    sep = '\t' if path.lower().endswith('.tsv') else ','
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(f"# {MANIFEST_MAGIC} v{MANIFEST_VERSION}\n")
        pd.DataFrame(rows).to_csv(f, sep=sep, index=False)


def make_side_entities(manifest: DatasetManifest) -> DatasetManifest:
    """
    Считать каждый бок особи отдельной сущностью.

    Args:
        manifest: Исходный манифест

    Returns:
        Новый манифест с сущностями (особь, бок), перенумерованными подряд
    """
    sided = [r.replace(raw_entity=f"{r.raw_entity}/{'L' if r.orientation == 0 else 'R'}")
             for r in manifest.records]
    records, mapping = _densify(sided)
    return DatasetManifest(manifest.name, records, manifest.split, manifest.root, mapping,
                           list(manifest.warnings))


def validate_disjoint(train: DatasetManifest, test: DatasetManifest) -> Tuple[bool, Optional[str]]:
    """
    Проверить, что обучающие и тестовые сущности не пересекаются.

    Returns:
        Кортеж (успешность проверки, сообщение с пересекающимися сущностями или None)
    """
    # сравниваются особи, а не пары (особь, бок)
    overlap = sorted(train.base_entities() & test.base_entities())
    if overlap:
        shown = ', '.join(overlap[:20])
        more = f" и ещё {len(overlap) - 20}" if len(overlap) > 20 else ''
        return False, f"сущности присутствуют и в обучении, и в тесте: {shown}{more}"
    return True, None


def with_image_root(manifest: DatasetManifest, root: str, keep_masks: bool = True) -> DatasetManifest:
    """
    Перенести манифест на другой каталог изображений (исходные/с удалённым фоном).

    Args:
        manifest: Исходный манифест
        root: Новый корень изображений
        keep_masks: Сохранять ли пути к маскам

    Returns:
        Копия манифеста с новым корнем
    """
    records = manifest.records if keep_masks else [r.replace(mask_path=None) for r in manifest.records]
    return DatasetManifest(manifest.name, list(records), manifest.split, root,
                           dict(manifest.entity_map), list(manifest.warnings))


def holdout_identities(manifest: DatasetManifest, fraction: float,
                       seed: int) -> Tuple[DatasetManifest, Optional[DatasetManifest]]:
    """
    Отделить часть сущностей для валидации.

    Args:
        manifest: Обучающий манифест
        fraction: Доля сущностей для валидации (0 - без валидации)
        seed: Зерно генератора

    Returns:
        Кортеж (обучающий манифест, валидационный манифест или None)
    """
    # оба бока одной особи попадают в одну часть
    bases = list(dict.fromkeys(r.base_entity for r in manifest.records))
    count = int(round(fraction * len(bases)))
    if fraction <= 0 or len(bases) < 4:
        return manifest, None
    count = min(max(count, 2), len(bases) - 2)
    rng = np.random.default_rng(seed)
    held = {bases[i] for i in rng.choice(len(bases), size=count, replace=False).tolist()}
    train_records, train_map = _densify([r for r in manifest.records if r.base_entity not in held])
    val_records, val_map = _densify([r for r in manifest.records if r.base_entity in held])
    return (DatasetManifest(manifest.name, train_records, 'train', manifest.root, train_map),
            DatasetManifest(manifest.name + '-val', val_records, 'test', manifest.root, val_map))


# ==================== Выборка пакетов ====================

@dataclass
class BatchPlan:
    """План пакета: P сущностей по K экземпляров."""
    identities_per_batch: int = 10
    instances_per_identity: int = 3

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.instances_per_identity

    @classmethod
    def from_batch_size(cls, batch_size: int, instances: int) -> 'BatchPlan':
        if instances <= 0 or batch_size % instances:
            raise ConfigError('TRAIN_BATCH_SIZE', f"размер пакета {batch_size} не делится на K={instances}")
        return cls(batch_size // instances, instances)


def validate_batch_plan(manifest: DatasetManifest, plan: BatchPlan) -> Tuple[bool, Optional[str]]:
    """Проверить, что в манифесте достаточно сущностей для плана P×K."""
    if plan.identities_per_batch < 1 or plan.instances_per_identity < 1:
        return False, "P и K должны быть положительными"
    if plan.identities_per_batch > manifest.num_entities:
        return False, (f"P={plan.identities_per_batch} больше числа сущностей "
                       f"в манифесте ({manifest.num_entities})")
    return True, None


def sample_batches(manifest: DatasetManifest, plan: BatchPlan, seed: int,
                   epoch: int = 0) -> Iterator[List[int]]:
    """
    Выдать пакеты P×K индексов записей на одну эпоху.

    Каждая сущность попадает хотя бы в один пакет эпохи. Сущности, у которых
    меньше K изображений, добираются повтором с возвращением.

    Args:
        manifest: Обучающий манифест
        plan: План P×K
        seed: Глобальное зерно
        epoch: Номер эпохи (входит в зерно)

    Yields:
        Список из P×K индексов записей

    Raises:
        ConfigError: Если P больше числа сущностей
    """
    ok, message = validate_batch_plan(manifest, plan)
    if not ok:
        raise ConfigError('TRAIN_BATCH_SIZE', message)

    rng = np.random.default_rng([seed, epoch])
    index = manifest.entity_index()
    identities = sorted(index)
    order = rng.permutation(identities).tolist()
    P, K = plan.identities_per_batch, plan.instances_per_identity

    for start in range(0, len(order), P):
        group = order[start:start + P]
        if len(group) < P:
            rest = [e for e in identities if e not in group]
            group += rng.choice(rest, size=P - len(group), replace=False).tolist()
        batch = []
        for entity in group:
            pool = index[entity]
            if len(pool) >= K:
                chosen = rng.choice(pool, size=K, replace=False).tolist()
            else:
                chosen = list(pool) + rng.choice(pool, size=K - len(pool), replace=True).tolist()
            batch.extend(chosen)
        yield batch


def random_batches(manifest: DatasetManifest, batch_size: int, seed: int,
                   epoch: int = 0) -> Iterator[List[int]]:
    """Обычные перемешанные пакеты без балансировки по сущностям."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(manifest.records)).tolist()
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        if len(batch) >= 2:
            yield batch


def derive_seed(seed: int, epoch: int, index: int) -> int:
    """Зерно образца из (глобальное зерно, эпоха, позиция)."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


# ==================== Аугментации ====================

@dataclass
class AugmentationConfig:
    """Параметры аугментаций обучения."""
    target_size: int = 224
    resize_size: int = 256
    crop: bool = True
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: Tuple[float, float] = (0.02, 0.2)
    erase_aspect: Tuple[float, float] = (0.3, 3.3)
    erase_fill: Optional[Tuple[int, int, int]] = None
    mask_fill: Tuple[int, int, int] = (0, 0, 0)

    def disabled(self) -> 'AugmentationConfig':
        """Та же геометрия без случайных преобразований."""
        return dataclasses.replace(self, crop=False, flip_prob=0.0, erase_prob=0.0)


class AugmentResult:
    """Результат аугментации: растр, ориентация и сведения о геометрии."""

    def __init__(self, pixels: np.ndarray, orientation: int, geometry: Dict):
        self.pixels = pixels
        self.orientation = orientation
        self.geometry = geometry


def resize_pixels(pixels: np.ndarray, size: int) -> np.ndarray:
    """Привести растр к size×size (билинейно)."""
    if pixels.shape[0] == size and pixels.shape[1] == size:
        return pixels
    image = Image.fromarray(pixels).resize((size, size), Image.BILINEAR)
    return np.asarray(image).copy()


def flip_sample(pixels: np.ndarray, orientation: int) -> Tuple[np.ndarray, int]:
    """Отразить по горизонтали и инвертировать ориентацию."""
    return pixels[:, ::-1].copy(), 1 - orientation


def augment_pixels(pixels: np.ndarray, orientation: int, config: AugmentationConfig,
                   rng: np.random.Generator) -> AugmentResult:
    """
    Применить аугментации к растру.

    Порядок: масштаб, случайная вырезка, отражение (с инверсией ориентации),
    стирание прямоугольника.

    Args:
        pixels: Растр H×W×3 uint8 (фон уже удалён, если нужно)
        orientation: Метка ориентации
        config: Параметры аугментаций
        rng: Генератор случайных чисел

    Returns:
        AugmentResult с растром target_size×target_size×3
    """
    size = config.target_size
    geometry: Dict = {'crop': None, 'flip': False, 'erase': None}

    if config.crop and config.resize_size > size:
        work = resize_pixels(pixels, config.resize_size)
        top = int(rng.integers(0, config.resize_size - size + 1))
        left = int(rng.integers(0, config.resize_size - size + 1))
        work = work[top:top + size, left:left + size]
        geometry['crop'] = (top, left)
    else:
        work = resize_pixels(pixels, size)
    work = np.array(work, dtype=np.uint8, copy=True)

    if rng.random() < config.flip_prob:
        work, orientation = flip_sample(work, orientation)
        geometry['flip'] = True

    if rng.random() < config.erase_prob:
        fill = config.erase_fill or IMAGENET_MEAN_RGB
        region = pick_erase_region(size, size, config.erase_area, config.erase_aspect, rng)
        if region is not None:
            top, left, h, w = region
            work[top:top + h, left:left + w] = np.asarray(fill, dtype=np.uint8)
            geometry['erase'] = region

    return AugmentResult(work, orientation, geometry)


def pick_erase_region(height: int, width: int, area_range: Tuple[float, float],
                      aspect_range: Tuple[float, float], rng: np.random.Generator,
                      attempts: int = 10) -> Optional[Tuple[int, int, int, int]]:
    """
    Выбрать прямоугольник стирания внутри изображения.

    Returns:
        (top, left, h, w) или None, если за attempts попыток не удалось
    """
    for _ in range(attempts):
        area = rng.uniform(*area_range) * height * width
        aspect = math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1])))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 0 < h < height and 0 < w < width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return None


def load_record_pixels(manifest: DatasetManifest, record: SampleRecord,
                       fill: Tuple[int, int, int] = (0, 0, 0)) -> np.ndarray:
    """
    Прочитать изображение записи и, если задана маска, удалить фон.

    Raises:
        SampleError: Изображение или маска не читаются
    """
    path = manifest.resolve(record)
    try:
        pixels = read_image(path)
        if record.mask_path:
            mask = load_mask(record.mask_path)
            if mask.shape != pixels.shape[:2]:
                resized = Image.fromarray(mask.bits.astype(np.uint8) * 255).resize(
                    (pixels.shape[1], pixels.shape[0]), Image.NEAREST)
                mask = BinaryMask(np.asarray(resized) > 0)
            pixels = apply_mask(pixels, mask, fill).pixels
    except (OSError, ValueError) as e:
        raise SampleError(f"не удалось прочитать образец '{path}': {e}")
    return pixels


def augment(manifest: DatasetManifest, record: SampleRecord, config: AugmentationConfig,
            seed: int) -> AugmentResult:
    """
    Прочитать запись и применить аугментации.

    Маска накладывается до геометрических преобразований, поэтому остаётся
    выровненной с изображением.

    Args:
        manifest: Манифест (для разрешения путей)
        record: Запись
        config: Параметры аугментаций
        seed: Зерно образца (см. derive_seed)

    Returns:
        AugmentResult

    Raises:
        SampleError: Изображение не читается
    """
    pixels = load_record_pixels(manifest, record, config.mask_fill)
    return augment_pixels(pixels, record.orientation, config, np.random.default_rng(seed))


def channel_mean(manifest: DatasetManifest, limit: int = 256) -> Tuple[int, int, int]:
    """
    Средний цвет по каналам (по первым limit изображениям).

    Используется как цвет стирания прямоугольника.
    """
    totals = np.zeros(3, dtype=np.float64)
    count = 0
    for record in manifest.records[:limit]:
        try:
            pixels = load_record_pixels(manifest, record)
        except SampleError:
            continue
        totals += pixels.reshape(-1, 3).mean(axis=0)
        count += 1
    if count == 0:
        return IMAGENET_MEAN_RGB
    mean = np.round(totals / count).astype(int)
    return int(mean[0]), int(mean[1]), int(mean[2])
