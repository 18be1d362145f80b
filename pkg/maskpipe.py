"""
Модуль удаления фона: слияние масок-кандидатов с эталонной маской.

Кандидаты (маски объектов сегментатора экземпляров) фильтруются критерием
относительно эталона (маска выделения значимого объекта), выжившие
объединяются попиксельно, фон изображения заливается постоянным цветом.
"""
import os
import threading
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from logger import get_logger

CRITERION_KINDS = ('iou', 'ioc', 'passthrough')

# Долгие имена из отчётов приводятся к коротким
_KIND_ALIASES = {
    'intersection-over-candidate': 'ioc',
    'iou': 'iou',
    'ioc': 'ioc',
    'passthrough': 'passthrough',
}
CRITERION_NAMES = tuple(_KIND_ALIASES)

MASK_SUFFIXES = ('.png', '.bmp', '.tif', '.tiff', '.rle')


class MaskShapeError(ValueError):
    """Несовпадение размеров масок или изображения и маски."""


class BinaryMask:
    """
    Двумерная бинарная маска переднего плана.
    """

    def __init__(self, bits: np.ndarray):
        """
        Инициализация маски.

        Args:
            bits: Двумерный массив; ненулевые элементы - передний план
        """
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise MaskShapeError(f"маска должна быть двумерной, получено {bits.shape}")
        self.bits = bits.astype(bool)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def zeros(cls, height: int, width: int) -> 'BinaryMask':
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_soft(cls, values: np.ndarray) -> 'BinaryMask':
        """
        Бинаризовать мягкую маску по порогу 0.5 от максимума.

        Args:
            values: Двумерный массив неотрицательных значений

        Returns:
            BinaryMask (пустая, если максимум равен нулю)
        """
        values = np.asarray(values, dtype=np.float64)
        peak = values.max() if values.size else 0.0
        if peak <= 0:
            return cls(np.zeros(values.shape, dtype=bool))
        return cls(values >= 0.5 * peak)

    def union(self, other: 'BinaryMask') -> 'BinaryMask':
        _check_same_shape(self, other)
        return BinaryMask(self.bits | other.bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and self.shape == other.shape \
            and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BinaryMask({self.height}x{self.width}, area={self.area})"


class FusionCriterion:
    """
    Критерий отбора кандидатов: вид оценки и порог.
    """

    def __init__(self, kind: str = 'iou', threshold: float = 0.3, min_area: int = 0):
        """
        Инициализация критерия.

        Args:
            kind: 'iou', 'ioc' (пересечение к площади кандидата) или 'passthrough'
            threshold: Порог в [0, 1]; кандидат принимается при оценке >= порога
            min_area: Минимальная площадь кандидата (0 - фильтр выключен)
        """
        kind = _KIND_ALIASES.get(kind, kind)
        if kind not in CRITERION_KINDS:
            raise ValueError(f"неизвестный критерий '{kind}', допустимы {CRITERION_KINDS}")
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"порог должен лежать в [0, 1], получено {threshold}")
        if min_area < 0:
            raise ValueError("min_area не может быть отрицательной")
        self.kind = kind
        self.threshold = float(threshold)
        self.min_area = int(min_area)

    def __repr__(self):
        return f"FusionCriterion(kind='{self.kind}', threshold={self.threshold}, min_area={self.min_area})"


# Критерии, подобранные под конкретные наборы данных
CRITERIA_PRESETS: Dict[str, FusionCriterion] = {
    'atrw': FusionCriterion('iou', 0.3),
    'elpephants': FusionCriterion('ioc', 0.5),
    'yakreid': FusionCriterion('passthrough', 0.0),
}


class FusionResult:
    """Итог слияния: маска, число выживших кандидатов и флаг предупреждения."""

    def __init__(self, mask: BinaryMask, survivors: int, total: int):
        self.mask = mask
        self.survivors = survivors
        self.total = total

    @property
    def warning(self) -> bool:
        return self.survivors == 0


class MaskedImage:
    """Изображение с залитым фоном."""

    def __init__(self, pixels: np.ndarray, mask: BinaryMask, fill: Tuple[int, int, int]):
        self.pixels = pixels
        self.mask = mask
        self.fill = fill


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise MaskShapeError(f"размеры масок не совпадают: {a.shape} и {b.shape}")


# ==================== Критерий и слияние ====================

def criterion_score(candidate: BinaryMask, reference: BinaryMask, kind: str) -> float:
    """
    Оценить кандидата относительно эталона.

    Пустые знаменатели дают 0, поэтому пустой кандидат всегда отбрасывается.

    Args:
        candidate: Маска-кандидат
        reference: Эталонная маска
        kind: 'iou' или 'ioc'

    Returns:
        Оценка в [0, 1]

    Raises:
        MaskShapeError: Если размеры масок различаются
    """
    _check_same_shape(candidate, reference)
    kind = _KIND_ALIASES.get(kind, kind)
    intersection = int(np.logical_and(candidate.bits, reference.bits).sum())
    if kind == 'iou':
        union = int(np.logical_or(candidate.bits, reference.bits).sum())
        return intersection / union if union else 0.0
    if kind == 'ioc':
        area = candidate.area
        return intersection / area if area else 0.0
    raise ValueError(f"критерий '{kind}' не вычисляет оценку")


def fuse_masks(candidates: Sequence[BinaryMask], reference: BinaryMask,
               criterion: FusionCriterion) -> FusionResult:
    """
    Объединить кандидатов, прошедших критерий.

    Args:
        candidates: Маски-кандидаты
        reference: Эталонная маска (задаёт размер результата)
        criterion: Критерий отбора

    Returns:
        FusionResult; при отсутствии выживших - пустая маска и warning=True

    Raises:
        MaskShapeError: Если размеры масок различаются
    """
    for candidate in candidates:
        _check_same_shape(candidate, reference)

    fused = np.zeros(reference.shape, dtype=bool)
    survivors = 0
    for candidate in candidates:
        # пустой кандидат не несёт животного
        if candidate.area == 0 or candidate.area < criterion.min_area:
            continue
        if criterion.kind != 'passthrough':
            if criterion_score(candidate, reference, criterion.kind) < criterion.threshold:
                continue
        fused |= candidate.bits
        survivors += 1

    if survivors == 0:
        get_logger().warning(f"Слияние масок: ни один из {len(candidates)} кандидатов не прошёл {criterion}")
    return FusionResult(BinaryMask(fused), survivors, len(candidates))


def apply_mask(image: np.ndarray, mask: BinaryMask,
               fill: Tuple[int, int, int] = (0, 0, 0)) -> MaskedImage:
    """
    Залить фон изображения.

    Args:
        image: Массив H×W×3 (uint8)
        mask: Маска переднего плана того же размера
        fill: Цвет заливки фона по каналам

    Returns:
        MaskedImage

    Raises:
        MaskShapeError: Если размеры изображения и маски различаются
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[:2] != mask.shape:
        raise MaskShapeError(f"размер изображения {image.shape} не совпадает с маской {mask.shape}")
    pixels = image.copy()
    pixels[~mask.bits] = np.asarray(fill, dtype=image.dtype)
    return MaskedImage(pixels, mask, tuple(fill))


# ==================== Чтение и запись ====================

def encode_rle(mask: BinaryMask) -> str:
    """
    Закодировать маску длинами серий.

    Первая строка - "H W", вторая - длины серий построчно, начиная с фона.
    """
    flat = mask.bits.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return f"{mask.height} {mask.width}\n" + " ".join(str(r) for r in runs) + "\n"


def decode_rle(text: str) -> BinaryMask:
    """
    Раскодировать маску из формата длин серий.

    Raises:
        ValueError: Если заголовок повреждён или сумма серий не совпадает с размером
    """
    lines = text.strip().splitlines()
    header = lines[0].split() if lines else []
    if len(header) != 2:
        raise ValueError(f"заголовок RLE должен содержать высоту и ширину, получено: {header}")
    height, width = (int(v) for v in header)
    runs = [int(v) for v in lines[1].split()] if len(lines) > 1 else []
    if height < 0 or width < 0 or any(r < 0 for r in runs):
        raise ValueError("размеры и длины серий RLE не могут быть отрицательными")
    if sum(runs) != height * width:
        raise ValueError(f"сумма серий {sum(runs)} не равна {height}x{width}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, runs)
    return BinaryMask(flat.reshape(height, width))


def load_mask(path: str, soft: bool = False) -> BinaryMask:
    """
    Загрузить маску из файла.

    Args:
        path: PNG-подобный растр (одноканальный) или файл .rle
        soft: Бинаризовать по 0.5 от максимума вместо "ненулевое = передний план"

    Returns:
        BinaryMask
    """
    if path.lower().endswith('.rle'):
        with open(path, 'r', encoding='utf-8') as f:
            return decode_rle(f.read())
    with Image.open(path) as img:
        values = np.asarray(img.convert('L'))
    if soft:
        return BinaryMask.from_soft(values)
    return BinaryMask(values > 0)


def save_mask(mask: BinaryMask, path: str) -> None:
    """Сохранить маску (0/255, одноканальный PNG или .rle)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if path.lower().endswith('.rle'):
        with open(path, 'w', encoding='utf-8') as f:
            f.write(encode_rle(mask))
        return
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(path)


def read_image(path: str) -> np.ndarray:
    """Прочитать изображение как массив H×W×3 uint8."""
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB')).copy()


def write_image(pixels: np.ndarray, path: str) -> None:
    """Сохранить массив H×W×3 uint8, формат - по расширению файла."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def _find_reference(reference_dir: str, stem: str) -> Optional[str]:
    for suffix in MASK_SUFFIXES:
        path = os.path.join(reference_dir, stem + suffix)
        if os.path.exists(path):
            return path
    return None


def _find_candidates(candidate_dir: str, stem: str) -> List[str]:
    folder = os.path.join(candidate_dir, stem)
    if not os.path.isdir(folder):
        return []
    names = sorted(n for n in os.listdir(folder) if n.lower().endswith(MASK_SUFFIXES))
    return [os.path.join(folder, n) for n in names]


# ==================== Пакетная обработка ====================

def fuse_entry(rel_path: str, image_root: str, candidate_dir: str, reference_dir: str,
               out_dir: str, criterion: FusionCriterion,
               fill: Tuple[int, int, int] = (0, 0, 0)) -> Dict:
    """
    Обработать одну запись манифеста.

    Args:
        rel_path: Путь к изображению относительно image_root
        image_root: Корень исходных изображений
        candidate_dir: Каталог кандидатов (<stem>/*.png)
        reference_dir: Каталог эталонов (<stem>.png)
        out_dir: Каталог результатов
        criterion: Критерий отбора
        fill: Цвет заливки фона

    Returns:
        Строка отчёта: path, candidates, survivors, status, message
    """
    stem = os.path.splitext(rel_path)[0]
    row = {'path': rel_path, 'candidates': 0, 'survivors': 0, 'status': 'ok', 'message': ''}

    reference_path = _find_reference(reference_dir, stem)
    if reference_path is None:
        row['status'] = 'skipped'
        row['message'] = 'нет эталонной маски'
        return row

    try:
        reference = load_mask(reference_path, soft=True)
        candidates = [load_mask(p) for p in _find_candidates(candidate_dir, stem)]
        row['candidates'] = len(candidates)
        result = fuse_masks(candidates, reference, criterion)
        image = read_image(os.path.join(image_root, rel_path))
        masked = apply_mask(image, result.mask, fill)
        save_mask(result.mask, os.path.join(out_dir, 'masks', stem + '.png'))
        write_image(masked.pixels, os.path.join(out_dir, 'images', rel_path))
    except Exception as e:
        row['status'] = 'error'
        row['message'] = f"{type(e).__name__}: {e}"
        return row

    row['survivors'] = result.survivors
    if result.warning:
        row['status'] = 'warning'
        row['message'] = 'нет выживших кандидатов, маска пуста'
    return row


def batch_fuse(entries: Sequence[str], image_root: str, candidate_dir: str, reference_dir: str,
               out_dir: str, criterion: FusionCriterion,
               fill: Tuple[int, int, int] = (0, 0, 0), workers: int = 4) -> pd.DataFrame:
    """
    Слить маски для всех записей манифеста в нескольких потоках.

    Порядок строк отчёта совпадает с порядком манифеста независимо от того,
    в каком порядке потоки закончили работу.

    Args:
        entries: Относительные пути изображений в порядке манифеста
        image_root: Корень исходных изображений
        candidate_dir: Каталог кандидатов
        reference_dir: Каталог эталонов
        out_dir: Каталог результатов (masks/ и images/)
        criterion: Критерий отбора
        fill: Цвет заливки фона
        workers: Число потоков

    Returns:
        Таблица отчёта (по строке на запись)
    """
    logger = get_logger()
    rows: List[Optional[Dict]] = [None] * len(entries)
    lock = threading.Lock()
    cursor = iter(range(len(entries)))

    def worker():
        """Забирать записи из общего итератора, пока они есть."""
        while True:
            with lock:
                index = next(cursor, None)
            if index is None:
                return
            try:
                row = fuse_entry(entries[index], image_root, candidate_dir, reference_dir,
                                 out_dir, criterion, fill)
            except Exception as e:
                # каждая запись получает строку отчёта
                row = {'path': entries[index], 'candidates': 0, 'survivors': 0,
                       'status': 'error', 'message': f"{type(e).__name__}: {e}"}
            rows[index] = row
            if row['status'] != 'ok':
                logger.warning(f"Слияние масок '{row['path']}': {row['status']} ({row['message']})")

    threads = [threading.Thread(target=worker) for _ in range(max(1, min(workers, len(entries))))]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    table = pd.DataFrame(rows, columns=['path', 'candidates', 'survivors', 'status', 'message'])
    logger.info(f"Слияние масок завершено: {len(entries)} записей, "
                f"пропущено {int((table['status'] == 'skipped').sum())}, "
                f"ошибок {int((table['status'] == 'error').sum())}")
    return table
