"""
Модуль визуализации соответствий частей тела.

Точка-запрос на одном изображении, лучшее совпадение на другом по
косинусному сходству плотных дескрипторов, тепловая карта сходства и
трёхпанельный рисунок.
"""
import hashlib
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from matplotlib.colors import Normalize
from PIL import Image, ImageDraw

from datacore import resize_pixels
from logger import get_logger
from losskit import WarpField
from maskpipe import BinaryMask
from nettower import ReIDNet, to_input_tensor

LAYERS = ('dve', 'stage3')

PANEL_MARGIN = 8
QUERY_COLOR = (0, 220, 0)
MATCH_COLOR = (230, 0, 0)
HEATMAP_ALPHA = 0.55


class MatchQuery:
    """
    Запрос сопоставления: точка (x, y) на исходном изображении и целевое изображение.
    """

    def __init__(self, source: np.ndarray, point: Tuple[int, int], target: np.ndarray,
                 layer: str = 'dve', source_mask: Optional[BinaryMask] = None):
        if layer not in LAYERS:
            raise ValueError(f"неизвестный слой '{layer}', допустимо: {', '.join(LAYERS)}")
        h, w = source.shape[:2]
        x, y = point
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"точка ({x}, {y}) вне изображения {w}×{h}")
        self.source = source
        self.point = (int(x), int(y))
        self.target = target
        self.layer = layer
        self.source_mask = source_mask


class MatchResult:
    def __init__(self, point: Tuple[int, int], cell: Tuple[int, int], similarity: np.ndarray,
                 heatmap: np.ndarray, source: np.ndarray, target: np.ndarray,
                 query_point: Tuple[int, int], metadata: Dict):
        self.point = point
        self.cell = cell
        self.similarity = similarity
        self.heatmap = heatmap
        self.source = source
        self.target = target
        self.query_point = query_point
        self.metadata = metadata


def _tensor_hash(tensor: torch.Tensor) -> str:
    return hashlib.sha256(tensor.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def point_to_cell(point: Tuple[int, int], image_size: Tuple[int, int],
                  grid_size: Tuple[int, int]) -> Tuple[int, int]:
    """
    Пиксель (x, y) -> ячейка (row, col) сетки дескрипторов, округление к ближайшему.
    """
    (x, y), (h, w), (gh, gw) = point, image_size, grid_size
    row = int(np.clip(np.floor(y * gh / h + 0.5), 0, gh - 1))
    col = int(np.clip(np.floor(x * gw / w + 0.5), 0, gw - 1))
    return row, col


def cell_to_point(cell: Tuple[int, int], image_size: Tuple[int, int],
                  grid_size: Tuple[int, int]) -> Tuple[int, int]:
    (row, col), (h, w), (gh, gw) = cell, image_size, grid_size
    return int(round(col * w / gw)), int(round(row * h / gh))


def descriptor_map(model: ReIDNet, images: torch.Tensor, layer: str) -> torch.Tensor:
    """Нормализованные дескрипторы batch×C×h×w выбранного слоя."""
    with torch.no_grad():
        if layer == 'dve':
            return model.dve_descriptors(images)
        return F.normalize(model.stage3_features(images), dim=1)


def _prepare(model: ReIDNet, query: MatchQuery) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int], torch.Tensor]:
    size = model.config.input_size
    h, w = query.source.shape[:2]
    source = resize_pixels(query.source, size)
    target = resize_pixels(query.target, size)
    point = (int(round(query.point[0] * size / w)), int(round(query.point[1] * size / h)))
    point = (min(point[0], size - 1), min(point[1], size - 1))
    return source, target, point, to_input_tensor([source, target], model.config)


def match_point(model: ReIDNet, query: MatchQuery) -> MatchResult:
    """
    Найти лучшее совпадение точки-запроса на целевом изображении.

    Оба изображения приводятся к размеру входа модели; координаты результата
    даны в этом размере. При равных сходствах берётся первая ячейка.

    Args:
        model: Модель
        query: Запрос

    Returns:
        MatchResult с точкой, ячейкой, картой сходства h'×w' и тепловой картой H×W
    """
    model.eval()
    if query.source_mask is not None:
        x, y = query.point
        if not query.source_mask.bits[y, x]:
            get_logger().warning(f"Точка-запрос ({x}, {y}) попадает на удалённый фон")
    source, target, point, batch = _prepare(model, query)
    descriptors = descriptor_map(model, batch, query.layer)
    size = (batch.shape[2], batch.shape[3])
    grid = (descriptors.shape[2], descriptors.shape[3])
    row, col = point_to_cell(point, size, grid)

    similarity = torch.einsum('chw,c->hw', descriptors[1], descriptors[0][:, row, col])
    best = int(torch.argmax(similarity.flatten()))
    cell = (best // grid[1], best % grid[1])
    heatmap = F.interpolate(similarity[None, None], size=size, mode='bilinear', align_corners=False)[0, 0]

    metadata = {
        'layer': query.layer,
        'masked': query.source_mask is not None,
        'query_cell': [row, col],
        'match_cell': list(cell),
        'max_similarity': float(similarity.max()),
        'source_hash': _tensor_hash(batch[0]),
        'target_hash': _tensor_hash(batch[1]),
    }
    return MatchResult(cell_to_point(cell, size, grid), cell, similarity.numpy(), heatmap.numpy(),
                       source, target, point, metadata)


def _dot(draw: ImageDraw.ImageDraw, center: Tuple[int, int], offset: Tuple[int, int],
         radius: int, color: Tuple[int, int, int]) -> None:
    cx, cy = center[0] + offset[0], center[1] + offset[1]
    draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=color, outline=(255, 255, 255))


def heatmap_overlay(target: np.ndarray, heatmap: np.ndarray) -> np.ndarray:
    """Наложить тепловую карту (шкала закреплена на [-1, 1]) на изображение."""
    colors = colormaps['jet'](Normalize(vmin=-1.0, vmax=1.0, clip=True)(heatmap))[..., :3]
    blended = (1 - HEATMAP_ALPHA) * target.astype(np.float64) + HEATMAP_ALPHA * 255.0 * colors
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def render_panel(result: MatchResult, out_path: str) -> str:
    """
    Нарисовать три панели: источник с точкой-запросом, цель с совпадением,
    цель с тепловой картой.

    Args:
        result: Результат match_point
        out_path: Путь к PNG

    Returns:
        Путь к файлу
    """
    h, w = result.target.shape[:2]
    m = PANEL_MARGIN
    canvas = Image.new('RGB', (3 * w + 4 * m, h + 2 * m), (255, 255, 255))
    source = result.source if result.source.shape[:2] == (h, w) else resize_pixels(result.source, h)
    panels = [source, result.target, heatmap_overlay(result.target, result.heatmap)]
    for i, panel in enumerate(panels):
        canvas.paste(Image.fromarray(panel), (m + i * (w + m), m))
    draw = ImageDraw.Draw(canvas)
    radius = max(2, w // 40)
    _dot(draw, result.query_point, (m, m), radius, QUERY_COLOR)
    _dot(draw, result.point, (2 * m + w, m), radius, MATCH_COLOR)
    _dot(draw, result.point, (3 * m + 2 * w, m), radius, MATCH_COLOR)
    try:
        canvas.save(out_path, format='PNG')
    except OSError as e:
        raise OSError(f"не удалось записать рисунок {out_path}: {e}")
    return out_path


def compare_models(models: Dict[str, ReIDNet], query: MatchQuery) -> Dict[str, MatchResult]:
    """
    Сопоставить одну точку несколькими моделями с одинаковой предобработкой.

    Raises:
        ValueError: Предобработка моделей различается (по хешам входных тензоров)
    """
    results = {name: match_point(model, query) for name, model in models.items()}
    hashes = {(r.metadata['source_hash'], r.metadata['target_hash']) for r in results.values()}
    if len(hashes) > 1:
        raise ValueError("модели используют разную предобработку входа; сравнение некорректно")
    return results


def warp_hit_rate(model: ReIDNet, images: Sequence[np.ndarray], num_points: int = 50,
                  radius: float = 2.0, strength: float = 1.0, seed: int = 0,
                  layer: str = 'dve') -> float:
    """
    Доля точек деформированного изображения, чьё совпадение на исходном
    лежит не дальше radius ячеек от истинного соответствия.

    Args:
        model: Модель
        images: Исходные растры
        num_points: Число точек-запросов (распределяются по изображениям)
        radius: Допуск в ячейках сетки дескрипторов
        strength: Сила деформации
        seed: Зерно
        layer: 'dve' или 'stage3'

    Returns:
        Доля попаданий в [0, 1]
    """
    model.eval()
    rng = np.random.default_rng(seed)
    size = model.config.input_size
    hits = total = 0
    per_image = int(np.ceil(num_points / max(len(images), 1)))
    for pixels in images:
        original = to_input_tensor([resize_pixels(pixels, size)], model.config)
        warp = WarpField(int(rng.integers(0, 2 ** 31 - 1)), strength)
        warped = warp.apply(original)
        d_warp = descriptor_map(model, warped, layer)[0]
        d_orig = descriptor_map(model, original, layer)[0]
        gh, gw = d_warp.shape[1], d_warp.shape[2]
        truth = warp.grid(gh, gw)[0].numpy()
        for _ in range(per_image):
            if total >= num_points:
                break
            row, col = int(rng.integers(0, gh)), int(rng.integers(0, gw))
            gx, gy = truth[row, col]
            if abs(gx) > 1 or abs(gy) > 1:
                continue
            true_col, true_row = (gx + 1) / 2 * (gw - 1), (gy + 1) / 2 * (gh - 1)
            similarity = torch.einsum('chw,c->hw', d_orig, d_warp[:, row, col])
            best = int(torch.argmax(similarity.flatten()))
            match_row, match_col = best // gw, best % gw
            if np.hypot(match_row - true_row, match_col - true_col) <= radius:
                hits += 1
            total += 1
    return hits / total if total else 0.0
