"""
Модуль генерации синтетического набора данных.

Каждая сущность - процедурно раскрашенное пятно с уникальным узором
полос и пятен; правая и левая ориентации - зеркальные виды. Изображения
снимаются двумя "камерами" (разный тон фона); фон может коррелировать с
сущностью, чтобы воспроизводить фоновое смещение. Для конвейера масок
пишутся кандидаты (части животного и ложный кусок фона) и мягкий эталон.
"""
import os
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image, ImageFilter

from datacore import DatasetManifest, SampleRecord, save_manifest
from logger import get_logger
from maskpipe import BinaryMask, apply_mask, save_mask, write_image


class EntityStyle:
    """Параметры внешности одной сущности."""

    def __init__(self, rng: np.random.Generator):
        self.body_color = rng.uniform(90, 230, size=3)
        self.stripe_color = rng.uniform(0, 70, size=3)
        self.stripe_freq = rng.uniform(2.0, 5.0)
        self.stripe_angle = rng.uniform(0, np.pi)
        self.stripe_phase = rng.uniform(0, 2 * np.pi)
        self.spots = rng.uniform(-0.7, 0.7, size=(3, 2))
        self.spot_color = rng.uniform(0, 255, size=3)
        self.aspect = rng.uniform(0.45, 0.7)
        self.background = rng.uniform(20, 235, size=3)


def _render(style: EntityStyle, size: int, orientation: int, camera: int, biased: bool,
            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Нарисовать одно изображение.

    Returns:
        Кортеж (растр H×W×3, маска тела, маска головы)
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size * rng.uniform(0.28, 0.34)
    cx = size / 2 + rng.uniform(-0.06, 0.06) * size
    cy = size / 2 + rng.uniform(-0.06, 0.06) * size
    # относительные координаты тела; левый бок - зеркальное отражение правого
    u = (xs - cx) / scale
    v = (ys - cy) / (scale * style.aspect)
    if orientation == 0:
        u = -u
    body = u ** 2 + v ** 2 <= 1.0
    head = (u - 1.05) ** 2 + ((v + 0.35) * style.aspect) ** 2 <= 0.3 ** 2
    animal = body | head

    if biased:
        background = style.background
    else:
        background = rng.uniform(30, 220, size=3)
    if camera == 1:
        background = 0.7 * background + 0.3 * np.array([60.0, 90.0, 140.0])
    noise = rng.normal(0, 12, size=(size, size, 3))
    pixels = np.broadcast_to(background, (size, size, 3)) + noise

    proj = u * np.cos(style.stripe_angle) + v * np.sin(style.stripe_angle)
    stripes = np.sin(2 * np.pi * style.stripe_freq * proj / 2 + style.stripe_phase) > 0.35
    coat = np.where(stripes[..., None], style.stripe_color, style.body_color)
    for su, sv in style.spots:
        spot = (u - su) ** 2 + (v - sv) ** 2 <= 0.18 ** 2
        coat = np.where(spot[..., None], style.spot_color, coat)
    coat = np.where(head[..., None] & ~body[..., None], style.body_color * 0.8, coat)
    light = rng.uniform(0.85, 1.15)
    pixels = np.where(animal[..., None], coat * light + rng.normal(0, 6, size=(size, size, 3)), pixels)
    return np.clip(np.round(pixels), 0, 255).astype(np.uint8), body, head & ~body


def _candidates(body: np.ndarray, head: np.ndarray, rng: np.random.Generator) -> List[BinaryMask]:
    """Кандидаты в стиле сегментатора: части тела, голова и ложный кусок фона."""
    size = body.shape[0]
    rows = np.flatnonzero(body.any(axis=1))
    middle = int(rows.mean()) if rows.size else size // 2
    upper = body.copy()
    upper[middle:] = False
    lower = body.copy()
    lower[:middle] = False
    distractor = np.zeros_like(body)
    side = max(3, size // 8)
    corner = int(rng.integers(0, 2))
    distractor[:side, (0 if corner == 0 else size - side):(side if corner == 0 else size)] = True
    distractor &= ~(body | head)
    return [BinaryMask(upper), BinaryMask(lower), BinaryMask(head), BinaryMask(distractor)]


def _soft_reference(animal: np.ndarray) -> np.ndarray:
    """Мягкая карта заметности: размытая маска животного."""
    raster = Image.fromarray((animal * 220).astype(np.uint8))
    blurred = raster.filter(ImageFilter.GaussianBlur(radius=max(1, animal.shape[0] // 32)))
    return np.asarray(blurred)


def make_toy_dataset(out_dir: str, train_entities: int = 16, test_entities: int = 16,
                     images_per_entity: int = 8, size: int = 64, biased: bool = False,
                     seed: int = 0) -> Dict[str, str]:
    """
    Записать синтетический набор данных.

    Структура out_dir: original/ (исходные изображения), masked/ (фон удалён
    по истинной маске), gt_masks/, candidates/<имя>/*.png, reference/<имя>.png,
    train.csv и test.csv (сущности не пересекаются).

    Args:
        out_dir: Каталог набора
        train_entities: Число обучающих сущностей
        test_entities: Число тестовых сущностей
        images_per_entity: Изображений на сущность (обе камеры, обе стороны)
        size: Сторона изображения
        biased: Фон определяется сущностью (для измерения фонового смещения)
        seed: Зерно

    Returns:
        Словарь путей: train_manifest, test_manifest, original_root, masked_root,
        candidates, reference
    """
    if images_per_entity < 2:
        raise ValueError("нужно хотя бы 2 изображения на сущность")
    rng = np.random.default_rng(seed)
    paths = {
        'original_root': os.path.join(out_dir, 'original'),
        'masked_root': os.path.join(out_dir, 'masked'),
        'gt_masks': os.path.join(out_dir, 'gt_masks'),
        'candidates': os.path.join(out_dir, 'candidates'),
        'reference': os.path.join(out_dir, 'reference'),
        'train_manifest': os.path.join(out_dir, 'train.csv'),
        'test_manifest': os.path.join(out_dir, 'test.csv'),
    }
    for key in ('original_root', 'masked_root', 'gt_masks', 'candidates', 'reference'):
        os.makedirs(paths[key], exist_ok=True)

    splits = {'train': [], 'test': []}
    for entity in range(train_entities + test_entities):
        split = 'train' if entity < train_entities else 'test'
        style = EntityStyle(rng)
        for k in range(images_per_entity):
            orientation = k % 2
            camera = (k // 2) % 2
            name = f"e{entity:03d}_{k:02d}.png"
            stem = os.path.splitext(name)[0]
            pixels, body, head = _render(style, size, orientation, camera, biased, rng)
            animal = BinaryMask(body | head)

            write_image(pixels, os.path.join(paths['original_root'], name))
            write_image(apply_mask(pixels, animal).pixels, os.path.join(paths['masked_root'], name))
            save_mask(animal, os.path.join(paths['gt_masks'], name))
            for index, candidate in enumerate(_candidates(body, head, rng)):
                save_mask(candidate, os.path.join(paths['candidates'], stem, f"{index}.png"))
            Image.fromarray(_soft_reference(animal.bits)).save(os.path.join(paths['reference'], name))

            splits[split].append(SampleRecord(name, -1, orientation, camera, None, f"toy{entity:03d}"))

    for split, records in splits.items():
        manifest = DatasetManifest(f"toy-{split}", records, split, out_dir)
        save_manifest(manifest, paths[f"{split}_manifest"])
    get_logger().info(f"Синтетический набор записан в {out_dir}: "
                      f"{train_entities}+{test_entities} сущностей по {images_per_entity} изображений")
    return paths
