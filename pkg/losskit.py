"""
Модуль функций потерь.

Перекрёстная энтропия сущности со сглаживанием меток, бинарная энтропия
ориентации, circle loss, потеря плотных эквивариантных дескрипторов (DVE)
со случайными деформациями и их взвешенная сумма.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from logger import get_logger

# Заглушка для замаскированных логитов в logsumexp (вместо -inf, чтобы не было NaN в градиентах)
MASKED_LOGIT = -1.0e4


class NonFiniteLossError(ValueError):
    """Слагаемое потери стало NaN или бесконечностью."""

    def __init__(self, term: str, value: float):
        super().__init__(f"слагаемое потери {term} не конечно: {value}")
        self.term = term
        self.value = value


@dataclass
class CircleParams:
    gamma: float = 64.0
    margin: float = 0.25

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma должна быть положительной, получено {self.gamma}")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError(f"margin вне [0, 1): {self.margin}")


@dataclass
class LossWeights:
    """Веса λ_reID и λ_DVE; ноль выключает слагаемое."""
    lambda_reid: float = 2.0
    lambda_dve: float = 0.2

    def __post_init__(self):
        if self.lambda_reid < 0 or self.lambda_dve < 0:
            raise ValueError("веса потерь должны быть неотрицательными")


@dataclass
class LossCounters:
    """Счётчики пропущенных якорей и обрезанных координат деформации."""
    skipped_anchors: int = 0
    clamped_coords: int = 0

    def to_dict(self) -> Dict[str, int]:
        return {'skipped_anchors': self.skipped_anchors, 'clamped_coords': self.clamped_coords}


class SimilaritySets:
    """Косинусные сходства якоря: s_p с позитивами, s_n с негативами."""

    def __init__(self, s_p: torch.Tensor, s_n: torch.Tensor):
        self.s_p = s_p
        self.s_n = s_n

    def __repr__(self):
        return f"SimilaritySets(K={self.s_p.numel()}, L={self.s_n.numel()})"


# ==================== Классификационные потери ====================

def id_loss(id_logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    """
    Перекрёстная энтропия со сглаженным распределением q = (1-ε)·onehot + ε/C.

    Args:
        id_logits: Логиты batch×C
        targets: Номера классов batch
        smoothing: ε

    Returns:
        Скаляр - среднее по пакету

    Raises:
        ValueError: C < 2 или метка вне [0, C)
    """
    num_classes = id_logits.shape[1]
    if num_classes < 2:
        raise ValueError(f"нужно хотя бы 2 класса, получено {num_classes}")
    bad = ((targets < 0) | (targets >= num_classes)).nonzero().flatten()
    if bad.numel():
        row = int(bad[0])
        raise ValueError(f"строка {row}: метка {int(targets[row])} вне [0, {num_classes})")
    log_probs = F.log_softmax(id_logits, dim=1)
    q = torch.full_like(log_probs, smoothing / num_classes)
    q.scatter_(1, targets.long().view(-1, 1), 1.0 - smoothing + smoothing / num_classes)
    return -(q * log_probs).sum(dim=1).mean()


def lr_loss(lr_logit: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """
    Бинарная перекрёстная энтропия ориентации (через log-sigmoid).

    Raises:
        ValueError: Метка не 0 и не 1
    """
    targets = targets.to(lr_logit.dtype).view(-1)
    if not bool(((targets == 0) | (targets == 1)).all()):
        raise ValueError("метки ориентации должны быть 0 или 1")
    return F.binary_cross_entropy_with_logits(lr_logit.view(-1), targets)


# ==================== Circle loss ====================

def circle_loss(sims: SimilaritySets, params: CircleParams,
                detach_weights: bool = False) -> torch.Tensor:
    """
    Circle loss одного якоря: log(1 + Σ_n exp(γ·α_n·(s_n - m)) · Σ_p exp(-γ·α_p·(s_p - 1 + m))).

    Вычисляется как softplus(lse_n + lse_p). Пустое множество позитивов или
    негативов даёт ровно 0.

    Args:
        sims: Сходства якоря
        params: γ и m
        detach_weights: Не пропускать градиент через веса α

    Returns:
        Скаляр
    """
    s_p, s_n = sims.s_p.flatten(), sims.s_n.flatten()
    if s_p.numel() == 0 or s_n.numel() == 0:
        return (s_p.sum() + s_n.sum()) * 0.0
    gamma, m = params.gamma, params.margin
    alpha_p = torch.clamp_min(-s_p + 1 + m, 0.0)
    alpha_n = torch.clamp_min(s_n + m, 0.0)
    if detach_weights:
        alpha_p, alpha_n = alpha_p.detach(), alpha_n.detach()
    logit_p = -gamma * alpha_p * (s_p - (1 - m))
    logit_n = gamma * alpha_n * (s_n - m)
    return F.softplus(torch.logsumexp(logit_n, dim=0) + torch.logsumexp(logit_p, dim=0))


def pairwise_sets(embeddings: torch.Tensor, labels: torch.Tensor) -> List[SimilaritySets]:
    """
    Наборы сходств для каждого якоря пакета (без пар с самим собой).

    Args:
        embeddings: batch×d (нормализуются внутри)
        labels: batch

    Returns:
        Список SimilaritySets по якорям
    """
    unit = F.normalize(embeddings, dim=1)
    sim = unit @ unit.t()
    result = []
    for i in range(sim.shape[0]):
        others = torch.arange(sim.shape[0], device=sim.device) != i
        same = labels == labels[i]
        result.append(SimilaritySets(sim[i][others & same], sim[i][~same]))
    return result


def circle_batch_loss(embeddings: torch.Tensor, labels: torch.Tensor, params: CircleParams,
                      counters: Optional[LossCounters] = None,
                      detach_weights: bool = False) -> torch.Tensor:
    """
    Circle loss пакета: среднее по якорям, у которых есть хотя бы один позитив.

    Равно среднему circle_loss по pairwise_sets, но считается матрично.

    Args:
        embeddings: batch×d
        labels: batch
        params: γ и m
        counters: Счётчики (число пропущенных якорей увеличивается)
        detach_weights: Не пропускать градиент через веса α

    Returns:
        Скаляр
    """
    unit = F.normalize(embeddings, dim=1)
    sim = unit @ unit.t()
    n = sim.shape[0]
    same = labels.view(-1, 1) == labels.view(1, -1)
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    pos_mask = same & ~eye
    neg_mask = ~same

    gamma, m = params.gamma, params.margin
    alpha_p = torch.clamp_min(-sim + 1 + m, 0.0)
    alpha_n = torch.clamp_min(sim + m, 0.0)
    if detach_weights:
        alpha_p, alpha_n = alpha_p.detach(), alpha_n.detach()
    masked = torch.full_like(sim, MASKED_LOGIT)
    logit_p = torch.where(pos_mask, -gamma * alpha_p * (sim - (1 - m)), masked)
    logit_n = torch.where(neg_mask, gamma * alpha_n * (sim - m), masked)
    per_anchor = F.softplus(torch.logsumexp(logit_n, dim=1) + torch.logsumexp(logit_p, dim=1))

    has_pos = pos_mask.any(dim=1)
    skipped = int((~has_pos).sum())
    if counters is not None:
        counters.skipped_anchors += skipped
    if skipped == n:
        return embeddings.sum() * 0.0
    return per_anchor[has_pos].mean()


# ==================== Деформации ====================

class WarpField:
    """
    Случайная гладкая деформация нормализованного квадрата [-1, 1]².

    Отображение u -> A·u + t + d(u), где d - сумма синусоид. Значение в точке
    u - координата в исходном изображении, из которой берётся пиксель u
    деформированного (соглашение grid_sample, align_corners=True).
    """

    def __init__(self, seed: int, strength: float = 1.0, max_retries: int = 10,
                 components: int = 3):
        """
        Инициализация деформации.

        Args:
            seed: Зерно
            strength: Масштаб деформации (0 - тождественная)
            max_retries: Число попыток получить обратимое поле
            components: Число синусоидальных компонент
        """
        self.seed = seed
        self.strength = strength
        rng = np.random.default_rng(seed)
        angle = strength * rng.uniform(-0.15, 0.15)
        scale = 1.0 + strength * rng.uniform(-0.08, 0.08)
        shear = strength * rng.uniform(-0.05, 0.05)
        c, s = math.cos(angle), math.sin(angle)
        self.affine = scale * np.array([[c, -s + shear], [s, c]], dtype=np.float64)
        self.shift = strength * rng.uniform(-0.06, 0.06, size=2)
        self.retries = 0
        self.fell_back = False

        for attempt in range(max_retries):
            self._sample_waves(rng, components)
            if strength == 0 or self.jacobian_determinant(32, 32).min() > 0:
                self.retries = attempt
                break
        else:
            self.amplitudes = np.zeros_like(self.amplitudes)
            self.fell_back = True
            self.retries = max_retries
            get_logger().warning(f"Деформация seed={seed}: не удалось получить обратимое поле, только аффинная часть")

    def _sample_waves(self, rng: np.random.Generator, components: int) -> None:
        self.frequencies = rng.integers(1, 3, size=(components, 2)).astype(np.float64)
        self.phases = rng.uniform(0, 2 * math.pi, size=(components, 2))
        self.amplitudes = self.strength * rng.normal(0.0, 0.03, size=(components, 2))

    def _coords(self, h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
        ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing='ij')
        return xs, ys

    def map_points(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Образ точек (x, y) в нормализованных координатах."""
        out_x = self.affine[0, 0] * xs + self.affine[0, 1] * ys + self.shift[0]
        out_y = self.affine[1, 0] * xs + self.affine[1, 1] * ys + self.shift[1]
        for (fx, fy), (px, py), (ax, ay) in zip(self.frequencies, self.phases, self.amplitudes):
            arg = math.pi * (fx * xs + fy * ys)
            out_x = out_x + ax * np.sin(arg + px)
            out_y = out_y + ay * np.sin(arg + py)
        return out_x, out_y

    def grid(self, h: int, w: int) -> torch.Tensor:
        """Сетка выборки 1×h×w×2 (x, y) для grid_sample."""
        xs, ys = self._coords(h, w)
        gx, gy = self.map_points(xs, ys)
        return torch.from_numpy(np.stack([gx, gy], axis=-1)[None].astype(np.float32))

    def jacobian_determinant(self, h: int, w: int) -> np.ndarray:
        """Определитель якобиана отображения в узлах сетки h×w."""
        xs, ys = self._coords(h, w)
        j = np.broadcast_to(self.affine.reshape(2, 2, 1, 1), (2, 2, h, w)).copy()
        for (fx, fy), (px, py), (ax, ay) in zip(self.frequencies, self.phases, self.amplitudes):
            arg = math.pi * (fx * xs + fy * ys)
            cx, cy = np.cos(arg + px), np.cos(arg + py)
            j[0, 0] += ax * math.pi * fx * cx
            j[0, 1] += ax * math.pi * fy * cx
            j[1, 0] += ay * math.pi * fx * cy
            j[1, 1] += ay * math.pi * fy * cy
        return j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]

    def apply(self, images: torch.Tensor) -> torch.Tensor:
        """Деформировать пакет изображений batch×C×H×W."""
        grid = self.grid(images.shape[2], images.shape[3]).to(images.device, images.dtype)
        grid = grid.expand(images.shape[0], -1, -1, -1)
        return F.grid_sample(images, grid, mode='bilinear', padding_mode='border', align_corners=True)


def sample_warp(seed: int, strength: float = 1.0) -> WarpField:
    """Случайная обратимая деформация, детерминированная по зерну."""
    return WarpField(seed, strength)


def pick_auxiliary(labels: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Выбрать для каждого образца вспомогательный образец другой сущности.

    Если других сущностей в пакете нет, берётся другой образец той же.

    Returns:
        Тензор индексов длины batch
    """
    n = labels.shape[0]
    result = torch.empty(n, dtype=torch.long)
    for i in range(n):
        candidates = (labels != labels[i]).nonzero().flatten()
        if candidates.numel() == 0:
            candidates = (torch.arange(n) != i).nonzero().flatten()
        if candidates.numel() == 0:
            result[i] = i
            continue
        pick = torch.randint(candidates.numel(), (1,), generator=generator)
        result[i] = candidates[pick]
    return result


# ==================== Потеря DVE ====================

def grid_coordinates(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Нормализованные координаты (x, y) узлов сетки h×w, форма (h·w)×2."""
    ys = torch.linspace(-1, 1, h, dtype=dtype, device=device)
    xs = torch.linspace(-1, 1, w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing='ij')
    return torch.stack([gx.flatten(), gy.flatten()], dim=1)


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise ValueError(f"дескрипторы {name} содержат NaN или бесконечность")


def dve_match_probabilities(phi_x: torch.Tensor, phi_xprime: torch.Tensor, phi_aux: torch.Tensor,
                            temperature: float,
                            query_index: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Вероятности p(v|u) сопоставления через вспомогательное изображение.

    p_α(w|u) = softmax_w(<Φ_u(x), Φ_w(x_α)>/τ), Φ̂_u = Σ_w p_α(w|u)·Φ_w(x_α),
    p(v|u) = softmax_v(<Φ̂_u, Φ_v(x')>/τ).

    Args:
        phi_x, phi_xprime, phi_aux: Карты дескрипторов batch×C×h×w
        temperature: τ
        query_index: Подмножество пикселей u (по умолчанию все)

    Returns:
        Тензор batch×q×(h·w)
    """
    fx = phi_x.flatten(2).transpose(1, 2)
    fp = phi_xprime.flatten(2).transpose(1, 2)
    fa = phi_aux.flatten(2).transpose(1, 2)
    if query_index is not None:
        fx = fx[:, query_index]
    p_aux = torch.softmax(fx @ fa.transpose(1, 2) / temperature, dim=-1)
    exchanged = p_aux @ fa
    return torch.softmax(exchanged @ fp.transpose(1, 2) / temperature, dim=-1)


def dve_loss(phi_x: torch.Tensor, phi_xprime: torch.Tensor, phi_aux: torch.Tensor,
             warp_grid: torch.Tensor, temperature: Optional[float] = None,
             num_queries: Optional[int] = None, counters: Optional[LossCounters] = None,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Потеря DVE: среднее по u ожидаемого расстояния Σ_v p(v|u)·||v - g(u)||.

    x - деформированное изображение, x' - исходное, g(u) - точка x',
    из которой взят пиксель u изображения x.

    Args:
        phi_x: Дескрипторы деформированного изображения batch×C×h×w
        phi_xprime: Дескрипторы исходного изображения
        phi_aux: Дескрипторы вспомогательного изображения
        warp_grid: g в нормализованных координатах, batch×h×w×2 или 1×h×w×2
        temperature: τ (по умолчанию 1/sqrt(C))
        num_queries: Случайное подмножество пикселей u (для больших карт)
        counters: Счётчики (число обрезанных координат)
        generator: Генератор для выбора подмножества

    Returns:
        Скаляр

    Raises:
        ValueError: Формы не совпадают или дескрипторы не конечны
    """
    if phi_x.shape != phi_xprime.shape or phi_x.shape != phi_aux.shape:
        raise ValueError(f"формы карт дескрипторов различаются: {tuple(phi_x.shape)}, "
                         f"{tuple(phi_xprime.shape)}, {tuple(phi_aux.shape)}")
    for name, tensor in (('x', phi_x), ("x'", phi_xprime), ('x_aux', phi_aux)):
        _check_finite(name, tensor)
    batch, channels, h, w = phi_x.shape
    if warp_grid.shape[1:] != (h, w, 2):
        raise ValueError(f"сетка деформации {tuple(warp_grid.shape)} не соответствует картам {h}×{w}")
    if temperature is None:
        temperature = 1.0 / math.sqrt(channels)

    target = warp_grid.detach().to(phi_x.dtype).expand(batch, -1, -1, -1).reshape(batch, h * w, 2)
    outside = int((target.abs() > 1).any(dim=-1).sum())
    if outside:
        if counters is not None:
            counters.clamped_coords += outside
        target = target.clamp(-1.0, 1.0)

    query_index = None
    if num_queries is not None and num_queries < h * w:
        query_index = torch.randperm(h * w, generator=generator)[:num_queries].to(phi_x.device)
        target = target[:, query_index]

    probs = dve_match_probabilities(phi_x, phi_xprime, phi_aux, temperature, query_index)
    coords = grid_coordinates(h, w, phi_x.dtype, phi_x.device)
    distance = torch.linalg.vector_norm(target[:, :, None, :] - coords[None, None], dim=-1)
    return (probs * distance).sum(dim=-1).mean()


# ==================== Итоговая потеря ====================

TERM_NAMES = {'id': 'L_ID', 'lr': 'L_LR', 'reid': 'L_reID', 'dve': 'L_DVE'}

Number = Union[float, torch.Tensor]


def total_loss(parts: Dict[str, Optional[Number]],
               weights: LossWeights) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Взвешенная сумма L_ID + L_LR + λ_reID·L_reID + λ_DVE·L_DVE.

    Слагаемые с нулевым весом или None не участвуют ни в сумме, ни в
    обратном проходе.

    Args:
        parts: Слагаемые по ключам 'id', 'lr', 'reid', 'dve'
        weights: Веса

    Returns:
        Кортеж (итоговая потеря, словарь значений L_ID, L_LR, L_reID, L_DVE, total)

    Raises:
        NonFiniteLossError: Включённое слагаемое не конечно
    """
    coefficients = {'id': 1.0, 'lr': 1.0, 'reid': weights.lambda_reid, 'dve': weights.lambda_dve}
    total: Optional[torch.Tensor] = None
    breakdown = {name: 0.0 for name in TERM_NAMES.values()}
    for key, coefficient in coefficients.items():
        value = parts.get(key)
        if value is None or coefficient == 0:
            continue
        value = torch.as_tensor(value)
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise NonFiniteLossError(TERM_NAMES[key], scalar)
        breakdown[TERM_NAMES[key]] = scalar
        term = value * coefficient if coefficient != 1.0 else value
        total = term if total is None else total + term
    if total is None:
        total = torch.tensor(0.0)
    breakdown['total'] = float(total.detach())
    return total, breakdown
