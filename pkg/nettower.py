"""
Модуль нейросетевой модели повторной идентификации.

Пятиступенчатая свёрточная основа с блоками сжатия-возбуждения (SE),
голова плотных дескрипторов на выходе третьей ступени (1/4 разрешения) и
голова повторной идентификации (GAP -> линейный слой -> BN -> dropout)
с классификаторами сущности и ориентации.
"""
import dataclasses
import os
import tempfile
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import Bottleneck, ResNet

from logger import get_logger
from version import __version__

CHECKPOINT_VERSION = 1

BACKBONES = ('toy', 'seresnet50')


class InputShapeError(ValueError):
    """Вход модели имеет неподходящую форму."""


@dataclass
class ModelConfig:
    """Параметры модели (ключи MODEL_*)."""
    backbone: str = 'toy'
    input_size: int = 224
    embed_dim: int = 512
    dve_dim: int = 64
    dropout: float = 0.5
    pretrained: bool = False
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)


def validate_model_config(config: ModelConfig) -> Tuple[bool, Optional[str]]:
    """
    Проверить корректность параметров модели.

    Returns:
        Кортеж (успешность проверки, сообщение об ошибке или None)
    """
    if config.backbone not in BACKBONES:
        return False, f"неизвестная основа '{config.backbone}', допустимо: {', '.join(BACKBONES)}"
    if config.input_size <= 0 or config.input_size % 8:
        return False, f"размер входа {config.input_size} должен делиться на 8"
    if config.embed_dim <= 0 or config.dve_dim <= 0:
        return False, "размерности признаков должны быть положительными"
    if not 0.0 <= config.dropout < 1.0:
        return False, f"dropout {config.dropout} вне [0, 1)"
    if any(s <= 0 for s in config.std):
        return False, "std нормализации должны быть положительными"
    return True, None


class ModelOutput(NamedTuple):
    embedding: torch.Tensor   # batch×d
    id_logits: torch.Tensor   # batch×C_id
    lr_logit: torch.Tensor    # batch×1
    dve: torch.Tensor         # batch×d_dve×H/4×W/4, единичная норма по каналам


# ==================== Основы ====================

class SEModule(nn.Module):
    """Сжатие-возбуждение: перевзвешивание каналов по глобальному контексту."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = F.adaptive_avg_pool2d(x, 1)
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(w), inplace=True)))
        return x * w


class SEBottleneck(Bottleneck):
    """Остаточный блок ResNet с SE перед сложением."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.se = SEModule(self.conv3.out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.se(self.bn3(self.conv3(out)))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class SEResNet50Backbone(nn.Module):
    """
    SE-ResNet50 с изменёнными шагами.

    Ступени: stem, layer1..layer4. Шаг layer2 и layer4 заменён расширением
    (dilation), поэтому третья ступень даёт 1/4, пятая - 1/8 входа.
    """
    stage3_channels = 512
    stage5_channels = 2048

    def __init__(self, pretrained: bool = False):
        super().__init__()
        net = ResNet(SEBottleneck, [3, 4, 6, 3], replace_stride_with_dilation=[True, False, True])
        if pretrained:
            self._load_imagenet(net)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    @staticmethod
    def _load_imagenet(net: ResNet) -> None:
        from torchvision.models import ResNet50_Weights, resnet50

        state = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1).state_dict()
        state = {k: v for k, v in state.items() if not k.startswith('fc.')}
        result = net.load_state_dict(state, strict=False)
        get_logger().info(f"Загружены веса ImageNet, без предобучения: {len(result.missing_keys)} тензоров (SE)")

    def to_stage3(self, x: torch.Tensor) -> torch.Tensor:
        return self.layer2(self.layer1(self.stem(x)))

    def from_stage3(self, s3: torch.Tensor) -> torch.Tensor:
        return self.layer4(self.layer3(s3))


def _conv_bn(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ToyStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.body = nn.Sequential(_conv_bn(in_ch, out_ch, stride), _conv_bn(out_ch, out_ch, 1))
        self.se = SEModule(out_ch, reduction=8)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.se(self.body(x))


class ToyBackbone(nn.Module):
    """
    Маленькая основа для CPU-тестов с тем же контрактом разрешений.

    Шаги ступеней 2, 2, 1, 2, 1: третья ступень на 1/4, пятая на 1/8.
    """
    stage3_channels = 64
    stage5_channels = 128

    def __init__(self):
        super().__init__()
        self.stem = _conv_bn(3, 16, 2)
        self.stage2 = ToyStage(16, 32, 2)
        self.stage3 = ToyStage(32, 64, 1)
        self.stage4 = ToyStage(64, 96, 2)
        self.stage5 = ToyStage(96, 128, 1)

    def to_stage3(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage3(self.stage2(self.stem(x)))

    def from_stage3(self, s3: torch.Tensor) -> torch.Tensor:
        return self.stage5(self.stage4(s3))


def build_backbone(config: ModelConfig) -> nn.Module:
    if config.backbone == 'seresnet50':
        return SEResNet50Backbone(config.pretrained)
    if config.backbone == 'toy':
        return ToyBackbone()
    raise ValueError(f"неизвестная основа '{config.backbone}'")


# ==================== Модель ====================

class ReIDNet(nn.Module):
    """
    Модель повторной идентификации с головой плотных дескрипторов.
    """

    def __init__(self, config: ModelConfig, num_classes: int):
        """
        Инициализация модели.

        Args:
            config: Параметры модели
            num_classes: Число обучающих сущностей C_id
        """
        super().__init__()
        ok, message = validate_model_config(config)
        if not ok:
            raise ValueError(message)
        if num_classes < 2:
            raise ValueError(f"нужно хотя бы 2 класса, получено {num_classes}")
        self.config = config
        self.num_classes = num_classes
        self.backbone = build_backbone(config)
        self.dve_head = nn.Conv2d(self.backbone.stage3_channels, config.dve_dim, 1)
        self.projection = nn.Linear(self.backbone.stage5_channels, config.embed_dim)
        self.bottleneck = nn.BatchNorm1d(config.embed_dim)
        self.dropout = nn.Dropout(config.dropout)
        self.id_classifier = nn.Linear(config.embed_dim, num_classes)
        self.lr_classifier = nn.Linear(config.embed_dim, 1)
        self.backbone_frozen = False

    def _check_input(self, x: torch.Tensor, exact: bool) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputShapeError(f"ожидался тензор batch×3×H×W, получено {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if exact and (h != self.config.input_size or w != self.config.input_size):
            raise InputShapeError(
                f"ожидался вход {self.config.input_size}×{self.config.input_size}, получено {h}×{w}")
        if h % 8 or w % 8:
            raise InputShapeError(f"размеры входа {h}×{w} должны делиться на 8")

    def forward(self, x: torch.Tensor) -> ModelOutput:
        """
        Прямой проход: все четыре выхода за один проход.

        Args:
            x: Нормализованные изображения batch×3×S×S (S = input_size)

        Returns:
            ModelOutput(embedding, id_logits, lr_logit, dve)

        Raises:
            InputShapeError: Размер входа не совпадает с input_size
        """
        self._check_input(x, exact=True)
        s3 = self.backbone.to_stage3(x)
        dve = F.normalize(self.dve_head(s3), dim=1)
        s5 = self.backbone.from_stage3(s3)
        pooled = torch.flatten(F.adaptive_avg_pool2d(s5, 1), 1)
        embedding = self.dropout(self.bottleneck(self.projection(pooled)))
        return ModelOutput(embedding, self.id_classifier(embedding), self.lr_classifier(embedding), dve)

    def stage3_features(self, x: torch.Tensor) -> torch.Tensor:
        """Активации третьей ступени (1/4 разрешения)."""
        self._check_input(x, exact=False)
        return self.backbone.to_stage3(x)

    def dve_descriptors(self, x: torch.Tensor) -> torch.Tensor:
        """Плотные дескрипторы единичной нормы без прохода по ступеням 4-5."""
        return F.normalize(self.dve_head(self.stage3_features(x)), dim=1)

    def freeze_backbone(self, flag: bool) -> None:
        """
        Заморозить или разморозить основу.

        Замороженная основа не получает градиентов, её BN-статистики
        не обновляются; головы обучаются как обычно.
        """
        self.backbone_frozen = flag
        for p in self.backbone.parameters():
            p.requires_grad_(not flag)
        if flag:
            self.backbone.eval()
        elif self.training:
            self.backbone.train()

    def train(self, mode: bool = True) -> 'ReIDNet':
        super().train(mode)
        if self.backbone_frozen:
            self.backbone.eval()
        return self

    def backbone_parameters(self) -> List[nn.Parameter]:
        return list(self.backbone.parameters())

    def head_parameters(self) -> List[nn.Parameter]:
        backbone_ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in backbone_ids]

    @torch.no_grad()
    def embed_eval(self, x: torch.Tensor) -> torch.Tensor:
        """
        Вектор для ранжирования: конкатенация f(x) и f(flip(x)).

        Args:
            x: Нормализованные изображения batch×3×S×S

        Returns:
            Тензор batch×2d
        """
        was_training = self.training
        self.eval()
        try:
            f = self.forward(x).embedding
            f_flip = self.forward(torch.flip(x, dims=[3])).embedding
        finally:
            self.train(was_training)
        return torch.cat([f, f_flip], dim=1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_input_tensor(images: Sequence[np.ndarray], config: ModelConfig) -> torch.Tensor:
    """
    Преобразовать растры uint8 H×W×3 в нормализованный тензор batch×3×H×W.

    Args:
        images: Последовательность растров одного размера
        config: Параметры модели (mean/std)

    Returns:
        Тензор float32
    """
    batch = np.stack([np.asarray(img, dtype=np.float32) / 255.0 for img in images])
    tensor = torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()
    mean = torch.tensor(config.mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(config.std, dtype=torch.float32).view(1, 3, 1, 1)
    return (tensor - mean) / std


# ==================== Контрольные точки ====================

def save_checkpoint(model: ReIDNet, path: str, entity_map: Dict[str, int],
                    extra: Optional[Dict] = None) -> str:
    """
    Сохранить контрольную точку атомарно (временный файл и переименование).

    Args:
        model: Модель
        path: Путь к файлу
        entity_map: Исходная метка сущности -> номер класса
        extra: Дополнительные поля (эпоха, состояние оптимизатора, конфигурация)

    Returns:
        Путь к сохранённому файлу
    """
    payload = {
        'format_version': CHECKPOINT_VERSION,
        'library_version': __version__,
        'model_config': dataclasses.asdict(model.config),
        'num_classes': model.num_classes,
        'entity_map': dict(entity_map),
        'state_dict': model.state_dict(),
    }
    if extra:
        payload.update(extra)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.ckpt-', suffix='.tmp', dir=directory)
    os.close(fd)
    try:
        torch.save(payload, tmp_path)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    get_logger().debug(f"Контрольная точка сохранена: {path}")
    return path


def load_checkpoint(path: str) -> Dict:
    """
    Прочитать контрольную точку.

    Raises:
        ValueError: Файл отсутствует или записан более новой версией формата
    """
    if not os.path.exists(path):
        raise ValueError(f"контрольная точка не найдена: {path}")
    payload = torch.load(path, map_location='cpu', weights_only=True)
    version = payload.get('format_version', 0)
    if version > CHECKPOINT_VERSION:
        raise ValueError(f"контрольная точка версии {version} новее поддерживаемой {CHECKPOINT_VERSION}")
    return payload


def model_config_from_dict(data: Dict) -> ModelConfig:
    data = dict(data)
    for key in ('mean', 'std'):
        if key in data:
            data[key] = tuple(data[key])
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in data.items() if k in known})


def model_from_checkpoint(path: str, device: str = 'cpu') -> Tuple[ReIDNet, Dict]:
    """
    Восстановить модель из контрольной точки.

    Returns:
        Кортеж (модель в режиме eval, содержимое контрольной точки)
    """
    payload = load_checkpoint(path)
    config = model_config_from_dict(payload['model_config'])
    config = dataclasses.replace(config, pretrained=False)
    model = ReIDNet(config, payload['num_classes'])
    model.load_state_dict(payload['state_dict'])
    model.to(device)
    model.eval()
    return model, payload
