"""
Модуль для работы с настройками и переменными окружения.

Настройки процесса (уровень логов, устройство, число потоков) читаются из
переменных окружения, файлы экспериментов - плоские документы KEY=VALUE,
которые разбираются той же библиотекой python-dotenv.
"""
import dataclasses
import os
import typing
from typing import Any, Dict, Iterable, List, Optional, Tuple

from dotenv import load_dotenv, dotenv_values

# Загружаем переменные окружения из .env файла
# Сначала загружаем .env, затем .env.local (если есть) для переопределения
load_dotenv()
load_dotenv('.env.local', override=True)


class ConfigError(ValueError):
    """Ошибка конфигурации с указанием проблемного ключа."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


_TRUE_TOKENS = {'1', 'true', 'yes', 'on'}
_FALSE_TOKENS = {'0', 'false', 'no', 'off'}


def get_setting(key: str, default: str = '') -> str:
    """
    Получить настройку из переменных окружения.

    Args:
        key: Ключ настройки
        default: Значение по умолчанию

    Returns:
        Значение настройки или default
    """
    return os.getenv(key, default)


def get_log_level() -> str:
    """Уровень логирования (REID_LOG_LEVEL, по умолчанию INFO)."""
    return os.getenv('REID_LOG_LEVEL', 'INFO')


def get_log_file() -> str:
    """Путь к файлу лога (REID_LOG_FILE, по умолчанию 'animalreid.log')."""
    return os.getenv('REID_LOG_FILE', 'animalreid.log')


def get_device() -> str:
    """Устройство для вычислений torch (REID_DEVICE, по умолчанию 'cpu')."""
    return os.getenv('REID_DEVICE', 'cpu')


def get_num_workers() -> int:
    """
    Получить число рабочих потоков для пакетной обработки.

    Returns:
        Значение REID_NUM_WORKERS или 4, если переменная не задана/некорректна
    """
    raw = os.getenv('REID_NUM_WORKERS', '4')
    try:
        return max(1, int(raw))
    except ValueError:
        return 4


# ==================== Плоские файлы KEY=VALUE ====================

def load_flat_config(path: str) -> Dict[str, str]:
    """
    Прочитать файл эксперимента в формате KEY=VALUE.

    Args:
        path: Путь к файлу

    Returns:
        Словарь ключ -> строковое значение (пустые значения -> '')

    Raises:
        ConfigError: Если файл не существует
    """
    if not os.path.exists(path):
        raise ConfigError('config', f"файл конфигурации не найден: {path}")
    values = dotenv_values(path)
    return {key: ('' if value is None else value) for key, value in values.items()}


def coerce_value(key: str, raw: str, target: Any) -> Any:
    """
    Привести строковое значение к типу поля dataclass.

    Args:
        key: Имя ключа (для сообщения об ошибке)
        raw: Строковое значение
        target: Аннотация типа поля

    Returns:
        Значение нужного типа

    Raises:
        ConfigError: Если значение не приводится к типу
    """
    origin = typing.get_origin(target)
    args = typing.get_args(target)
    text = raw.strip()

    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text == '' or text.lower() == 'none':
            return None
        return coerce_value(key, text, inner[0])

    if origin in (tuple, Tuple):
        parts = [p.strip() for p in text.split(',') if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(coerce_value(key, p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(key, f"ожидалось {len(args)} значений через запятую, получено '{raw}'")
        return tuple(coerce_value(key, p, t) for p, t in zip(parts, args))

    if target is bool:
        lowered = text.lower()
        if lowered in _TRUE_TOKENS:
            return True
        if lowered in _FALSE_TOKENS:
            return False
        raise ConfigError(key, f"ожидалось логическое значение, получено '{raw}'")

    if target in (int, float):
        try:
            return target(text)
        except ValueError:
            raise ConfigError(key, f"ожидалось число ({target.__name__}), получено '{raw}'")

    return text


def format_value(value: Any) -> str:
    """Обратное преобразование значения в строку для файла KEY=VALUE."""
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(format_value(v) for v in value)
    return str(value)


def apply_block(block: Any, values: Dict[str, str], prefix: str) -> Tuple[Any, List[str]]:
    """
    Применить значения с префиксом к dataclass-блоку конфигурации.

    Переменные окружения с тем же ключом имеют приоритет над файлом.

    Args:
        block: Экземпляр dataclass со значениями по умолчанию
        values: Словарь из файла
        prefix: Префикс ключей блока (например, 'TRAIN_')

    Returns:
        Кортеж (новый экземпляр блока, список использованных ключей)
    """
    hints = typing.get_type_hints(type(block))
    changes = {}
    used = []
    for field in dataclasses.fields(block):
        key = f"{prefix}{field.name.upper()}"
        raw = os.environ.get(key, values.get(key))
        if raw is None:
            continue
        changes[field.name] = coerce_value(key, raw, hints[field.name])
        used.append(key)
    return dataclasses.replace(block, **changes), used


def block_items(block: Any, prefix: str) -> Iterable[Tuple[str, str]]:
    """Пары (KEY, VALUE) для всех полей блока."""
    for field in dataclasses.fields(block):
        yield f"{prefix}{field.name.upper()}", format_value(getattr(block, field.name))


def write_flat_config(items: Iterable[Tuple[str, str]], path: str) -> None:
    """
    Записать пары ключ-значение в файл, отсортировав по ключу.

    Args:
        items: Пары (ключ, значение)
        path: Путь к выходному файлу
    """
    lines = [f"{key}={value}" for key, value in sorted(items)]
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')


def check_unknown_keys(values: Dict[str, str], known: Iterable[str]) -> Optional[str]:
    """Вернуть первый неизвестный ключ файла или None."""
    known_set = set(known)
    for key in values:
        if key not in known_set:
            return key
    return None
