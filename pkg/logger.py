"""
Модуль для логирования действий и хода обучения.
"""
import json
import logging
import math
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Dict, Optional

from config import get_log_file, get_log_level


LOGGER_NAME = 'AnimalReID'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RUN_LOG_FORMAT = '%(levelname)s - %(message)s'


def setup_logger(log_level: str = "INFO", log_file: str = "animalreid.log") -> logging.Logger:
    """
    Создать логгер пакета: файл с ротацией (все уровни) и stderr.

    Args:
        log_level: Уровень логгера (DEBUG, INFO, WARNING, ERROR)
        log_file: Путь к общему файлу лога; каталог создаётся при необходимости

    Returns:
        Логгер 'AnimalReID'
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    logger.propagate = False
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')

    directory = os.path.dirname(log_file)
    if directory:
        os.makedirs(directory, exist_ok=True)
    shared = RotatingFileHandler(log_file, maxBytes=10 * 1024 * 1024, backupCount=5, encoding='utf-8')
    shared.setLevel(logging.DEBUG)

    # stdout остаётся за результатами команд
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO)

    for handler in (shared, console):
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    return logger


def log_action(logger: logging.Logger, action: str, details: str = ""):
    """Записать шаг запуска (команда, обучение, оценка) одной строкой INFO."""
    logger.info(f"{action}: {details}" if details else action)


def attach_run_log(logger: logging.Logger, run_dir: str) -> logging.Handler:
    """
    Добавить файл лога внутри каталога запуска.

    Args:
        logger: Объект логгера
        run_dir: Каталог запуска

    Returns:
        Добавленный обработчик (чтобы снять его по завершении)
    """
    os.makedirs(run_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(run_dir, 'run.log'), encoding='utf-8')
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(RUN_LOG_FORMAT))
    logger.addHandler(handler)
    return handler


class StepLog:
    """
    Построчный JSON-журнал (одна запись на шаг обучения).

    Файл открывается на дозапись, каждая запись сбрасывается на диск сразу.
    """

    def __init__(self, path: str):
        self.path = path
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._file = open(path, 'a', encoding='utf-8')

    def write(self, record: Dict) -> None:
        clean = {}
        for key, value in record.items():
            if isinstance(value, float) and not math.isfinite(value):
                value = str(value)
            clean[key] = value
        self._file.write(json.dumps(clean, ensure_ascii=False, sort_keys=True) + '\n')
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> 'StepLog':
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_step_log(path: str) -> list:
    """Прочитать все записи журнала шагов."""
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


_logger: Optional[logging.Logger] = None


def get_logger() -> logging.Logger:
    """Логгер пакета; создаётся при первом обращении по REID_LOG_LEVEL и REID_LOG_FILE."""
    global _logger
    if _logger is None:
        _logger = setup_logger(get_log_level(), get_log_file())
    return _logger
