"""
Версия пакета AnimalReID.
Единый источник версии для логов, чекпоинтов и отчётов.
"""

__version__ = "1.0.0"
