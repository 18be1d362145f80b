"""
Модуль для экспорта отчётов в различные форматы.

Каждая таблица пишется в четыре файла: TSV и JSON для машинной обработки,
Markdown и HTML для чтения. Отметок времени в отчётах нет: два одинаковых
запуска дают побайтно одинаковые файлы.
"""
import json
import math
import os
from typing import Dict, List, Optional

import markdown
import numpy as np
import pandas as pd

from version import __version__


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return '✓' if value else ''
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return '-'
        return f"{value:.4f}"
    return str(value)


def table_to_markdown(table: pd.DataFrame, title: str = "") -> str:
    """
    Преобразовать таблицу в Markdown.

    Args:
        table: Таблица результатов
        title: Заголовок отчёта (опционально)

    Returns:
        Текст в формате Markdown
    """
    lines = []
    if title:
        lines.append(f"# {title}")
        lines.append("")
    columns = [str(c) for c in table.columns]
    lines.append("| " + " | ".join(columns) + " |")
    lines.append("|" + "|".join("---" for _ in columns) + "|")
    for row in table.itertuples(index=False):
        lines.append("| " + " | ".join(_format_cell(v) for v in row) + " |")
    lines.append("")
    return "\n".join(lines)


def export_to_markdown(table: pd.DataFrame, title: str, output_file: str) -> bool:
    """
    Экспортировать таблицу в Markdown формат.

    Args:
        table: Таблица результатов
        title: Заголовок
        output_file: Путь к выходному файлу

    Returns:
        True если экспорт успешен
    """
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write(table_to_markdown(table, title))
    return True


def export_to_html(table: pd.DataFrame, title: str, output_file: str) -> bool:
    """Экспортировать таблицу в HTML через Markdown-рендер."""
    body = markdown.markdown(table_to_markdown(table, title), extensions=['tables'])
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
                f"<title>{title}</title></head><body>\n{body}\n</body></html>\n")
    return True


def export_to_json(table: pd.DataFrame, title: str, output_file: str,
                   extra: Optional[Dict] = None) -> bool:
    """
    Экспортировать таблицу в JSON формат (список записей).

    Args:
        table: Таблица результатов
        title: Название отчёта
        output_file: Путь к выходному файлу
        extra: Дополнительные поля верхнего уровня (счётчики, параметры)

    Returns:
        True если экспорт успешен
    """
    records = json.loads(table.to_json(orient='records', double_precision=10))
    export_data = {
        'title': title,
        'version': __version__,
        'rows': records,
    }
    if extra:
        export_data.update(extra)
    with open(output_file, 'w', encoding='utf-8') as f:
        json.dump(export_data, f, ensure_ascii=False, indent=2, sort_keys=True)
    return True


def export_to_tsv(table: pd.DataFrame, output_file: str) -> bool:
    """Экспортировать таблицу в TSV (разделитель - табуляция)."""
    table.to_csv(output_file, sep='\t', index=False, float_format='%.6f')
    return True


def write_report(table: pd.DataFrame, out_dir: str, name: str, title: str,
                 extra: Optional[Dict] = None) -> List[str]:
    """
    Записать отчёт во всех форматах.

    Args:
        table: Таблица результатов
        out_dir: Каталог для файлов
        name: Базовое имя файлов
        title: Заголовок
        extra: Дополнительные поля для JSON

    Returns:
        Список путей к записанным файлам
    """
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, name)
    paths = [f"{base}.tsv", f"{base}.json", f"{base}.md", f"{base}.html"]
    export_to_tsv(table, paths[0])
    export_to_json(table, title, paths[1], extra)
    export_to_markdown(table, title, paths[2])
    export_to_html(table, title, paths[3])
    return paths
