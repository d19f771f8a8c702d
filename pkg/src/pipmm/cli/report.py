"""
Report rendering: CSV tables and Jinja2 Markdown summaries.
"""

import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence, Union

from jinja2 import Environment, PackageLoader, StrictUndefined

logger = logging.getLogger(__name__)

_environment = None


def get_environment() -> Environment:
    """Shared Jinja2 environment over the packaged templates."""
    global _environment
    if _environment is None:
        _environment = Environment(
            loader=PackageLoader('pipmm.cli', 'templates'),
            autoescape=False,
            undefined=StrictUndefined,
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
        )
        _environment.filters['pct'] = lambda value: f"{100.0 * value:.1f}%"
        _environment.filters['fixed'] = lambda value, digits=4: f"{value:.{digits}f}"
    return _environment


def render_report(template: str, context: Dict[str, Any]) -> str:
    return get_environment().get_template(template).render(**context)


def write_report(path: Union[str, Path], template: str, context: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report(template, context), encoding='utf-8')
    logger.debug("wrote report %s", path)
    return path


def write_csv(path: Union[str, Path], header: Sequence[str],
              rows: Iterable[Sequence[Any]]) -> Path:
    """CSV with a header row; floats use repr so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path
