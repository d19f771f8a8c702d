"""
Run logging for pipmm.

RunLogger configures the ``pipmm`` logger tree with a console handler and an
optional rotating file handler inside the run directory, and emits
structured events as JSON payloads.
"""

import json
import logging
import os
import sys
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Optional

CONSOLE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(pathname)s:%(lineno)d - %(message)s'


@dataclass
class ErrorContext:
    """Context information for a failed command."""
    command: str
    exception: Optional[Exception] = None
    stage: Optional[str] = None
    step: Optional[int] = None
    details: Dict[str, Any] = field(default_factory=dict)
    timestamp: datetime = field(default_factory=datetime.now)


class RunLogger:
    """Configures logging for one CLI run and writes structured events."""

    def __init__(self,
                 log_level: str = None,
                 log_file: str = None,
                 enable_console: bool = True,
                 max_file_size: int = 10 * 1024 * 1024,  # 10MB
                 backup_count: int = 5):
        """
        Initialize run logger.

        Args:
            log_level: Logging level; defaults to PIPMM_LOG_LEVEL or INFO
            log_file: Path to the rotating log file, if any
            enable_console: Whether to log to stdout
            max_file_size: Maximum log file size before rotation
            backup_count: Number of backup files to keep
        """
        level_name = (log_level or os.getenv('PIPMM_LOG_LEVEL', 'INFO')).upper()
        root = logging.getLogger('pipmm')
        root.setLevel(getattr(logging, level_name, logging.INFO))
        for handler in list(root.handlers):
            root.removeHandler(handler)
            handler.close()
        root.propagate = False

        if enable_console:
            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
            root.addHandler(console_handler)

        if log_file:
            os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
            file_handler = RotatingFileHandler(
                log_file, maxBytes=max_file_size, backupCount=backup_count
            )
            file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
            root.addHandler(file_handler)

        self.logger = logging.getLogger('pipmm.run')

    def event(self, event: str, **fields: Any) -> None:
        """Log a structured event at INFO level."""
        payload = {'event': event}
        payload.update(fields)
        self.logger.info(json.dumps(payload, sort_keys=True, default=str))

    def log_error(self, context: ErrorContext) -> None:
        log_data = {
            'event': 'error',
            'command': context.command,
            'stage': context.stage,
            'step': context.step,
            'timestamp': context.timestamp.isoformat(),
            'details': context.details,
        }
        if context.exception is not None:
            log_data['exception'] = {
                'type': type(context.exception).__name__,
                'message': str(context.exception),
                'traceback': ''.join(traceback.format_exception(
                    type(context.exception), context.exception,
                    context.exception.__traceback__)),
            }
        self.logger.error(json.dumps(log_data, indent=2, default=str))
