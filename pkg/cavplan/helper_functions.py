import hashlib
import logging
import math
import numbers
import os
from typing import Any, Optional

import canonicaljson


class ConsoleFormatter(logging.Formatter):
    """Console formatter for cavplan logs: emoji, padded level, short module name."""

    EMOJIS = {
        'DEBUG': '🔍',
        'INFO': 'ℹ️',
        'WARNING': '⚠️',
        'ERROR': '❌',
        'CRITICAL': '🚨',
    }

    def __init__(self, use_emojis=True):
        self.use_emojis = use_emojis
        super().__init__()

    def format(self, record):
        # "cavplan.world" -> "world"
        name_parts = record.name.split('.')
        display_name = '.'.join(name_parts[1:]) if len(name_parts) > 1 and name_parts[0] == 'cavplan' else record.name

        formatted = f"{record.levelname:8s} {display_name}: {record.getMessage()}"
        emoji = self.EMOJIS.get(record.levelname, '') if self.use_emojis else ''
        if emoji:
            formatted = f" {emoji}  {formatted}"
        if record.exc_info:
            formatted += '\n' + self.formatException(record.exc_info)
        return formatted


def _level_from_env(default: int) -> int:
    """Resolve CAVPLAN_LOG_LEVEL (name or number), falling back to `default`."""
    raw = os.getenv("CAVPLAN_LOG_LEVEL")
    if not raw:
        return default
    raw = raw.strip()
    if raw.isdigit():
        return int(raw)
    level = logging.getLevelName(raw.upper())
    return level if isinstance(level, int) else default


def setup_logging(name, level=logging.INFO, use_emojis=True):
    """
    Centralized logging configuration for cavplan modules.

    Configures a logger with a console handler if no handlers are present,
    so repeated calls never stack handlers. CAVPLAN_LOG_LEVEL overrides `level`.

    Args:
        name: Logger name (typically __name__ of the calling module)
        level: Logging level (default: logging.INFO)
        use_emojis: Whether to use emojis for log levels (default: True)

    Returns:
        logging.Logger: Configured logger instance
    """
    level = _level_from_env(level)
    logger_instance = logging.getLogger(name)
    logger_instance.setLevel(level)
    logger_instance.propagate = False

    if not logger_instance.handlers:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        formatter = ConsoleFormatter(use_emojis=use_emojis)
        console_handler.setFormatter(formatter)
        logger_instance.addHandler(console_handler)

    return logger_instance


def set_log_level(level: int) -> None:
    """Apply `level` to every cavplan logger created so far."""
    for name, candidate in logging.Logger.manager.loggerDict.items():
        if name.split('.')[0] == 'cavplan' and isinstance(candidate, logging.Logger):
            candidate.setLevel(level)
            for handler in candidate.handlers:
                handler.setLevel(level)


def _finite(value: Any) -> Any:
    """Recursively replace non-finite floats by None (canonical JSON forbids them)."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, numbers.Integral):
        return int(value)
    if isinstance(value, numbers.Real):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def canonical_json(data: Any) -> str:
    """Serialize `data` as canonical JSON (sorted keys, no whitespace)."""
    return canonicaljson.encode_canonical_json(_finite(data)).decode('utf-8')


def fingerprint(data: Any) -> str:
    """SHA-256 over the canonical JSON form of `data`."""
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


def env_number(name: str, default: Optional[float], cast=float, logger: Optional[logging.Logger] = None):
    """Read a numeric environment variable, warning and falling back on junk values."""
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return cast(raw)
    except ValueError:
        if logger is not None:
            logger.warning(f"Invalid {name} environment variable: {raw}. Using default {default}.")
        return default
