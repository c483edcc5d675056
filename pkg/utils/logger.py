"""Logging utility for consistent log formatting across mvssl modules."""
import logging
import os
import sys
from pathlib import Path
from typing import Optional

DEFAULT_FORMAT = (
    "%(asctime)s - %(name)s - %(levelname)s - "
    "[%(filename)s:%(lineno)d] - %(message)s"
)

_RUN_LOG_HANDLER: Optional[logging.Handler] = None


def _env_level(default: int) -> int:
    """Resolve the log level from MVSSL_LOG_LEVEL, falling back to ``default``."""
    name = os.getenv("MVSSL_LOG_LEVEL")
    if not name:
        return default
    level = logging.getLevelName(name.upper())
    return level if isinstance(level, int) else default


def setup_logger(
    name: str,
    level: int = logging.INFO,
    format_string: Optional[str] = None
) -> logging.Logger:
    """
    Set up a logger with consistent formatting.
    
    Args:
        name: Logger name (typically __name__)
        level: Logging level (default: INFO, overridden by MVSSL_LOG_LEVEL)
        format_string: Optional custom format string
        
    Returns:
        Configured logger instance
    """
    if format_string is None:
        format_string = DEFAULT_FORMAT
    
    level = _env_level(level)
    logger = logging.getLogger(name)
    logger.setLevel(level)
    
    # Avoid adding multiple handlers if logger already configured
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setLevel(level)
        handler.setFormatter(logging.Formatter(format_string))
        logger.addHandler(handler)
        if _RUN_LOG_HANDLER is not None:
            logger.addHandler(_RUN_LOG_HANDLER)
    
    return logger


def attach_run_log(out_dir: str, filename: str = "run.log") -> Path:
    """
    Mirror every mvssl logger into ``<out_dir>/run.log``.
    
    Loggers created after this call pick the handler up in setup_logger;
    existing ones are patched here.
    """
    global _RUN_LOG_HANDLER
    path = Path(out_dir) / filename
    path.parent.mkdir(parents=True, exist_ok=True)
    
    if _RUN_LOG_HANDLER is not None:
        detach_run_log()
    
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(DEFAULT_FORMAT))
    _RUN_LOG_HANDLER = handler
    
    for logger_name in list(logging.root.manager.loggerDict):
        if logger_name.startswith(("mvssl", "utils")):
            logging.getLogger(logger_name).addHandler(handler)
    return path


def detach_run_log() -> None:
    """Remove and close the run log handler installed by attach_run_log."""
    global _RUN_LOG_HANDLER
    if _RUN_LOG_HANDLER is None:
        return
    for logger_name in list(logging.root.manager.loggerDict):
        logging.getLogger(logger_name).removeHandler(_RUN_LOG_HANDLER)
    _RUN_LOG_HANDLER.close()
    _RUN_LOG_HANDLER = None


def apply_env_level() -> None:
    """Re-apply MVSSL_LOG_LEVEL to loggers created before the environment was loaded."""
    if not os.getenv("MVSSL_LOG_LEVEL"):
        return
    for logger_name in list(logging.root.manager.loggerDict):
        if logger_name.startswith(("mvssl", "utils")):
            existing = logging.getLogger(logger_name)
            level = _env_level(existing.level)
            existing.setLevel(level)
            for handler in existing.handlers:
                if isinstance(handler, logging.StreamHandler) and not isinstance(handler, logging.FileHandler):
                    handler.setLevel(level)
