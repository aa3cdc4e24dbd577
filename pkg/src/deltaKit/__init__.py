import logging
import sys
import os
from datetime import datetime
from typing import Optional
from colorama import init, Fore, Style
from logging.handlers import RotatingFileHandler

LOGGER_NAME = "deltaKit"
LOG_FORMAT = "[%(asctime)s: %(levelname)s: %(module)s: %(message)s]"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class ColoredFormatter(logging.Formatter):
    """Custom log formatter with color support."""
    COLORS = {
        logging.DEBUG: Fore.CYAN,
        logging.INFO: Fore.GREEN,
        logging.WARNING: Fore.YELLOW,
        logging.ERROR: Fore.RED,
        logging.CRITICAL: Fore.RED + Style.BRIGHT
    }

    def format(self, record):
        log_message = super().format(record)
        color = self.COLORS.get(record.levelno, Fore.WHITE)
        return f"{color}{log_message}{Style.RESET_ALL}"


def setup_logger(
    console_logging_enabled: bool = False,
    log_level: int = logging.INFO,
    log_dir: Optional[str] = "logs",
) -> logging.Logger:
    """
    Set up the package logger with a rotating log file and optional colored console output.

    Console output goes to stderr so that CSV/JSON reports written to stdout stay clean.

    Args:
        console_logging_enabled (bool): Enable console logging.
        log_level (int): Logging level (default: logging.INFO).
        log_dir (str | None): Directory for rotating log files; None disables the file handler.

    Returns:
        logging.Logger: Configured logger instance.
    """
    # Initialize colorama
    init(autoreset=True)

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(log_level)
    logger.handlers.clear()
    logger.propagate = False

    log_filepath = None
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_filepath = os.path.join(log_dir, f"deltakit_{timestamp}.log")

        # File formatter (non-colored for log files)
        file_handler = RotatingFileHandler(
            log_filepath,
            maxBytes=10*1024*1024,  # 10 MB
            backupCount=5
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        file_handler.setLevel(log_level)
        logger.addHandler(file_handler)

    if console_logging_enabled:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(ColoredFormatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        console_handler.setLevel(log_level)
        logger.addHandler(console_handler)

    if not logger.handlers:
        logger.addHandler(logging.NullHandler())

    logger.info(f"Logging initialized. Log file: {log_filepath}")

    return logger


logging.getLogger(LOGGER_NAME).addHandler(logging.NullHandler())
