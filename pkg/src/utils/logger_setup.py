# src/utils/logger_setup.py
import logging
import os
import sys
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

# Thư viện bên ngoài quá ồn ở DEBUG
_NOISY_LOGGERS = ("matplotlib", "PIL")


class ColoredFormatter(logging.Formatter):
    """Formatter in level dạng [LEVEL], tô màu khi output là terminal."""

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
    }
    RESET = '\033[0m'

    def __init__(self, fmt: str, datefmt: str, use_color: bool = True):
        super().__init__(fmt, datefmt=datefmt)
        self.use_color = use_color

    def format(self, record):
        message = super().format(record)
        bracketed = f"[{record.levelname}]"
        message = message.replace(record.levelname, bracketed, 1)
        if not self.use_color:
            return message

        color = self.COLORS.get(record.levelname, self.RESET)
        if record.levelname == 'INFO':
            # INFO: chỉ tô [INFO], giữ phần còn lại dễ đọc trong log training dài
            return message.replace(bracketed, f"{color}{bracketed}{self.RESET}", 1)
        return f"{color}{message}{self.RESET}"


def setup_logging(log_level: str, log_file: Optional[str] = None):
    """
    Thiết lập logging cho toàn ứng dụng: console (stdout) và, nếu có, một file log.

    Args:
        log_level (str): Cấp độ log ('DEBUG', 'INFO', 'WARNING', 'ERROR').
        log_file (str, optional): Đường dẫn file log, ghi không màu.
    """
    root = logging.getLogger()

    level = logging.getLevelName(log_level.upper())
    if not isinstance(level, int):
        level = logging.INFO
    root.setLevel(level)

    for handler in root.handlers[:]:
        root.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(
        ColoredFormatter(LOG_FORMAT, DATE_FORMAT, use_color=sys.stdout.isatty())
    )
    root.addHandler(console_handler)

    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(ColoredFormatter(LOG_FORMAT, DATE_FORMAT, use_color=False))
        root.addHandler(file_handler)

    for name in _NOISY_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    root.info(f"Logging đã được thiết lập. Cấp độ: {log_level.upper()}"
              + (f", file: {log_file}" if log_file else ""))
