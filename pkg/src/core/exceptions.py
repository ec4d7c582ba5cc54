# src/core/exceptions.py

"""
Exception hierarchy cho HSVF. Mỗi lỗi mang theo exit code mà main.py trả về.
"""


class HSVFError(Exception):
    """Base class cho tất cả lỗi của ứng dụng."""
    exit_code = 1


class ConfigError(HSVFError):
    """Config file sai, thiếu key, hoặc flag không nhất quán với stage."""
    exit_code = 2


class CheckpointError(ConfigError):
    """Checkpoint không tồn tại hoặc không khớp với network."""


class PrerequisiteError(ConfigError):
    """Stage được chạy khi checkpoint của stage trước chưa có."""


class DataError(HSVFError, ValueError):
    """Dữ liệu đầu vào không hợp lệ (file thiếu, sai format, sai kích thước)."""
    exit_code = 3


class ValidationError(DataError):
    """Vi phạm invariant của domain type."""


class ShapeError(DataError):
    """Kích thước tensor/ảnh không khớp."""


class UnfittedModelError(DataError):
    """Metric model (fog / NSS) chưa được fit."""


class InsufficientCorpusError(DataError):
    """Corpus quá nhỏ để fit metric model."""


class NumericalError(HSVFError):
    """Loss NaN/Inf hoặc gradient không hữu hạn."""
    exit_code = 4
