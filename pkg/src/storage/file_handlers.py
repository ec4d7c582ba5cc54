# src/storage/file_handlers.py

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Any, List, Optional

import numpy as np
from PIL import Image as PILImage

from ..core.exceptions import DataError

logger = logging.getLogger(__name__)

DEPTH_SCALE = 1000.0


class BaseFileHandler(ABC):
    """
    Lớp cơ sở cho các file handler.
    """

    def __init__(self, file_path: Path):
        self.file_path = Path(file_path)
        self.file_handle = None

    @abstractmethod
    def write(self, data: Any):
        """Ghi dữ liệu vào file."""
        pass

    @abstractmethod
    def read(self) -> Any:
        """Đọc dữ liệu từ file."""
        pass

    def _require_exists(self):
        if not self.file_path.exists():
            raise DataError(f"Không tìm thấy file: {self.file_path}")

    def close(self):
        """Đóng file."""
        if self.file_handle:
            self.file_handle.close()
            self.file_handle = None
            logger.debug(f"Closed file: {self.file_path}")

    def flush(self):
        """Flush dữ liệu vào disk."""
        if self.file_handle:
            self.file_handle.flush()


class PNGFileHandler(BaseFileHandler):
    """
    Handler cho ảnh PNG. Lớp con quyết định mode Pillow và phép chuyển đổi giá trị.
    Pillow không ghi timestamp vào PNG nên hai lần lưu cùng dữ liệu cho ra file giống hệt nhau.
    """
    accepted_modes = ("L",)

    def _encode(self, array: np.ndarray) -> np.ndarray:
        return np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)

    def _decode(self, array: np.ndarray) -> np.ndarray:
        return array.astype(np.float64) / 255.0

    def write(self, data: np.ndarray):
        array = np.asarray(data)
        if array.ndim == 3 and array.shape[2] == 1:
            array = array[:, :, 0]
        encoded = self._encode(array)
        try:
            self.file_path.parent.mkdir(parents=True, exist_ok=True)
            PILImage.fromarray(encoded).save(self.file_path, format="PNG")
        except OSError as e:
            logger.error(f"Không thể ghi PNG {self.file_path}: {e}")
            raise DataError(f"Không thể ghi file {self.file_path}: {e}") from e
        logger.debug(f"Đã ghi {self.file_path.name} ({encoded.shape})")

    def read(self) -> np.ndarray:
        self._require_exists()
        try:
            with PILImage.open(self.file_path) as img:
                if img.mode not in self.accepted_modes:
                    raise DataError(
                        f"{self.file_path.name}: mode PNG '{img.mode}' không thuộc {self.accepted_modes}"
                    )
                raw = np.array(img)
        except OSError as e:
            raise DataError(f"Không đọc được PNG {self.file_path}: {e}") from e
        return self._decode(raw)


class RGBImageHandler(PNGFileHandler):
    """Ảnh visible: PNG RGB 8-bit."""
    accepted_modes = ("RGB",)


class GrayImageHandler(PNGFileHandler):
    """Ảnh NIR: PNG grayscale 8-bit, trả về mảng H x W x 1."""

    def read(self) -> np.ndarray:
        return super().read()[:, :, None]


class LabelMaskHandler(PNGFileHandler):
    """Mask ngữ nghĩa: PNG grayscale chứa index class thô (không rescale)."""

    def _encode(self, array: np.ndarray) -> np.ndarray:
        return np.asarray(array).astype(np.uint8)

    def _decode(self, array: np.ndarray) -> np.ndarray:
        return array.astype(np.int64)


class DepthMapHandler(PNGFileHandler):
    """Depth map: PNG 16-bit, giá trị lưu = round(depth * 1000)."""
    # Tùy phiên bản Pillow, PNG 16-bit được mở với mode "I;16" hoặc "I"
    accepted_modes = ("I;16", "I")

    def _encode(self, array: np.ndarray) -> np.ndarray:
        scaled = np.round(np.asarray(array, dtype=np.float64) * DEPTH_SCALE)
        if scaled.max(initial=0) > np.iinfo(np.uint16).max:
            raise DataError(f"Depth vượt quá khoảng biểu diễn 16-bit: max={scaled.max() / DEPTH_SCALE}")
        return scaled.astype(np.uint16)

    def _decode(self, array: np.ndarray) -> np.ndarray:
        return array.astype(np.float64) / DEPTH_SCALE


class JSONLinesHandler(BaseFileHandler):
    """
    Handler cho file JSON Lines: mỗi record một dòng.
    Dùng cho manifest và training log.
    """

    def __init__(self, file_path: Path, append: bool = False):
        super().__init__(file_path)
        self.append = append

    def open_for_writing(self):
        """Mở file JSONL để ghi (append nếu được yêu cầu)."""
        try:
            self.file_path.parent.mkdir(parents=True, exist_ok=True)
            self.file_handle = open(self.file_path, 'a' if self.append else 'w', encoding='utf-8')
        except OSError as e:
            logger.error(f"Không thể mở JSONL {self.file_path} để ghi: {e}")
            raise DataError(f"Không thể ghi file {self.file_path}: {e}") from e
        logger.debug(f"Opened JSONL file for writing: {self.file_path}")

    def write_record(self, record: Dict[str, Any]):
        if not self.file_handle:
            raise RuntimeError("File not opened for writing")
        try:
            self.file_handle.write(json.dumps(convert_numpy_to_native(record), sort_keys=True))
            self.file_handle.write('\n')
        except OSError as e:
            raise DataError(f"Không thể ghi record vào {self.file_path}: {e}") from e

    def write(self, data: List[Dict[str, Any]]):
        """Ghi toàn bộ danh sách record rồi đóng file."""
        self.open_for_writing()
        try:
            for record in data:
                self.write_record(record)
        finally:
            self.close()

    def read(self, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        self._require_exists()
        records = []
        with open(self.file_path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                if limit and len(records) >= limit:
                    break
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{self.file_path}:{line_no}: JSON không hợp lệ: {e}") from e
        return records

    def __enter__(self):
        self.open_for_writing()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


class JSONDocumentHandler(BaseFileHandler):
    """Một object JSON duy nhất (report, metric model, sidecar)."""

    def write(self, data: Dict[str, Any]):
        try:
            self.file_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.file_path, 'w', encoding='utf-8') as f:
                json.dump(convert_numpy_to_native(data), f, indent=2, sort_keys=True)
                f.write('\n')
        except OSError as e:
            logger.error(f"Không thể ghi JSON {self.file_path}: {e}")
            raise DataError(f"Không thể ghi file {self.file_path}: {e}") from e

    def read(self) -> Dict[str, Any]:
        self._require_exists()
        with open(self.file_path, 'r', encoding='utf-8') as f:
            try:
                return json.load(f)
            except json.JSONDecodeError as e:
                raise DataError(f"{self.file_path}: JSON không hợp lệ: {e}") from e


_HANDLERS = {
    "rgb": RGBImageHandler,
    "gray": GrayImageHandler,
    "mask": LabelMaskHandler,
    "depth": DepthMapHandler,
    "jsonl": JSONLinesHandler,
    "json": JSONDocumentHandler,
}


def create_file_handler(file_path: Path, file_format: str, **kwargs) -> BaseFileHandler:
    """
    Factory function để tạo file handler phù hợp.

    Args:
        file_path: Đường dẫn đến file
        file_format: 'rgb', 'gray', 'mask', 'depth', 'jsonl' hoặc 'json'
        **kwargs: Tham số riêng của handler (ví dụ append=True cho jsonl)

    Returns:
        Instance của file handler tương ứng
    """
    handler_cls = _HANDLERS.get(file_format.lower())
    if handler_cls is None:
        raise ValueError(f"Unsupported file format: {file_format}")
    return handler_cls(Path(file_path), **kwargs)


def convert_numpy_to_native(obj: Any) -> Any:
    """Chuyển numpy scalar/array lồng trong dict/list thành kiểu Python thuần để json.dump được."""
    if isinstance(obj, dict):
        return {k: convert_numpy_to_native(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [convert_numpy_to_native(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
