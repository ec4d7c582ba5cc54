"""
Base class cho các metric theo ảnh dùng trong evaluate
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..core.data_model import Image, SemanticMask

logger = logging.getLogger(__name__)


@dataclass
class MetricInput:
    """
    Một mẫu cần chấm điểm: output của restorer cùng các input và tham chiếu có sẵn.
    Trường nào là None thì metric cần trường đó bị bỏ qua.
    """
    image_id: str
    output: Image
    vis: Image
    nir: Image
    clear: Optional[Image] = None
    depth: Optional[np.ndarray] = None
    gt_mask: Optional[SemanticMask] = None
    pred_mask: Optional[SemanticMask] = None
    fog_model: Optional[object] = None
    nss_model: Optional[object] = None


class BaseMetric(ABC):
    """Base class cho tất cả metric theo ảnh"""

    # Các trường của MetricInput phải khác None
    requires: Tuple[str, ...] = ()

    def __init__(self):
        self.logger = logging.getLogger(self.__class__.__name__)

    def is_applicable(self, sample: MetricInput) -> bool:
        return all(getattr(sample, name) is not None for name in self.requires)

    @abstractmethod
    def compute(self, sample: MetricInput) -> float:
        """
        Tính metric cho một mẫu

        Args:
            sample: MetricInput đã có đủ các trường trong `requires`

        Returns:
            Giá trị metric
        """
        pass

    @abstractmethod
    def get_metric_name(self) -> str:
        """Trả về tên metric (key trong report)"""
        pass

    def lower_is_better(self) -> bool:
        return False
