"""
Các metric theo ảnh và registry dùng bởi evaluate
"""
import logging
from typing import Dict, Iterable, Optional

from ..core.exceptions import DataError, UnfittedModelError
from . import fusion_metrics, quality_models
from .base_metric import BaseMetric, MetricInput
from .segmentation import segmentation_metrics

logger = logging.getLogger(__name__)


class FogDensityMetric(BaseMetric):
    requires = ("fog_model",)

    def get_metric_name(self) -> str:
        return "fog_density"

    def lower_is_better(self) -> bool:
        return True

    def compute(self, sample: MetricInput) -> float:
        return quality_models.fog_density(sample.output, sample.fog_model)


class NssMetric(BaseMetric):
    requires = ("nss_model",)

    def get_metric_name(self) -> str:
        return "nss_score"

    def lower_is_better(self) -> bool:
        return True

    def compute(self, sample: MetricInput) -> float:
        return quality_models.nss_score(sample.output, sample.nss_model)


class MutualInformationMetric(BaseMetric):
    """MI(F; V) + MI(F; N)"""

    def get_metric_name(self) -> str:
        return "mi"

    def compute(self, sample: MetricInput) -> float:
        return fusion_metrics.mutual_information(sample.output, sample.vis, sample.nir)


class FusionVifMetric(BaseMetric):
    def get_metric_name(self) -> str:
        return "vif"

    def compute(self, sample: MetricInput) -> float:
        return fusion_metrics.fusion_vif(sample.vis, sample.nir, sample.output)


class QabfMetric(BaseMetric):
    def get_metric_name(self) -> str:
        return "q_abf"

    def compute(self, sample: MetricInput) -> float:
        return fusion_metrics.q_abf(sample.vis, sample.nir, sample.output)


class ClearSsimMetric(BaseMetric):
    """SSIM so với ảnh clear cùng cảnh (chỉ có trên corpus tổng hợp)"""
    requires = ("clear",)

    def get_metric_name(self) -> str:
        return "ssim_clear"

    def compute(self, sample: MetricInput) -> float:
        return fusion_metrics.ssim(sample.output, sample.clear)


class GradientEnergyMetric(BaseMetric):
    def get_metric_name(self) -> str:
        return "gradient_energy"

    def compute(self, sample: MetricInput) -> float:
        return fusion_metrics.gradient_energy(sample.output)


class ContrastMetric(BaseMetric):
    def get_metric_name(self) -> str:
        return "rms_contrast"

    def compute(self, sample: MetricInput) -> float:
        return fusion_metrics.rms_contrast(sample.output)


class FarRegionGradientMetric(BaseMetric):
    requires = ("depth",)

    def get_metric_name(self) -> str:
        return "far_gradient"

    def compute(self, sample: MetricInput) -> float:
        return fusion_metrics.far_region_gradient(sample.output, sample.depth)


class MeanIoUMetric(BaseMetric):
    requires = ("gt_mask", "pred_mask")

    def get_metric_name(self) -> str:
        return "miou"

    def compute(self, sample: MetricInput) -> float:
        return segmentation_metrics(sample.pred_mask, sample.gt_mask)["mIoU"]


class PixelAccuracyMetric(BaseMetric):
    requires = ("gt_mask", "pred_mask")

    def get_metric_name(self) -> str:
        return "pixel_acc"

    def compute(self, sample: MetricInput) -> float:
        return segmentation_metrics(sample.pred_mask, sample.gt_mask)["pixel_acc"]


class MetricFactory:
    """
    Registry các metric theo ảnh. evaluate chỉ gọi compute_all, metric mới chỉ cần register_metric.
    """

    def __init__(self):
        self._metrics: Dict[str, BaseMetric] = {}
        self._register_default_metrics()

    def _register_default_metrics(self):
        default_metrics = [
            FogDensityMetric(),
            NssMetric(),
            MutualInformationMetric(),
            FusionVifMetric(),
            QabfMetric(),
            ClearSsimMetric(),
            GradientEnergyMetric(),
            ContrastMetric(),
            FarRegionGradientMetric(),
            MeanIoUMetric(),
            PixelAccuracyMetric(),
        ]
        for metric in default_metrics:
            self.register_metric(metric)

    def register_metric(self, metric: BaseMetric):
        name = metric.get_metric_name()
        self._metrics[name] = metric
        logger.debug(f"Đã đăng ký metric '{name}' ({type(metric).__name__})")

    def get_metric(self, name: str) -> Optional[BaseMetric]:
        return self._metrics.get(name)

    def list_supported_metrics(self) -> Dict[str, bool]:
        """
        Returns:
            Dict mapping tên metric -> lower_is_better
        """
        return {name: metric.lower_is_better() for name, metric in self._metrics.items()}

    def compute_all(self, sample: MetricInput, names: Optional[Iterable[str]] = None) -> Dict[str, float]:
        """
        Tính mọi metric áp dụng được cho mẫu.
        Metric lỗi dữ liệu (ví dụ ảnh quá nhỏ cho VIF) bị bỏ qua kèm warning; model chưa fit thì raise.
        """
        selected = list(self._metrics) if names is None else list(names)
        scores = {}
        for name in selected:
            metric = self._metrics.get(name)
            if metric is None:
                raise DataError(f"Metric không được hỗ trợ: '{name}'")
            if not metric.is_applicable(sample):
                continue
            try:
                scores[name] = float(metric.compute(sample))
            except UnfittedModelError:
                raise
            except DataError as e:
                logger.warning(f"[{sample.image_id}] bỏ qua metric '{name}': {e}")
        return scores
