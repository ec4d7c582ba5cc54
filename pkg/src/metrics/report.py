# src/metrics/report.py

"""
Schema của MetricReport (pydantic) và các hàm dựng/ghi/đọc report.
"""
import logging
import math
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from ..core.exceptions import DataError
from ..storage.file_handlers import create_file_handler

logger = logging.getLogger(__name__)

AGGREGATE_TOLERANCE = 1e-9
SCHEMA_SUFFIX = ".schema.json"


class MetricAggregate(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mean: float
    std: float = Field(ge=0.0)
    count: int = Field(ge=1)


class MetricReport(BaseModel):
    """
    per_image: image id -> {metric -> giá trị}. Metric của O_SR/O_VF mang tiền tố 'sr.'/'vf.'.
    aggregate: metric -> (mean, std, count) trên các ảnh có metric đó.
    """
    model_config = ConfigDict(extra="forbid")

    restorer: str
    manifest: str = ""
    per_image: Dict[str, Dict[str, float]]
    aggregate: Dict[str, MetricAggregate]
    corpus: Dict[str, float] = Field(default_factory=dict)
    metadata: Dict[str, Union[str, int, float, bool]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_aggregate(self):
        recomputed = aggregate_metrics(self.per_image)
        if set(recomputed) != set(self.aggregate):
            raise ValueError(f"aggregate có metric {sorted(self.aggregate)}, per_image có {sorted(recomputed)}")
        for name, stored in self.aggregate.items():
            fresh = recomputed[name]
            if stored.count != fresh.count or abs(stored.mean - fresh.mean) > AGGREGATE_TOLERANCE:
                raise ValueError(f"aggregate của '{name}' không khớp per_image")
        return self

    def values(self, metric: str):
        return [scores[metric] for scores in self.per_image.values() if metric in scores]


def aggregate_metrics(per_image: Mapping[str, Mapping[str, float]]) -> Dict[str, MetricAggregate]:
    """Gom theo metric, theo thứ tự id đã sắp xếp để kết quả tất định."""
    columns: Dict[str, list] = {}
    for image_id in sorted(per_image):
        for name, value in per_image[image_id].items():
            columns.setdefault(name, []).append(float(value))
    return {
        name: MetricAggregate(mean=float(np.mean(values)), std=float(np.std(values)), count=len(values))
        for name, values in sorted(columns.items())
    }


def build_report(restorer: str, per_image: Mapping[str, Mapping[str, float]], manifest: str = "",
                 corpus: Optional[Mapping[str, float]] = None,
                 metadata: Optional[Mapping[str, object]] = None) -> MetricReport:
    non_finite = [(i, k) for i, scores in per_image.items() for k, v in scores.items() if not math.isfinite(v)]
    if non_finite:
        raise DataError(f"Metric không hữu hạn: {non_finite[:5]}")
    return MetricReport(
        restorer=restorer,
        manifest=manifest,
        per_image={k: dict(v) for k, v in per_image.items()},
        aggregate=aggregate_metrics(per_image),
        corpus=dict(corpus or {}),
        metadata=dict(metadata or {}),
    )


def report_schema() -> dict:
    return MetricReport.model_json_schema()


def save_report(report: MetricReport, path: Union[str, Path], with_schema: bool = True) -> Path:
    """Ghi report JSON; kèm file schema '<tên>.schema.json' cạnh report."""
    path = Path(path)
    create_file_handler(path, "json").write(report.model_dump(mode="json"))
    if with_schema:
        create_file_handler(path.with_suffix(SCHEMA_SUFFIX), "json").write(report_schema())
    logger.info(f"Đã ghi report ({len(report.per_image)} ảnh, {len(report.aggregate)} metric) vào {path}")
    return path


def load_report(path: Union[str, Path]) -> MetricReport:
    record = create_file_handler(path, "json").read()
    try:
        return MetricReport.model_validate(record)
    except PydanticValidationError as e:
        raise DataError(f"{path}: report không hợp lệ: {e}") from e
