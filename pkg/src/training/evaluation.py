# src/training/evaluation.py

"""
Chấm điểm một restorer trên manifest haze và ghi MetricReport.

Mỗi ảnh: mọi metric áp dụng được của MetricFactory trên O_Final, cộng fog density của input,
beta của haze và gradient trung bình theo dải độ sâu. Với streams=True có thêm metric của
O_SR / O_VF (tiền tố 'sr.' / 'vf.').
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .. import config
from ..core.async_workers import ordered_map
from ..core.data_model import ScenePair
from ..core.exceptions import DataError
from ..metrics.base_metric import MetricInput
from ..metrics.fusion_metrics import depth_band_gradients
from ..metrics.metric_factory import MetricFactory
from ..metrics.quality_models import FogModel, NssModel, fit_fog_model, fit_nss_model, fog_density, nss_score
from ..metrics.report import MetricReport, build_report, save_report
from ..metrics.segmentation import confusion_matrix, metrics_from_confusion
from ..storage.manifest import load_pair, read_manifest
from .plots import render_report_plots
from .restorers import Restorer, create_restorer

logger = logging.getLogger(__name__)

FOG_MODEL_FILE = "fog_model.json"
NSS_MODEL_FILE = "nss_model.json"

# Metric cần mask dự đoán, không tính cho các stream trung gian
_STREAM_EXCLUDED = ("miou", "pixel_acc")


@dataclass
class _ImageResult:
    image_id: str
    scores: Dict[str, float]
    confusion: Optional[np.ndarray] = None


@dataclass
class MetricModels:
    fog: FogModel
    nss: NssModel
    source: Dict[str, str] = field(default_factory=dict)


def metric_model_paths(metric_dir: Union[str, Path]) -> Tuple[Path, Path]:
    metric_dir = Path(metric_dir)
    return metric_dir / FOG_MODEL_FILE, metric_dir / NSS_MODEL_FILE


def load_metric_models(metric_dir: Union[str, Path] = config.METRIC_MODEL_DIR) -> MetricModels:
    """Raises UnfittedModelError nếu thiếu một trong hai model."""
    fog_path, nss_path = metric_model_paths(metric_dir)
    return MetricModels(fog=FogModel.load(fog_path), nss=NssModel.load(nss_path),
                        source={"fog": str(fog_path), "nss": str(nss_path)})


def fit_metric_models(manifest: Union[str, Path], out_dir: Union[str, Path] = config.METRIC_MODEL_DIR,
                      condition: str = "clear") -> MetricModels:
    """
    Fit FogModel và NssModel trên các ảnh visible clear của manifest rồi ghi JSON vào out_dir.

    Raises:
        InsufficientCorpusError: ít hơn 50 ảnh clear.
    """
    entries = [e for e in read_manifest(manifest) if e.condition == condition]
    images = [load_pair(e).visible for e in entries]
    logger.info(f"Fit metric model trên {len(images)} ảnh '{condition}' của {manifest}")
    fog_model = fit_fog_model(images)
    nss_model = fit_nss_model(images)
    out_dir = Path(out_dir)
    fog_path, nss_path = metric_model_paths(out_dir)
    fog_model.save(fog_path)
    nss_model.save(nss_path)
    return MetricModels(fog=fog_model, nss=nss_model, source={"fog": str(fog_path), "nss": str(nss_path)})


def _clear_counterparts(manifest: Union[str, Path]) -> Tuple[List, Dict[str, object]]:
    entries = read_manifest(manifest)
    by_id = {e.id: e for e in entries}
    hazy = [e for e in entries if e.condition == "haze"]
    if not hazy:
        raise DataError(f"Manifest {manifest} không có pair haze nào để đánh giá")
    clear = {}
    for entry in hazy:
        clear_id = entry.id.replace("_haze", "_clear")
        if clear_id != entry.id and clear_id in by_id:
            clear[entry.id] = by_id[clear_id]
    return hazy, clear


class Evaluator:
    """Chấm một pair; thread-safe vì restorer chạy no_grad ở eval mode và metric là hàm thuần."""

    def __init__(self, restorer: Restorer, models: MetricModels, streams: bool = False,
                 factory: Optional[MetricFactory] = None):
        self.restorer = restorer
        self.models = models
        self.streams = streams
        self.factory = factory or MetricFactory()
        self.stream_metrics = [n for n in self.factory.list_supported_metrics() if n not in _STREAM_EXCLUDED]

    def _sample(self, pair: ScenePair, output, clear: Optional[ScenePair], pred_mask=None) -> MetricInput:
        return MetricInput(
            image_id=pair.id,
            output=output,
            vis=pair.visible,
            nir=pair.nir,
            clear=clear.visible if clear is not None else None,
            depth=pair.depth,
            gt_mask=pair.mask,
            pred_mask=pred_mask,
            fog_model=self.models.fog,
            nss_model=self.models.nss,
        )

    def score_pair(self, pair: ScenePair, clear: Optional[ScenePair] = None) -> _ImageResult:
        restoration = self.restorer.restore(pair)
        scores = self.factory.compute_all(self._sample(pair, restoration.final, clear, restoration.segmentation))

        scores["input_fog_density"] = fog_density(pair.visible, self.models.fog)
        scores["input_nss_score"] = nss_score(pair.visible, self.models.nss)
        if pair.haze_params is not None:
            scores["haze_beta"] = float(pair.haze_params.beta_vis)
        if pair.depth is not None:
            scores.update(depth_band_gradients(restoration.final, pair.depth))

        if self.streams:
            for stream, image in restoration.streams().items():
                stream_scores = self.factory.compute_all(self._sample(pair, image, clear), names=self.stream_metrics)
                scores.update({f"{stream}.{k}": v for k, v in stream_scores.items()})

        confusion = None
        if restoration.segmentation is not None and pair.mask is not None:
            confusion = confusion_matrix(restoration.segmentation, pair.mask)
        return _ImageResult(image_id=pair.id, scores=scores, confusion=confusion)


def corpus_statistics(results: Sequence[_ImageResult]) -> Dict[str, float]:
    """Thống kê cấp corpus: mức giảm fog density, tỉ lệ ảnh được cải thiện, mIoU trên confusion gộp."""
    stats: Dict[str, float] = {"count": float(len(results))}
    pairs = [(r.scores["input_fog_density"], r.scores["fog_density"]) for r in results
             if "fog_density" in r.scores and "input_fog_density" in r.scores]
    if pairs:
        before = np.array([p[0] for p in pairs])
        after = np.array([p[1] for p in pairs])
        stats["fog_density_input_mean"] = float(before.mean())
        stats["fog_density_output_mean"] = float(after.mean())
        stats["fog_reduction_mean"] = float(1.0 - after.mean() / before.mean()) if before.mean() > 0 else 0.0
        stats["fog_improved_share"] = float(np.mean(after < before))
    nss = [(r.scores["input_nss_score"], r.scores["nss_score"]) for r in results
           if "nss_score" in r.scores and "input_nss_score" in r.scores]
    if nss:
        stats["nss_delta_mean"] = float(np.mean([after - before for before, after in nss]))
    confusions = [r.confusion for r in results if r.confusion is not None]
    if confusions:
        seg = metrics_from_confusion(np.sum(confusions, axis=0))
        stats["corpus_mIoU"] = seg["mIoU"]
        stats["corpus_pixel_acc"] = seg["pixel_acc"]
    return stats


def evaluate(ckpt_dir: Optional[Union[str, Path]], manifest: Union[str, Path], out_report: Union[str, Path],
             restorer: Union[str, Restorer] = "hsvf", streams: bool = False,
             metric_dir: Union[str, Path] = config.METRIC_MODEL_DIR, plots_dir: Optional[Union[str, Path]] = None,
             workers: int = config.WORKERS, device: str = "cpu") -> MetricReport:
    """
    Chấm restorer trên mọi pair haze của manifest, ghi report JSON (kèm schema) và plot nếu có plots_dir.

    Args:
        ckpt_dir: thư mục checkpoint (chỉ cần cho restorer 'hsvf').
        restorer: tên restorer ('hsvf' | 'identity') hoặc một Restorer đã dựng sẵn.
        streams: chấm thêm O_SR và O_VF.

    Raises:
        UnfittedModelError: thiếu FogModel/NssModel trong metric_dir.
    """
    models = load_metric_models(metric_dir)
    if isinstance(restorer, str):
        kwargs = {"ckpt_dir": ckpt_dir, "device": device} if restorer == "hsvf" else {}
        restorer = create_restorer(restorer, **kwargs)
    evaluator = Evaluator(restorer, models, streams=streams)

    hazy_entries, clear_entries = _clear_counterparts(manifest)
    logger.info(f"Đánh giá restorer '{restorer.name}' trên {len(hazy_entries)} ảnh haze của {manifest} "
                f"(streams={streams}, workers={workers})")

    def _score(entry) -> _ImageResult:
        clear_entry = clear_entries.get(entry.id)
        return evaluator.score_pair(load_pair(entry), load_pair(clear_entry) if clear_entry else None)

    results: List[_ImageResult] = []
    for index, result in enumerate(ordered_map(_score, hazy_entries, workers=workers, name="Eval")):
        results.append(result)
        if (index + 1) % 25 == 0:
            logger.info(f"Đã chấm {index + 1}/{len(hazy_entries)} ảnh")

    stats = corpus_statistics(results)
    metadata = {"restorer": restorer.name, "streams": streams, "metric_dir": str(metric_dir)}
    if ckpt_dir is not None:
        metadata["ckpt_dir"] = str(ckpt_dir)
    report = build_report(restorer.name, {r.image_id: r.scores for r in results}, manifest=str(manifest),
                          corpus=stats, metadata=metadata)
    save_report(report, out_report)

    if "fog_reduction_mean" in stats:
        logger.info(f"fog density {stats['fog_density_input_mean']:.4f} -> {stats['fog_density_output_mean']:.4f} "
                    f"(giảm {100 * stats['fog_reduction_mean']:.1f}%, "
                    f"{100 * stats['fog_improved_share']:.0f}% ảnh cải thiện)")
    if plots_dir is not None:
        render_report_plots(report, plots_dir)
    return report
