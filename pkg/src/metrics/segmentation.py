# src/metrics/segmentation.py

import logging
from typing import Dict, Sequence, Union

import numpy as np

from ..core.data_model import CLASS_NAMES, IGNORE_LABEL, NUM_CLASSES, Image, SemanticMask, as_labels
from ..core.exceptions import DataError, ShapeError
from .fusion_metrics import gradient_map

logger = logging.getLogger(__name__)

MaskLike = Union[SemanticMask, np.ndarray]

GRADIENT_HIST_BINS = 32
GRADIENT_HIST_RANGE = (0.0, 2.0)


def confusion_matrix(pred: MaskLike, gt: MaskLike) -> np.ndarray:
    """
    Ma trận nhầm lẫn NUM_CLASSES x (NUM_CLASSES + 1): hàng = gt, cột = pred, cột cuối là pixel pred
    không thuộc class nào. Pixel ignore của gt bị bỏ qua.
    """
    pred_labels, gt_labels = as_labels(pred), as_labels(gt)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(f"pred {pred_labels.shape} và gt {gt_labels.shape} khác kích thước")
    valid = gt_labels != IGNORE_LABEL
    p = pred_labels[valid]
    g = gt_labels[valid]
    p = np.where((p >= 0) & (p < NUM_CLASSES), p, NUM_CLASSES)
    counts = np.bincount(g * (NUM_CLASSES + 1) + p, minlength=NUM_CLASSES * (NUM_CLASSES + 1))
    return counts.reshape(NUM_CLASSES, NUM_CLASSES + 1)


def metrics_from_confusion(confusion: np.ndarray) -> Dict[str, object]:
    """
    mIoU trên các class có mặt trong gt và pixel accuracy.

    Args:
        confusion: ma trận tích lũy (có thể cộng dồn qua nhiều ảnh).
    """
    gt_counts = confusion.sum(axis=1)
    total = gt_counts.sum()
    if total == 0:
        raise DataError("Không có pixel hợp lệ để tính metric segmentation")
    tp = np.diag(confusion[:, :NUM_CLASSES])
    union = gt_counts + confusion[:, :NUM_CLASSES].sum(axis=0) - tp
    present = gt_counts > 0
    iou = {CLASS_NAMES[n]: float(tp[n] / union[n]) for n in range(NUM_CLASSES) if present[n]}
    return {
        "mIoU": float(np.mean(list(iou.values()))),
        "pixel_acc": float(tp.sum() / total),
        "iou": iou,
    }


def segmentation_metrics(pred: MaskLike, gt: MaskLike) -> Dict[str, object]:
    """{mIoU, pixel_acc, iou theo class} cho một cặp mask."""
    confusion = confusion_matrix(pred, gt)
    return metrics_from_confusion(confusion)


def _class_histograms(images: Sequence[Image], masks: Sequence[MaskLike]) -> np.ndarray:
    if len(images) != len(masks):
        raise DataError(f"Số ảnh ({len(images)}) khác số mask ({len(masks)})")
    hist = np.zeros((NUM_CLASSES, GRADIENT_HIST_BINS))
    for image, mask in zip(images, masks):
        grad = gradient_map(image)
        labels = as_labels(mask)
        if labels.shape != grad.shape:
            raise ShapeError(f"Mask {labels.shape} không khớp ảnh {grad.shape}")
        for n in range(NUM_CLASSES):
            values = np.clip(grad[labels == n], *GRADIENT_HIST_RANGE)
            hist[n] += np.histogram(values, bins=GRADIENT_HIST_BINS, range=GRADIENT_HIST_RANGE)[0]
    return hist


def class_gradient_histogram_distance(images: Sequence[Image], masks: Sequence[MaskLike],
                                      reference_images: Sequence[Image],
                                      reference_masks: Sequence[MaskLike]) -> Dict[str, float]:
    """
    Khoảng cách L1 giữa histogram độ lớn gradient (chuẩn hóa) của từng class trên tập ảnh
    và trên tập tham chiếu clear. Key 'mean' là trung bình trên các class có mặt ở cả hai phía.
    """
    hist = _class_histograms(images, masks)
    ref = _class_histograms(reference_images, reference_masks)
    distances = {}
    for n in range(NUM_CLASSES):
        if hist[n].sum() == 0 or ref[n].sum() == 0:
            continue
        distances[CLASS_NAMES[n]] = float(np.abs(hist[n] / hist[n].sum() - ref[n] / ref[n].sum()).sum())
    if not distances:
        raise DataError("Không class nào có mặt ở cả hai tập ảnh")
    distances["mean"] = float(np.mean(list(distances.values())))
    return distances
