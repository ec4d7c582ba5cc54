# src/synthesis/haze_model.py

"""
Mô hình tán xạ khí quyển: I(x) = J(x) t(x) + A (1 - t(x)), với t(x) = exp(-beta d(x)).
NIR dùng beta_nir = nir_beta_ratio * beta_vis nên luôn bị suy giảm ít hơn visible.
"""
import logging

import numpy as np

from ..core.data_model import HazeParams, Image
from ..core.exceptions import ShapeError, ValidationError

logger = logging.getLogger(__name__)


def transmission(depth: np.ndarray, beta: float) -> np.ndarray:
    """
    Transmission map t = exp(-beta * depth), từng phần tử.

    Args:
        depth: Khoảng cách mỗi pixel (đơn vị scene), >= 0.
        beta: Hệ số tán xạ, >= 0.

    Returns:
        Mảng cùng shape với depth, giá trị trong (0, 1].
    """
    depth = np.asarray(depth, dtype=np.float64)
    if beta < 0:
        raise ValidationError(f"beta phải >= 0, nhận được {beta}")
    if np.any(depth < 0):
        raise ValidationError(f"depth phải >= 0, min nhận được {depth.min()}")
    return np.exp(-float(beta) * depth)


def apply_haze(clear: Image, depth: np.ndarray, params: HazeParams, modality: str) -> Image:
    """
    Phủ haze lên ảnh sạch theo đúng công thức đóng, không clamp.

    Kết quả là tổ hợp lồi của J và A nên tự nằm trong [min(J, A), max(J, A)].
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != clear.size:
        raise ShapeError(f"depth {depth.shape} khác kích thước ảnh {clear.size}")
    expected_channels = 3 if modality == "vis" else 1
    if clear.channels != expected_channels:
        raise ShapeError(f"Ảnh {modality} phải có {expected_channels} kênh, nhận được {clear.channels}")

    t = transmission(depth, params.beta_for(modality))[:, :, None]
    airlight = params.light_for(modality)[None, None, :]
    hazy = clear.pixels * t + airlight * (1.0 - t)
    return Image(hazy)


def random_haze_params(rng: np.random.Generator, beta_range=(0.4, 1.2), nir_beta_ratio: float = 0.3,
                       light_range=(0.7, 0.95), channel_jitter: float = 0.03) -> HazeParams:
    """Lấy mẫu A (chung cho các kênh, jitter nhẹ từng kênh) và beta đều trong beta_range."""
    lo, hi = float(beta_range[0]), float(beta_range[1])
    if lo < 0 or hi < lo:
        raise ValidationError(f"beta_range không hợp lệ: {beta_range}")
    base_light = rng.uniform(*light_range)
    jitter = rng.uniform(-channel_jitter, channel_jitter, size=3)
    light = np.clip(base_light + jitter, 0.0, 1.0)
    beta = rng.uniform(lo, hi)
    return HazeParams(atmospheric_light=tuple(light.tolist()), beta_vis=float(beta),
                      nir_beta_ratio=nir_beta_ratio)
