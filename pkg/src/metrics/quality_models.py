# src/metrics/quality_models.py

"""
Hai chỉ số chất lượng không tham chiếu, fit trên corpus ảnh clear:

- fog_density: khoảng cách giữa đặc trưng nhạy sương (dark channel, contrast, saturation, gradient)
  và thống kê của corpus clear. Đặc trưng được đổi dấu sao cho ảnh càng mờ thì càng lớn, và mỗi
  độ lệch đi qua softplus nên điểm tăng đơn điệu theo từng đặc trưng.
- nss_score: khoảng cách kiểu NIQE giữa thống kê MSCN theo patch của ảnh và mô hình pristine.

Đây là thước đo thay thế, chỉ dùng để so sánh tương đối.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.special import gamma as gamma_fn

from ..core.data_model import Image, as_pixels, luminance
from ..core.exceptions import InsufficientCorpusError, ShapeError, UnfittedModelError
from ..storage.file_handlers import create_file_handler

logger = logging.getLogger(__name__)

MIN_CORPUS = 50
RIDGE = 1e-6

DARK_CHANNEL_SIZE = 7
CONTRAST_SIGMA = 2.0
SATURATION_EPS = 1e-6

FOG_FEATURES = ("dark_channel", "neg_local_contrast", "neg_saturation", "neg_gradient_energy")

NSS_PATCH_SIZES = (16, 8)
MSCN_SIGMA = 7.0 / 6.0
MSCN_C = 1.0
NSS_MIN_SIDE = 16

_GAMMA_GRID = np.arange(0.2, 10.0, 0.001)
_R_GAMMA = gamma_fn(2.0 / _GAMMA_GRID) ** 2 / (gamma_fn(1.0 / _GAMMA_GRID) * gamma_fn(3.0 / _GAMMA_GRID))

ImageLike = Union[Image, np.ndarray]


# ==============================================================================
# Fog-aware features
# ==============================================================================

def dark_channel(pixels: np.ndarray, size: int = DARK_CHANNEL_SIZE) -> np.ndarray:
    """min theo kênh rồi min-filter size x size."""
    return ndimage.minimum_filter(pixels.min(axis=2), size=size, mode="nearest")


def fog_features(image: ImageLike) -> np.ndarray:
    pixels = as_pixels(image)
    gray = luminance(pixels)

    mu = ndimage.gaussian_filter(gray, CONTRAST_SIGMA, mode="nearest")
    local_var = ndimage.gaussian_filter(gray * gray, CONTRAST_SIGMA, mode="nearest") - mu * mu
    local_contrast = np.sqrt(np.maximum(local_var, 0.0)).mean()

    highest = pixels.max(axis=2)
    saturation = ((highest - pixels.min(axis=2)) / np.maximum(highest, SATURATION_EPS)).mean()

    grad = np.hypot(ndimage.sobel(gray, axis=1, mode="reflect"), ndimage.sobel(gray, axis=0, mode="reflect"))

    return np.array([
        dark_channel(pixels).mean(),
        -local_contrast,
        -saturation,
        -grad.mean(),
    ])


# ==============================================================================
# NSS features
# ==============================================================================

def mscn(gray: np.ndarray) -> np.ndarray:
    mu = ndimage.gaussian_filter(gray, MSCN_SIGMA, mode="nearest")
    sigma = np.sqrt(np.abs(ndimage.gaussian_filter(gray * gray, MSCN_SIGMA, mode="nearest") - mu * mu))
    return (gray - mu) / (sigma + MSCN_C)


def aggd_params(values: np.ndarray):
    """Ước lượng (alpha, beta_left, beta_right) của phân phối Gaussian tổng quát bất đối xứng."""
    values = values.ravel()
    left = values[values < 0]
    right = values[values > 0]
    left_std = np.sqrt(np.mean(left ** 2)) if left.size else 0.0
    right_std = np.sqrt(np.mean(right ** 2)) if right.size else 0.0
    mean_sq = np.mean(values ** 2)
    if mean_sq == 0:
        return 2.0, 0.0, 0.0

    gamma_hat = np.clip(left_std / right_std, 1e-3, 1e3) if right_std > 0 else 1e3
    r_hat = np.mean(np.abs(values)) ** 2 / mean_sq
    r_hat_norm = r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1) / (gamma_hat ** 2 + 1) ** 2
    alpha = _GAMMA_GRID[np.argmin((_R_GAMMA - r_hat_norm) ** 2)]

    ratio = np.sqrt(gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha))
    return float(alpha), float(left_std * ratio), float(right_std * ratio)


def patch_features(patch: np.ndarray) -> np.ndarray:
    """18 đặc trưng: (alpha, beta) của MSCN + (alpha, eta, beta_l, beta_r) cho 4 hướng tích cặp."""
    alpha, beta_l, beta_r = aggd_params(patch)
    features = [alpha, (beta_l + beta_r) / 2.0]
    for dx, dy in ((0, 1), (1, 0), (1, 1), (1, -1)):
        products = patch * np.roll(np.roll(patch, dy, axis=0), dx, axis=1)
        alpha, beta_l, beta_r = aggd_params(products)
        eta = (beta_r - beta_l) * gamma_fn(2.0 / alpha) / gamma_fn(1.0 / alpha)
        features.extend([alpha, eta, beta_l, beta_r])
    return np.array(features)


def _patches(array: np.ndarray, size: int) -> List[np.ndarray]:
    rows, cols = array.shape[0] // size, array.shape[1] // size
    return [array[r * size:(r + 1) * size, c * size:(c + 1) * size] for r in range(rows) for c in range(cols)]


def _half_scale(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape[0] // 2 * 2, gray.shape[1] // 2 * 2
    return gray[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def nss_patch_features(image: ImageLike) -> np.ndarray:
    """
    Ma trận (số patch, 36): patch 16x16 ở scale gốc ghép với patch 8x8 cùng vị trí ở scale 1/2.
    """
    gray = luminance(as_pixels(image)) * 255.0
    if min(gray.shape) < NSS_MIN_SIDE:
        raise ShapeError(f"nss_score cần ảnh >= {NSS_MIN_SIDE}x{NSS_MIN_SIDE}, nhận được {gray.shape}")
    full_size, half_size = NSS_PATCH_SIZES
    full = [patch_features(p) for p in _patches(mscn(gray), full_size)]
    half = [patch_features(p) for p in _patches(mscn(_half_scale(gray)), half_size)]
    count = min(len(full), len(half))
    features = np.hstack([np.array(full[:count]), np.array(half[:count])])
    return np.nan_to_num(features)


# ==============================================================================
# Models
# ==============================================================================

@dataclass
class GaussianFeatureModel:
    """Mean/covariance của đặc trưng trên corpus clear, có ridge trên đường chéo."""
    KIND = ""
    kind: str = ""
    feature_names: List[str] = field(default_factory=list)
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    n_images: int = 0
    ridge: float = RIDGE

    @property
    def is_fitted(self) -> bool:
        return self.mean is not None and self.cov is not None

    def require_fitted(self):
        if not self.is_fitted:
            raise UnfittedModelError(f"Model '{self.kind or type(self).__name__}' chưa được fit")

    def to_dict(self) -> dict:
        self.require_fitted()
        return {
            "kind": self.kind,
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "n_images": self.n_images,
            "ridge": self.ridge,
        }

    def save(self, path: Union[str, Path]):
        handler = create_file_handler(path, "json")
        handler.write(self.to_dict())
        logger.info(f"Đã lưu model '{self.kind}' ({self.n_images} ảnh) vào {path}")

    @classmethod
    def load(cls, path: Union[str, Path]):
        path = Path(path)
        if not path.exists():
            raise UnfittedModelError(f"Không tìm thấy model đã fit: {path} (chạy fit-metrics trước)")
        record = create_file_handler(path, "json").read()
        model = cls(
            kind=record["kind"],
            feature_names=list(record["feature_names"]),
            mean=np.asarray(record["mean"], dtype=np.float64),
            cov=np.asarray(record["cov"], dtype=np.float64),
            n_images=int(record["n_images"]),
            ridge=float(record["ridge"]),
        )
        if model.kind != cls.KIND:
            raise UnfittedModelError(f"{path} chứa model '{model.kind}', cần '{cls.KIND}'")
        return model


class FogModel(GaussianFeatureModel):
    KIND = "fog"

    def __init__(self, **kwargs):
        kwargs.setdefault("kind", self.KIND)
        kwargs.setdefault("feature_names", list(FOG_FEATURES))
        super().__init__(**kwargs)


class NssModel(GaussianFeatureModel):
    KIND = "nss"

    def __init__(self, **kwargs):
        kwargs.setdefault("kind", self.KIND)
        kwargs.setdefault("feature_names", [f"nss_{i:02d}" for i in range(36)])
        super().__init__(**kwargs)


def _regularized_cov(samples: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    return cov + RIDGE * np.eye(cov.shape[0])


def _check_corpus(images: Sequence[ImageLike]):
    if len(images) < MIN_CORPUS:
        raise InsufficientCorpusError(f"Cần ít nhất {MIN_CORPUS} ảnh clear để fit model, nhận được {len(images)}")


def fit_fog_model(clear_corpus: Iterable[ImageLike]) -> FogModel:
    images = list(clear_corpus)
    _check_corpus(images)
    samples = np.stack([fog_features(img) for img in images])
    model = FogModel(mean=samples.mean(axis=0), cov=_regularized_cov(samples), n_images=len(images))
    logger.info(f"Fit FogModel trên {len(images)} ảnh clear")
    return model


def fit_nss_model(clear_corpus: Iterable[ImageLike]) -> NssModel:
    images = list(clear_corpus)
    _check_corpus(images)
    samples = np.vstack([nss_patch_features(img) for img in images])
    model = NssModel(mean=samples.mean(axis=0), cov=_regularized_cov(samples), n_images=len(images))
    logger.info(f"Fit NssModel trên {len(images)} ảnh clear ({samples.shape[0]} patch)")
    return model


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def fog_density(image: ImageLike, model: Optional[FogModel]) -> float:
    """
    sqrt(Σ softplus(z_k)^2) với z_k là độ lệch chuẩn hóa của đặc trưng k so với corpus clear.
    Lớn hơn = nhiều sương hơn.
    """
    if model is None:
        raise UnfittedModelError("fog_density cần FogModel đã fit")
    model.require_fitted()
    z = (fog_features(image) - model.mean) / np.sqrt(np.diag(model.cov))
    return float(np.sqrt(np.sum(_softplus(z) ** 2)))


def nss_score(image: ImageLike, model: Optional[NssModel]) -> float:
    """Khoảng cách Mahalanobis giữa thống kê patch của ảnh và mô hình pristine. Nhỏ hơn = tự nhiên hơn."""
    if model is None:
        raise UnfittedModelError("nss_score cần NssModel đã fit")
    model.require_fitted()
    features = nss_patch_features(image)
    image_mean = features.mean(axis=0)
    image_cov = np.cov(features, rowvar=False) if features.shape[0] > 1 else np.zeros_like(model.cov)
    diff = model.mean - image_mean
    inv = np.linalg.pinv((model.cov + image_cov) / 2.0)
    return float(np.sqrt(max(diff @ inv @ diff, 0.0)))
