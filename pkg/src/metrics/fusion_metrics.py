# src/metrics/fusion_metrics.py

"""
Metric toàn tham chiếu và metric fusion trên ảnh numpy trong [0, 1]:
SSIM, mutual information (bit), VIF pixel-domain 4 scale, Q_AB/F, và vài thống kê gradient/contrast.
Tất cả là hàm thuần, tất định.
"""
import logging
import math
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from ..core.data_model import Image, as_pixels, luminance
from ..core.exceptions import DataError, ShapeError
from ..networks import image_ops

logger = logging.getLogger(__name__)

ImageLike = Union[Image, np.ndarray]

MI_BINS = 256

VIF_SCALES = 4
VIF_MIN_SIDE = 32
VIF_SIGMA_NSQ = 2.0
VIF_EPS = 1e-10

# Hằng số của độ đo bảo toàn cạnh Xydeas-Petrović
QABF_KAPPA_G = -15.0
QABF_SIGMA_G = 0.5
QABF_KAPPA_A = -22.0
QABF_SIGMA_A = 0.8
# Gamma chuẩn hóa để bảo toàn hoàn hảo (G = A = 1) cho Q = 1
QABF_GAMMA_G = 1.0 + math.exp(QABF_KAPPA_G * (1.0 - QABF_SIGMA_G))
QABF_GAMMA_A = 1.0 + math.exp(QABF_KAPPA_A * (1.0 - QABF_SIGMA_A))


def _gray(image: ImageLike) -> np.ndarray:
    return luminance(as_pixels(image)).astype(np.float64)


def _check_pair(*arrays: np.ndarray):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"Các ảnh không cùng kích thước: {sorted(shapes)}")


# ==============================================================================
# SSIM
# ==============================================================================

def ssim(a: ImageLike, b: ImageLike, window_size: int = image_ops.SSIM_WINDOW) -> float:
    """
    SSIM Gaussian 11x11 (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, tính bằng float64.
    Hai ảnh khác số kênh được so trên luminance; cùng số kênh thì lấy trung bình theo kênh.
    """
    pa, pb = as_pixels(a), as_pixels(b)
    _check_pair(pa, pb)
    if pa.shape[2] != pb.shape[2]:
        pa, pb = luminance(pa)[:, :, None], luminance(pb)[:, :, None]
    ta = torch.from_numpy(np.ascontiguousarray(pa.transpose(2, 0, 1))).unsqueeze(0).double()
    tb = torch.from_numpy(np.ascontiguousarray(pb.transpose(2, 0, 1))).unsqueeze(0).double()
    return float(image_ops.ssim(ta, tb, window_size=window_size)[0])


# ==============================================================================
# Mutual information
# ==============================================================================

def quantize(gray: np.ndarray, bins: int = MI_BINS) -> np.ndarray:
    """[0, 1] -> số nguyên 0..bins-1."""
    return np.clip(np.round(gray * (bins - 1)), 0, bins - 1).astype(np.int64)


def entropy(image: ImageLike, bins: int = MI_BINS) -> float:
    counts = np.bincount(quantize(_gray(image), bins).ravel(), minlength=bins)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def _pairwise_mi(x: np.ndarray, y: np.ndarray, bins: int) -> float:
    qx = quantize(x, bins).ravel()
    qy = quantize(y, bins).ravel()
    joint = np.bincount(qx * bins + qy, minlength=bins * bins).reshape(bins, bins).astype(np.float64)
    joint /= joint.sum()
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(px, py)
    return float(max((joint[nz] * np.log2(joint[nz] / outer[nz])).sum(), 0.0))


def mutual_information(fused: ImageLike, source: ImageLike, source_b: Optional[ImageLike] = None,
                       bins: int = MI_BINS) -> float:
    """
    MI(F; A) theo bit từ histogram kết hợp 256 bin trên luminance.
    Khi truyền thêm source_b, trả về MI(F; A) + MI(F; B) theo quy ước của metric fusion.
    Ảnh hằng có entropy 0 nên cho MI = 0.
    """
    f = _gray(fused)
    a = _gray(source)
    _check_pair(f, a)
    value = _pairwise_mi(f, a, bins)
    if source_b is not None:
        b = _gray(source_b)
        _check_pair(f, b)
        value += _pairwise_mi(f, b, bins)
    return value


# ==============================================================================
# VIF
# ==============================================================================

def _gaussian_kernel(size: int) -> np.ndarray:
    sd = size / 5.0
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sd * sd))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def vif(reference: ImageLike, distorted: ImageLike) -> float:
    """
    VIF pixel-domain 4 scale (mô hình GSM, sigma_nsq = 2 trên thang 8-bit).
    Lọc 'same' với biên reflect để ảnh 32x32 vẫn đủ cho 4 scale.
    """
    ref = _gray(reference) * 255.0
    dist = _gray(distorted) * 255.0
    _check_pair(ref, dist)
    if min(ref.shape) < VIF_MIN_SIDE:
        raise ShapeError(f"VIF {VIF_SCALES} scale cần ảnh >= {VIF_MIN_SIDE}x{VIF_MIN_SIDE}, nhận được {ref.shape}")

    num = 0.0
    den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        win = _gaussian_kernel(2 ** (VIF_SCALES - scale + 1) + 1)
        if scale > 1:
            ref = ndimage.correlate(ref, win, mode="reflect")[::2, ::2]
            dist = ndimage.correlate(dist, win, mode="reflect")[::2, ::2]

        mu1 = ndimage.correlate(ref, win, mode="reflect")
        mu2 = ndimage.correlate(dist, win, mode="reflect")
        sigma1_sq = np.maximum(ndimage.correlate(ref * ref, win, mode="reflect") - mu1 * mu1, 0.0)
        sigma2_sq = np.maximum(ndimage.correlate(dist * dist, win, mode="reflect") - mu2 * mu2, 0.0)
        sigma12 = ndimage.correlate(ref * dist, win, mode="reflect") - mu1 * mu2

        g = sigma12 / (sigma1_sq + VIF_EPS)
        sv_sq = sigma2_sq - g * sigma12

        flat_ref = sigma1_sq < VIF_EPS
        g[flat_ref] = 0
        sv_sq[flat_ref] = sigma2_sq[flat_ref]
        sigma1_sq[flat_ref] = 0

        flat_dist = sigma2_sq < VIF_EPS
        g[flat_dist] = 0
        sv_sq[flat_dist] = 0

        negative = g < 0
        sv_sq[negative] = sigma2_sq[negative]
        g[negative] = 0
        sv_sq = np.maximum(sv_sq, VIF_EPS)

        num += np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1.0 + sigma1_sq / VIF_SIGMA_NSQ))

    if den == 0:
        # ảnh tham chiếu phẳng hoàn toàn
        return 1.0 if np.array_equal(_gray(reference), _gray(distorted)) else 0.0
    return float(num / den)


def fusion_vif(src_a: ImageLike, src_b: ImageLike, fused: ImageLike) -> float:
    """Trung bình vif(A, F) và vif(B, F)."""
    return 0.5 * (vif(src_a, fused) + vif(src_b, fused))


# ==============================================================================
# Q_AB/F
# ==============================================================================

def _edge_strength_orientation(gray: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gx = ndimage.sobel(gray, axis=1, mode="reflect")
    gy = ndimage.sobel(gray, axis=0, mode="reflect")
    strength = np.hypot(gx, gy)
    orientation = np.full_like(gray, math.pi / 2)
    nonzero = gx != 0
    orientation[nonzero] = np.arctan(gy[nonzero] / gx[nonzero])
    return strength, orientation


def _preservation(g_src: np.ndarray, a_src: np.ndarray, g_f: np.ndarray, a_f: np.ndarray) -> np.ndarray:
    high = np.maximum(g_src, g_f)
    low = np.minimum(g_src, g_f)
    relative_strength = np.where(high > 0, low / np.where(high > 0, high, 1.0), 1.0)
    relative_orientation = 1.0 - np.abs(a_src - a_f) / (math.pi / 2)
    q_g = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (relative_strength - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (relative_orientation - QABF_SIGMA_A)))
    return q_g * q_a


def q_abf(src_a: ImageLike, src_b: ImageLike, fused: ImageLike) -> float:
    """
    Mức bảo toàn cạnh từ hai nguồn vào ảnh fusion, trọng số theo độ mạnh cạnh của nguồn (L = 1).

    Returns:
        Giá trị trong [0, 1]; 0 nếu cả hai nguồn đều không có cạnh.
    """
    a, b, f = _gray(src_a), _gray(src_b), _gray(fused)
    _check_pair(a, b, f)
    g_a, ang_a = _edge_strength_orientation(a)
    g_b, ang_b = _edge_strength_orientation(b)
    g_f, ang_f = _edge_strength_orientation(f)
    q_af = _preservation(g_a, ang_a, g_f, ang_f)
    q_bf = _preservation(g_b, ang_b, g_f, ang_f)
    weights = np.sum(g_a + g_b)
    if weights == 0:
        logger.debug("q_abf: hai ảnh nguồn không có cạnh, trả về 0")
        return 0.0
    return float(np.clip(np.sum(q_af * g_a + q_bf * g_b) / weights, 0.0, 1.0))


# ==============================================================================
# Gradient / contrast
# ==============================================================================

def gradient_map(image: ImageLike) -> np.ndarray:
    gray = _gray(image)
    return np.hypot(ndimage.sobel(gray, axis=1, mode="reflect"), ndimage.sobel(gray, axis=0, mode="reflect"))


def gradient_energy(image: ImageLike) -> float:
    """Trung bình độ lớn gradient Sobel trên luminance (proxy texture)."""
    return float(gradient_map(image).mean())


def rms_contrast(image: ImageLike) -> float:
    return float(_gray(image).std())


def far_region_gradient(image: ImageLike, depth: np.ndarray, threshold: float = 2.5) -> float:
    """Gradient trung bình trên các pixel có depth >= threshold (vùng xa)."""
    grad = gradient_map(image)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != grad.shape:
        raise ShapeError(f"Depth {depth.shape} không khớp ảnh {grad.shape}")
    far = depth >= threshold
    if not far.any():
        raise DataError(f"Không có pixel nào có depth >= {threshold}")
    return float(grad[far].mean())


# Dải độ sâu (đơn vị của depth map, sky = 5)
DEPTH_BANDS = (("near", 0.0, 1.0), ("mid", 1.0, 2.5), ("far", 2.5, float("inf")))


def depth_band_gradients(image: ImageLike, depth: np.ndarray) -> Dict[str, float]:
    """Gradient trung bình trong từng dải độ sâu, key 'grad_<dải>'; dải không có pixel thì bỏ qua."""
    grad = gradient_map(image)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != grad.shape:
        raise ShapeError(f"Depth {depth.shape} không khớp ảnh {grad.shape}")
    bands = {}
    for name, lo, hi in DEPTH_BANDS:
        selected = (depth >= lo) & (depth < hi)
        if selected.any():
            bands[f"grad_{name}"] = float(grad[selected].mean())
    return bands
