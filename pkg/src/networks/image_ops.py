# src/networks/image_ops.py

"""
Phép toán ảnh dùng chung bởi loss và metric: SSIM Gaussian, gradient Sobel, chuyển kênh.
Mọi hàm nhận tensor B x C x H x W và giữ nguyên dtype (float64 cho grad check).
"""
import logging
from typing import Tuple

import torch
import torch.nn.functional as F

from ..core.exceptions import ShapeError

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

_SOBEL_X = ((1.0, 0.0, -1.0),
            (2.0, 0.0, -2.0),
            (1.0, 0.0, -1.0))

_LUMA = (0.2126, 0.7152, 0.0722)


def gaussian_window(window_size: int, sigma: float, dtype: torch.dtype, device=None) -> torch.Tensor:
    coords = torch.arange(window_size, dtype=dtype, device=device) - (window_size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window_size: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """
    SSIM cục bộ với cửa sổ Gaussian, convolution 'valid', từng kênh riêng.

    Returns:
        Tensor B x C x (H - w + 1) x (W - w + 1).
    """
    if a.shape != b.shape:
        raise ShapeError(f"SSIM cần hai ảnh cùng shape, nhận được {tuple(a.shape)} và {tuple(b.shape)}")
    _, channels, height, width = a.shape
    if window_size > height or window_size > width:
        raise ShapeError(f"Cửa sổ SSIM {window_size} lớn hơn ảnh {height}x{width}")

    window = gaussian_window(window_size, sigma, a.dtype, a.device)
    kernel = window.expand(channels, 1, window_size, window_size).contiguous()

    def _filter(x):
        return F.conv2d(x, kernel, groups=channels)

    mu_a = _filter(a)
    mu_b = _filter(b)
    mu_a2, mu_b2, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _filter(a * a) - mu_a2
    var_b = _filter(b * b) - mu_b2
    cov = _filter(a * b) - mu_ab

    numerator = (2.0 * mu_ab + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_a2 + mu_b2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return numerator / denominator


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """SSIM trung bình cho từng ảnh trong batch, shape (B,)."""
    return ssim_map(a, b, window_size, sigma).flatten(1).mean(dim=1)


def sobel_gradients(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gradient Sobel 3x3 theo x và y, reflect padding, từng kênh."""
    _, channels, height, width = x.shape
    if height < 3 or width < 3:
        raise ShapeError(f"Ảnh {height}x{width} nhỏ hơn kernel Sobel 3x3")
    kx = torch.tensor(_SOBEL_X, dtype=x.dtype, device=x.device)
    ky = kx.t()
    weight_x = kx.expand(channels, 1, 3, 3).contiguous()
    weight_y = ky.expand(channels, 1, 3, 3).contiguous()
    padded = F.pad(x, (1, 1, 1, 1), mode="reflect")
    return F.conv2d(padded, weight_x, groups=channels), F.conv2d(padded, weight_y, groups=channels)


def gradient_magnitude(x: torch.Tensor) -> torch.Tensor:
    """|∇x| = |Gx| + |Gy| (chuẩn L1 của gradient Sobel)."""
    gx, gy = sobel_gradients(x)
    return gx.abs() + gy.abs()


def to_three_channels(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] == 3:
        return x
    if x.shape[1] == 1:
        return x.expand(-1, 3, -1, -1)
    raise ShapeError(f"Không thể chuyển {x.shape[1]} kênh sang 3 kênh")


def to_luminance(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise ShapeError(f"to_luminance cần 1 hoặc 3 kênh, nhận được {x.shape[1]}")
    weights = torch.tensor(_LUMA, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * weights).sum(dim=1, keepdim=True)


def check_same_size(*tensors: torch.Tensor):
    sizes = {tuple(t.shape[-2:]) for t in tensors}
    if len(sizes) != 1:
        raise ShapeError(f"Các ảnh không cùng kích thước không gian: {sorted(sizes)}")
