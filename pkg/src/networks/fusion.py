# src/networks/fusion.py

"""
Cross-modal visual fusion: stem nông cho từng modality, attention theo cửa sổ kết hợp
self-attention (trong modality) và cross-attention (giữa hai modality), decoder sinh O_VF,
cùng ba loss fusion (SSIM, texture, intensity).
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.exceptions import ShapeError, ValidationError
from .image_ops import (
    SSIM_WINDOW, check_same_size, gradient_magnitude, ssim, to_luminance, to_three_channels,
)

logger = logging.getLogger(__name__)

FEATURE_DIM = 32
WINDOW_SIZE = 8
NUM_HEADS = 2


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """
    Args:
        x: (B, H, W, C)

    Returns:
        (B, nW, window_size * window_size, C)
    """
    B, H, W, C = x.shape
    x = x.view(B, H // window_size, window_size, W // window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).contiguous().view(B, -1, window_size * window_size, C)


def window_reverse(windows: torch.Tensor, window_size: int, H: int, W: int) -> torch.Tensor:
    """
    Args:
        windows: (B, nW, window_size * window_size, C)

    Returns:
        (B, H, W, C)
    """
    B = windows.shape[0]
    x = windows.view(B, H // window_size, W // window_size, window_size, window_size, -1)
    return x.permute(0, 1, 3, 2, 4, 5).contiguous().view(B, H, W, -1)


@dataclass
class AttentionTokens:
    """Q, K, V của một modality, shape (B, nW, heads, T, d)."""
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    height: int
    width: int
    window_size: int

    @property
    def head_dim(self) -> int:
        return self.q.shape[-1]

    @property
    def token_count(self) -> int:
        return self.q.shape[-2]

    def validate(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ShapeError(f"Q/K/V không cùng shape: {tuple(self.q.shape)}, {tuple(self.k.shape)}, "
                             f"{tuple(self.v.shape)}")
        if self.head_dim <= 0:
            raise ShapeError("Chiều feature mỗi head phải > 0")


class QKVProjection(nn.Module):
    """Ba phép chiếu tuyến tính không bias cho query, key, value của một modality."""

    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.dim = dim
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)

    def forward(self, features: torch.Tensor, window_size: int = WINDOW_SIZE,
                num_heads: int = NUM_HEADS) -> AttentionTokens:
        return project_qkv(features, self, window_size, num_heads)


def project_qkv(features: torch.Tensor, projection: QKVProjection, window_size: int = WINDOW_SIZE,
                num_heads: int = NUM_HEADS) -> AttentionTokens:
    """
    Chia feature map (B, C, H, W) thành các cửa sổ window_size x window_size rồi chiếu ra Q, K, V.
    """
    B, C, H, W = features.shape
    if C != projection.dim:
        raise ShapeError(f"Feature có {C} kênh, phép chiếu cần {projection.dim}")
    if H % window_size or W % window_size:
        raise ShapeError(f"Feature {H}x{W} không chia hết cho cửa sổ {window_size}")
    if C % num_heads:
        raise ShapeError(f"{C} kênh không chia đều cho {num_heads} head")
    windows = window_partition(features.permute(0, 2, 3, 1), window_size)
    head_dim = C // num_heads

    def _split_heads(x):
        nW, T = x.shape[1], x.shape[2]
        return x.view(B, nW, T, num_heads, head_dim).permute(0, 1, 3, 2, 4)

    tokens = AttentionTokens(
        q=_split_heads(projection.q(windows)),
        k=_split_heads(projection.k(windows)),
        v=_split_heads(projection.v(windows)),
        height=H,
        width=W,
        window_size=window_size,
    )
    tokens.validate()
    return tokens


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
    return weights @ v, weights


def joint_attention(tokens_v: AttentionTokens, tokens_n: AttentionTokens, use_self: bool = True,
                    use_cross: bool = True, return_weights: bool = False):
    """
    F_V = softmax(Q_V K_V^T / sqrt(d)) V_V + softmax(Q_V K_N^T / sqrt(d)) V_N, đối xứng cho F_N.

    Hai lượt đọc được cộng, không lấy trung bình. Khi tắt cả self lẫn cross, trả lại V của từng modality.

    Returns:
        (F_V, F_N) shape (B, nW, heads, T, d); thêm dict ma trận attention nếu return_weights.
    """
    if tokens_v.q.shape != tokens_n.q.shape:
        raise ShapeError(f"Token hai modality không cùng shape: {tuple(tokens_v.q.shape)} vs "
                         f"{tuple(tokens_n.q.shape)}")
    weights: Dict[str, torch.Tensor] = {}
    if not (use_self or use_cross):
        out = (tokens_v.v, tokens_n.v)
        return (out, weights) if return_weights else out

    f_v = torch.zeros_like(tokens_v.v)
    f_n = torch.zeros_like(tokens_n.v)
    if use_self:
        read_v, weights["self_v"] = _attend(tokens_v.q, tokens_v.k, tokens_v.v)
        read_n, weights["self_n"] = _attend(tokens_n.q, tokens_n.k, tokens_n.v)
        f_v = f_v + read_v
        f_n = f_n + read_n
    if use_cross:
        read_v, weights["cross_v"] = _attend(tokens_v.q, tokens_n.k, tokens_n.v)
        read_n, weights["cross_n"] = _attend(tokens_n.q, tokens_v.k, tokens_v.v)
        f_v = f_v + read_v
        f_n = f_n + read_n
    return ((f_v, f_n), weights) if return_weights else (f_v, f_n)


def tokens_to_map(fused: torch.Tensor, height: int, width: int, window_size: int) -> torch.Tensor:
    """(B, nW, heads, T, d) -> (B, heads*d, H, W)."""
    B, nW, heads, T, d = fused.shape
    windows = fused.permute(0, 1, 3, 2, 4).reshape(B, nW, T, heads * d)
    return window_reverse(windows, window_size, height, width).permute(0, 3, 1, 2).contiguous()


class ShallowStem(nn.Module):
    """Hai conv 3x3 ở độ phân giải đầy đủ."""

    def __init__(self, in_channels: int, dim: int = FEATURE_DIM):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, dim, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(dim, dim, 3, 1, 1),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x):
        return self.body(x)


class FusionDecoder(nn.Module):
    """Ghép F_V, F_N và skip từ hai stem, giải mã ra ảnh RGB [0,1]."""

    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.dim = dim
        self.body = nn.Sequential(
            nn.Conv2d(4 * dim, 2 * dim, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * dim, dim, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(dim, 3, 3, 1, 1),
        )

    def forward(self, f_v, f_n, shallow_v, shallow_n):
        check_same_size(f_v, f_n, shallow_v, shallow_n)
        for name, t in (("F_V", f_v), ("F_N", f_n), ("shallow_v", shallow_v), ("shallow_n", shallow_n)):
            if t.shape[1] != self.dim:
                raise ShapeError(f"{name} có {t.shape[1]} kênh, decoder cần {self.dim}")
        return torch.sigmoid(self.body(torch.cat([f_v, f_n, shallow_v, shallow_n], dim=1)))


class VisualFusionModule(nn.Module):
    """Stem -> Q/K/V theo cửa sổ -> joint attention -> decoder. Hai cờ chọn các nhánh attention."""

    def __init__(self, dim: int = FEATURE_DIM, window_size: int = WINDOW_SIZE, num_heads: int = NUM_HEADS,
                 self_attention: bool = True, cross_attention: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValidationError(f"dim {dim} không chia hết cho số head {num_heads}")
        self.window_size = window_size
        self.num_heads = num_heads
        self.self_attention = self_attention
        self.cross_attention = cross_attention
        self.stems = nn.ModuleDict({"vis": ShallowStem(3, dim), "nir": ShallowStem(1, dim)})
        self.projections = nn.ModuleDict({"vis": QKVProjection(dim), "nir": QKVProjection(dim)})
        self.decoder = FusionDecoder(dim)

    def project_qkv(self, features: torch.Tensor, modality: str) -> AttentionTokens:
        return project_qkv(features, self.projections[modality], self.window_size, self.num_heads)

    def forward(self, vis: torch.Tensor, nir: torch.Tensor) -> torch.Tensor:
        check_same_size(vis, nir)
        shallow_v = self.stems["vis"](vis)
        shallow_n = self.stems["nir"](nir)
        tokens_v = self.project_qkv(shallow_v, "vis")
        tokens_n = self.project_qkv(shallow_n, "nir")
        f_v, f_n = joint_attention(tokens_v, tokens_n, self.self_attention, self.cross_attention)
        H, W = vis.shape[-2:]
        return self.decoder(
            tokens_to_map(f_v, H, W, self.window_size),
            tokens_to_map(f_n, H, W, self.window_size),
            shallow_v,
            shallow_n,
        )


# ==============================================================================
# Loss
# ==============================================================================

def _prepare(output: torch.Tensor, vis: torch.Tensor, nir: torch.Tensor,
             luminance: bool) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    check_same_size(output, vis, nir)
    if luminance:
        return to_luminance(output), to_luminance(vis), to_luminance(nir)
    return output, vis, to_three_channels(nir)


def ssim_loss(output: torch.Tensor, vis: torch.Tensor, nir: torch.Tensor, luminance: bool = False,
              window_size: int = SSIM_WINDOW) -> torch.Tensor:
    """[1 - ssim(O, I_V)] + [1 - ssim(O, I_N)], trung bình theo batch. NIR được lặp thành 3 kênh."""
    output, vis, nir = _prepare(output, vis, nir, luminance)
    return (2.0 - ssim(output, vis, window_size) - ssim(output, nir, window_size)).mean()


def texture_loss(output: torch.Tensor, vis: torch.Tensor, nir: torch.Tensor,
                 luminance: bool = False) -> torch.Tensor:
    """(1/HW) || |∇O| - max(|∇I_V|, |∇I_N|) ||_1, trung bình theo kênh và batch."""
    output, vis, nir = _prepare(output, vis, nir, luminance)
    target = torch.maximum(gradient_magnitude(vis), gradient_magnitude(nir))
    return (gradient_magnitude(output) - target).abs().mean()


def intensity_loss(output: torch.Tensor, vis: torch.Tensor, nir: torch.Tensor,
                   luminance: bool = False) -> torch.Tensor:
    """(1/HW) || O - max(I_V, I_N) ||_1."""
    output, vis, nir = _prepare(output, vis, nir, luminance)
    return (output - torch.maximum(vis, nir)).abs().mean()


FUSION_COMPONENTS = ("ssim", "texture", "intensity")


def fusion_loss_components(output: torch.Tensor, vis: torch.Tensor, nir: torch.Tensor,
                           luminance: bool = False, window_size: int = SSIM_WINDOW) -> Dict[str, torch.Tensor]:
    return {
        "ssim": ssim_loss(output, vis, nir, luminance, window_size),
        "texture": texture_loss(output, vis, nir, luminance),
        "intensity": intensity_loss(output, vis, nir, luminance),
    }


def fusion_loss(output: torch.Tensor, vis: torch.Tensor, nir: torch.Tensor,
                weights: Optional[Sequence[float]] = None, luminance: bool = False,
                window_size: int = SSIM_WINDOW) -> torch.Tensor:
    """SSIM + texture + intensity. Mặc định không trọng số; weights=(w_ssim, w_text, w_int) nếu cần."""
    weights = tuple(weights) if weights is not None else (1.0, 1.0, 1.0)
    if len(weights) != 3 or any(w < 0 for w in weights):
        raise ValidationError(f"Trọng số fusion loss không hợp lệ: {weights}")
    components = fusion_loss_components(output, vis, nir, luminance, window_size)
    return sum(w * components[name] for w, name in zip(weights, FUSION_COMPONENTS))
