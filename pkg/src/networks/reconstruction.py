# src/networks/reconstruction.py

"""
Cross-domain semantic reconstruction: generator G_SR có điều kiện ngữ nghĩa (SPADE) sinh O_SR từ ảnh haze,
huấn luyện đối kháng với ảnh clear bằng một bank discriminator, mỗi head phụ trách một class.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.data_model import IGNORE_LABEL, NUM_CLASSES, SemanticMask, as_labels
from ..core.exceptions import DataError, ShapeError, ValidationError
from .alignment import CONTENT_CHANNELS, CONTENT_STRIDE, PROB_CLAMP

logger = logging.getLogger(__name__)

SCORE_STRIDE = 4
DISCRIMINATOR_MODES = ("region", "image")


# ==============================================================================
# Region masks
# ==============================================================================

@dataclass(frozen=True)
class RegionMaskSet:
    """Sáu mask nhị phân M_0..M_5 (6, H, W): M_n(x) = 1 khi nhãn tại x là n."""
    masks: np.ndarray

    def validate(self):
        if self.masks.shape[0] != NUM_CLASSES:
            raise ValidationError(f"RegionMaskSet cần {NUM_CLASSES} mask, nhận được {self.masks.shape[0]}")
        if not np.isin(self.masks, (0, 1)).all():
            raise ValidationError("RegionMaskSet chứa giá trị ngoài {0, 1}")
        if self.masks.sum(axis=0).max() > 1:
            raise ValidationError("Các mask vùng chồng lấn nhau")

    def coverage(self) -> np.ndarray:
        return self.masks.reshape(NUM_CLASSES, -1).sum(axis=1)


def region_masks(mask: Union[SemanticMask, np.ndarray]) -> RegionMaskSet:
    """Tách mask nhãn thành sáu mask nhị phân; pixel ignore bằng 0 ở mọi mask."""
    labels = as_labels(mask)
    masks = np.stack([(labels == n) for n in range(NUM_CLASSES)]).astype(np.uint8)
    return RegionMaskSet(masks)


def region_mask_tensor(labels: torch.Tensor) -> torch.Tensor:
    """(B, H, W) nhãn -> (B, 6, H, W) float, pixel ignore là 0 ở mọi kênh."""
    classes = torch.arange(NUM_CLASSES, device=labels.device).view(1, -1, 1, 1)
    return (labels.unsqueeze(1) == classes).float()


def downsample_labels(labels: torch.Tensor, stride: int = SCORE_STRIDE) -> torch.Tensor:
    """
    Hạ độ phân giải mask nhãn bằng bỏ phiếu đa số trong từng ô stride x stride.
    Ignore được tính như một category riêng; hòa phiếu chọn index nhỏ hơn.
    """
    height, width = labels.shape[-2:]
    if height % stride or width % stride:
        raise ShapeError(f"Mask {height}x{width} không chia hết cho stride {stride}")
    categories = torch.where(labels == IGNORE_LABEL, torch.full_like(labels, NUM_CLASSES), labels)
    one_hot = F.one_hot(categories.long(), NUM_CLASSES + 1).permute(0, 3, 1, 2).float()
    votes = F.avg_pool2d(one_hot, kernel_size=stride, stride=stride)
    winner = votes.argmax(dim=1)
    return torch.where(winner == NUM_CLASSES, torch.full_like(winner, IGNORE_LABEL), winner)


# ==============================================================================
# Generator
# ==============================================================================

class SPADE(nn.Module):
    """
    Chuẩn hóa không tham số rồi điều biến theo không gian bằng gamma/beta sinh từ bản đồ ngữ nghĩa.
    """

    def __init__(self, norm_nc: int, label_nc: int = NUM_CLASSES, nhidden: int = 64):
        super().__init__()
        self.param_free_norm = nn.InstanceNorm2d(norm_nc, affine=False)
        self.mlp_shared = nn.Sequential(
            nn.Conv2d(label_nc, nhidden, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.mlp_gamma = nn.Conv2d(nhidden, norm_nc, kernel_size=3, padding=1)
        self.mlp_beta = nn.Conv2d(nhidden, norm_nc, kernel_size=3, padding=1)

    def forward(self, x, segmap):
        normalized = self.param_free_norm(x)
        segmap = F.interpolate(segmap, size=x.size()[2:], mode='nearest')
        actv = self.mlp_shared(segmap)
        return normalized * (1 + self.mlp_gamma(actv)) + self.mlp_beta(actv)


class SPADEResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        mid = min(in_ch, out_ch)
        self.norm_0 = SPADE(in_ch)
        self.conv_0 = nn.Conv2d(in_ch, mid, 3, 1, 1)
        self.norm_1 = SPADE(mid)
        self.conv_1 = nn.Conv2d(mid, out_ch, 3, 1, 1)
        self.shortcut = None
        if in_ch != out_ch:
            self.norm_s = SPADE(in_ch)
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x, segmap):
        skip = x if self.shortcut is None else self.shortcut(self.norm_s(x, segmap))
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, segmap), 0.2))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, segmap), 0.2))
        return skip + dx


class ReconstructionGenerator(nn.Module):
    """
    G_SR: bottleneck là content feature của ảnh haze (H/4), các block SPADE điều kiện theo
    xác suất segmentation dự đoán, upsample về độ phân giải gốc, output sigmoid 3 kênh.

    semantic_conditioning=False thay bản đồ ngữ nghĩa bằng 0 (SPADE suy biến thành affine cố định).
    """

    def __init__(self, content_channels: int = CONTENT_CHANNELS, semantic_conditioning: bool = True):
        super().__init__()
        self.semantic_conditioning = semantic_conditioning
        self.content_channels = content_channels
        self.head = nn.Conv2d(content_channels, 64, 3, 1, 1)
        self.block_0 = SPADEResBlock(64, 64)
        self.block_1 = SPADEResBlock(64, 32)
        self.block_2 = SPADEResBlock(32, 16)
        self.out_conv = nn.Conv2d(16, 3, 3, 1, 1)

    def forward(self, seg_probs: torch.Tensor, content: torch.Tensor) -> torch.Tensor:
        if content.shape[1] != self.content_channels:
            raise ShapeError(f"G_SR cần content {self.content_channels} kênh, nhận được {content.shape[1]}")
        expected = (content.shape[-2] * CONTENT_STRIDE, content.shape[-1] * CONTENT_STRIDE)
        if tuple(seg_probs.shape[-2:]) != expected or seg_probs.shape[1] != NUM_CLASSES:
            raise ShapeError(
                f"Segmentation {tuple(seg_probs.shape)} không khớp content {tuple(content.shape)} "
                f"(cần {NUM_CLASSES} kênh, {expected[0]}x{expected[1]})"
            )
        segmap = seg_probs if self.semantic_conditioning else torch.zeros_like(seg_probs)
        x = self.head(content)
        x = self.block_0(x, segmap)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block_1(x, segmap)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block_2(x, segmap)
        return torch.sigmoid(self.out_conv(F.leaky_relu(x, 0.2)))


# ==============================================================================
# Discriminator bank
# ==============================================================================

class DiscriminatorBank(nn.Module):
    """
    Trunk PatchGAN dùng chung + một head 1x1 cho mỗi class (mode 'region'),
    hoặc một head duy nhất cho toàn ảnh (mode 'image'). Score map stride 4, giá trị trong (0, 1).
    """

    def __init__(self, mode: str = "region", in_channels: int = 3, num_filters: int = 32):
        super().__init__()
        if mode not in DISCRIMINATOR_MODES:
            raise ValidationError(f"Discriminator mode phải thuộc {DISCRIMINATOR_MODES}, nhận được '{mode}'")
        self.mode = mode
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, num_filters, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(num_filters, num_filters * 2, 4, 2, 1, bias=False),
            nn.InstanceNorm2d(num_filters * 2, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(num_filters * 2, num_filters * 2, 3, 1, 1),
            nn.LeakyReLU(0.2),
        )
        self.heads = nn.Conv2d(num_filters * 2, self.num_heads, 1)

    @property
    def num_heads(self) -> int:
        return NUM_CLASSES if self.mode == "region" else 1

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        height, width = image.shape[-2:]
        if height % SCORE_STRIDE or width % SCORE_STRIDE:
            raise ShapeError(f"Ảnh {height}x{width} không chia hết cho stride {SCORE_STRIDE}")
        return torch.sigmoid(self.heads(self.trunk(image)))

    def score_masks(self, labels: torch.Tensor) -> torch.Tensor:
        """Mask ở độ phân giải score: (B, 6, h, w) cho mode region, (B, 1, h, w) cho mode image."""
        coarse = downsample_labels(labels)
        if self.mode == "region":
            return region_mask_tensor(coarse)
        return (coarse != IGNORE_LABEL).float().unsqueeze(1)


@contextmanager
def frozen(module: nn.Module) -> Iterator[nn.Module]:
    """Tạm tắt requires_grad của module; khôi phục trạng thái cũ khi thoát."""
    states = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in states:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, state in states:
            p.requires_grad_(state)


def masked_expectation(values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """
    Trung bình theo pixel trong từng mask, rồi theo các mask có diện tích > 0 của mỗi ảnh,
    rồi theo các ảnh có ít nhất một mask khác rỗng.
    """
    coverage = masks.sum(dim=(2, 3))
    covered = coverage > 0
    if not bool(covered.any()):
        raise DataError("Không class nào có diện tích > 0, không tính được region loss")
    per_class = (values * masks).sum(dim=(2, 3)) / coverage.clamp_min(1.0)
    per_image_count = covered.sum(dim=1)
    per_image = (per_class * covered).sum(dim=1) / per_image_count.clamp_min(1)
    images = per_image_count > 0
    return per_image[images].mean()


def discriminator_loss(bank: DiscriminatorBank, real: torch.Tensor, real_labels: torch.Tensor,
                       fake: torch.Tensor, fake_labels: torch.Tensor) -> torch.Tensor:
    """
    -E[Σ M_n log D_n(real)] - E[Σ M_n log(1 - D_n(fake))]; fake được detach.

    Args:
        real: ảnh clear I_C; real_labels: S_C (B, H, W).
        fake: O_SR; fake_labels: S_pred (B, H, W).
    """
    d_real = bank(real)
    d_fake = bank(fake.detach())
    real_term = masked_expectation(-torch.log(d_real.clamp_min(PROB_CLAMP)), bank.score_masks(real_labels))
    fake_term = masked_expectation(-torch.log((1.0 - d_fake).clamp_min(PROB_CLAMP)),
                                   bank.score_masks(fake_labels))
    return real_term + fake_term


def generator_region_loss(bank: DiscriminatorBank, fake: torch.Tensor, fake_labels: torch.Tensor) -> torch.Tensor:
    """Dạng non-saturating -E[Σ M_n log D_n(fake)]; bank bị đóng băng, gradient chỉ chảy về generator."""
    with frozen(bank):
        d_fake = bank(fake)
        return masked_expectation(-torch.log(d_fake.clamp_min(PROB_CLAMP)), bank.score_masks(fake_labels))
