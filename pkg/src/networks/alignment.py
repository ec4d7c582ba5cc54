# src/networks/alignment.py

"""
Intrinsic semantic alignment: tách mỗi modality thành style code riêng và content feature chung,
dự đoán segmentation từ content bằng decoder dùng chung, và tái tạo chéo modality.

Loss:
    content_alignment_loss   mean |c_v - c_n|
    segmentation_loss        cross-entropy trên cả hai nhánh (bỏ qua nhãn 255)
    reconstruction_losses    mean |D_V(s_V, c_N) - I_V|, mean |D_N(s_N, c_V) - I_N|
    alignment_total_loss     tổng không trọng số của bốn thành phần
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.data_model import IGNORE_LABEL, NUM_CLASSES, SemanticMask, mask_to_tensor
from ..core.exceptions import DataError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

CONTENT_CHANNELS = 32
STYLE_DIM = 64
CONTENT_STRIDE = 4
PROB_CLAMP = 1e-8

MODALITY_CHANNELS = {"vis": 3, "nir": 1}


@dataclass
class FeatureBundle:
    """Content map (B, C_c, H/4, W/4) và style vector (B, C_s) của một modality."""
    content: torch.Tensor
    style: torch.Tensor
    modality: str

    def validate(self):
        if self.modality not in MODALITY_CHANNELS:
            raise ValidationError(f"Modality không hợp lệ: {self.modality}")
        if not (torch.isfinite(self.content).all() and torch.isfinite(self.style).all()):
            raise ValidationError(f"FeatureBundle {self.modality} chứa NaN/Inf")


def _check_modality(modality: str) -> int:
    if modality not in MODALITY_CHANNELS:
        raise ValidationError(f"Modality phải là 'vis' hoặc 'nir', nhận được '{modality}'")
    return MODALITY_CHANNELS[modality]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


def conv_in_relu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride, 1),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


class ContentEncoder(nn.Module):
    """
    Encoder đa độ phân giải thu nhỏ: nhánh độ phân giải cao (H/4) được giữ suốt các stage,
    nhánh thấp (H/8) trao đổi thông tin với nó sau mỗi stage.
    """

    def __init__(self, in_channels: int, out_channels: int = CONTENT_CHANNELS):
        super().__init__()
        self.stem = nn.Sequential(
            conv_in_relu(in_channels, 16),
            conv_in_relu(16, 32, stride=2),
            conv_in_relu(32, 32, stride=2),
        )
        self.down = conv_in_relu(32, 64, stride=2)
        self.high_blocks = nn.ModuleList([ResidualBlock(32), ResidualBlock(32)])
        self.low_blocks = nn.ModuleList([ResidualBlock(64), ResidualBlock(64)])
        self.low_to_high = nn.ModuleList([nn.Conv2d(64, 32, 1), nn.Conv2d(64, 32, 1)])
        self.high_to_low = nn.Conv2d(32, 64, 3, 2, 1)
        self.head = nn.Conv2d(32, out_channels, 1)

    def forward(self, x):
        height, width = x.shape[-2:]
        if height % CONTENT_STRIDE or width % CONTENT_STRIDE:
            raise ShapeError(f"Kích thước {height}x{width} không chia hết cho {CONTENT_STRIDE}")
        high = self.stem(x)
        low = self.down(high)
        for stage in range(2):
            high = self.high_blocks[stage](high)
            low = self.low_blocks[stage](low)
            up = F.interpolate(self.low_to_high[stage](low), size=high.shape[-2:], mode="bilinear",
                               align_corners=False)
            if stage == 0:
                down = self.high_to_low(high)
                if down.shape[-2:] != low.shape[-2:]:
                    down = F.interpolate(down, size=low.shape[-2:], mode="bilinear", align_corners=False)
                low = low + down
            high = high + up
        return self.head(high)


class StyleEncoder(nn.Module):
    """4 conv stride 2, global average pooling, linear -> vector style_dim chiều."""

    def __init__(self, in_channels: int, style_dim: int = STYLE_DIM):
        super().__init__()
        layers = [nn.Conv2d(in_channels, 16, 7, 1, 3), nn.ReLU(inplace=True)]
        channels = 16
        for out_ch in (32, 64, 64, 64):
            layers += [nn.Conv2d(channels, out_ch, 4, 2, 1), nn.ReLU(inplace=True)]
            channels = out_ch
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(channels, style_dim)

    def forward(self, x):
        pooled = self.features(x).mean(dim=(2, 3))
        return self.fc(pooled)


class SegmentationDecoder(nn.Module):
    """D^S dùng chung cho cả hai modality: content (H/4) -> logits 6 lớp ở độ phân giải đầu vào."""

    def __init__(self, content_channels: int = CONTENT_CHANNELS, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.content_channels = content_channels
        self.body = nn.Sequential(
            conv_in_relu(content_channels, 32),
            nn.Conv2d(32, 32, 3, 1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, num_classes, 1),
        )

    def forward(self, content, out_size: Optional[Tuple[int, int]] = None):
        if content.shape[1] != self.content_channels:
            raise ShapeError(f"Content có {content.shape[1]} kênh, D^S cần {self.content_channels}")
        logits = self.body(content)
        if out_size is None:
            out_size = (content.shape[-2] * CONTENT_STRIDE, content.shape[-1] * CONTENT_STRIDE)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


class AdaptiveInstanceNorm(nn.Module):
    """Instance norm không tham số, scale/bias sinh từ style vector."""

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.param_free_norm = nn.InstanceNorm2d(channels, affine=False)
        self.mlp = nn.Linear(style_dim, 2 * channels)

    def forward(self, x, style):
        gamma, beta = self.mlp(style).chunk(2, dim=1)
        normalized = self.param_free_norm(x)
        return normalized * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


class ImageDecoder(nn.Module):
    """D^I: content + style của modality đích -> ảnh [0,1] ở độ phân giải đầu vào."""

    def __init__(self, out_channels: int, content_channels: int = CONTENT_CHANNELS, style_dim: int = STYLE_DIM):
        super().__init__()
        self.content_channels = content_channels
        self.style_dim = style_dim
        self.res_conv = nn.ModuleList([nn.Conv2d(content_channels, content_channels, 3, 1, 1) for _ in range(2)])
        self.res_norm = nn.ModuleList([AdaptiveInstanceNorm(content_channels, style_dim) for _ in range(2)])
        self.up_conv1 = nn.Conv2d(content_channels, 32, 3, 1, 1)
        self.up_norm1 = AdaptiveInstanceNorm(32, style_dim)
        self.up_conv2 = nn.Conv2d(32, 16, 3, 1, 1)
        self.up_norm2 = AdaptiveInstanceNorm(16, style_dim)
        self.out_conv = nn.Conv2d(16, out_channels, 3, 1, 1)

    def forward(self, style, content):
        if content.shape[1] != self.content_channels or style.shape[-1] != self.style_dim:
            raise ShapeError(
                f"D^I cần content {self.content_channels} kênh và style {self.style_dim} chiều, "
                f"nhận được {content.shape[1]} và {style.shape[-1]}"
            )
        x = content
        for conv, norm in zip(self.res_conv, self.res_norm):
            x = x + F.relu(norm(conv(x), style))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.relu(self.up_norm1(self.up_conv1(x), style))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.relu(self.up_norm2(self.up_conv2(x), style))
        return torch.sigmoid(self.out_conv(x))


# ==============================================================================
# Loss
# ==============================================================================

def content_alignment_loss(c_v: torch.Tensor, c_n: torch.Tensor) -> torch.Tensor:
    """Mean L1 giữa content hai modality."""
    if c_v.shape != c_n.shape:
        raise ShapeError(f"Content không cùng shape: {tuple(c_v.shape)} vs {tuple(c_n.shape)}")
    return (c_v - c_n).abs().mean()


def _gt_tensor(gt: Union[SemanticMask, torch.Tensor], device) -> torch.Tensor:
    if isinstance(gt, SemanticMask):
        gt = mask_to_tensor(gt).unsqueeze(0)
    gt = gt.to(device=device, dtype=torch.long)
    return gt.unsqueeze(0) if gt.dim() == 2 else gt


def branch_cross_entropy(logits: torch.Tensor, gt: Union[SemanticMask, torch.Tensor]) -> torch.Tensor:
    """Trung bình -log p(lớp đúng) trên các pixel không bị ignore của một nhánh."""
    gt = _gt_tensor(gt, logits.device)
    if logits.shape[0] != gt.shape[0] or logits.shape[-2:] != gt.shape[-2:]:
        raise ShapeError(f"Logits {tuple(logits.shape)} không khớp ground truth {tuple(gt.shape)}")
    valid = gt != IGNORE_LABEL
    if not bool(valid.any()):
        raise DataError("Tất cả pixel đều mang nhãn ignore, không tính được segmentation loss")
    target = torch.where(valid, gt, torch.zeros_like(gt))
    prob = F.softmax(logits, dim=1)
    p_true = prob.gather(1, target.unsqueeze(1)).squeeze(1)
    nll = -torch.log(p_true.clamp_min(PROB_CLAMP))
    return nll[valid].mean()


def segmentation_loss(logits_v: torch.Tensor, logits_n: torch.Tensor,
                      gt: Union[SemanticMask, torch.Tensor]) -> torch.Tensor:
    """Cross-entropy của nhánh visible cộng nhánh NIR, cùng một ground truth."""
    return branch_cross_entropy(logits_v, gt) + branch_cross_entropy(logits_n, gt)


DecodeFn = Callable[[torch.Tensor, torch.Tensor, str], torch.Tensor]


def reconstruction_losses(vis: torch.Tensor, nir: torch.Tensor,
                          bundles: Tuple[FeatureBundle, FeatureBundle],
                          decode_image: DecodeFn) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Tái tạo chéo: style của modality đích + content của modality kia.

    Args:
        vis, nir: ảnh gốc (B,3,H,W) và (B,1,H,W).
        bundles: (bundle_vis, bundle_nir) tính từ chính cặp ảnh này.
        decode_image: hàm (style, content, target_modality) -> ảnh.

    Returns:
        (loss_vis, loss_nir)
    """
    bundle_v, bundle_n = bundles
    rec_v = decode_image(bundle_v.style, bundle_n.content, "vis")
    rec_n = decode_image(bundle_n.style, bundle_v.content, "nir")
    if rec_v.shape != vis.shape or rec_n.shape != nir.shape:
        raise ShapeError(
            f"Ảnh tái tạo {tuple(rec_v.shape)}/{tuple(rec_n.shape)} khác ảnh gốc "
            f"{tuple(vis.shape)}/{tuple(nir.shape)}"
        )
    return (rec_v - vis).abs().mean(), (rec_n - nir).abs().mean()


ALIGNMENT_COMPONENTS = ("content", "segmentation", "recon_vis", "recon_nir")


def alignment_total_loss(components: Union[Mapping[str, torch.Tensor], Sequence]) -> torch.Tensor:
    """Tổng không trọng số của bốn thành phần alignment."""
    if isinstance(components, Mapping):
        values = [components[name] for name in ALIGNMENT_COMPONENTS]
    else:
        values = list(components)
        if len(values) != len(ALIGNMENT_COMPONENTS):
            raise ValidationError(f"Cần {len(ALIGNMENT_COMPONENTS)} thành phần, nhận được {len(values)}")
    total = values[0]
    for value in values[1:]:
        total = total + value
    return total if torch.is_tensor(total) else torch.tensor(float(total))


# ==============================================================================
# Module tổng hợp
# ==============================================================================

class AlignmentModule(nn.Module):
    """
    Hai content encoder, hai style encoder, D^S dùng chung và hai image decoder.

    Args:
        modalities: 'both', 'vis' hoặc 'nir' (nhánh nào được huấn luyện segmentation).
        content_align: bật loss căn chỉnh content.
        recon: bật loss tái tạo chéo.
    """

    def __init__(self, modalities: str = "both", content_align: bool = True, recon: bool = True):
        super().__init__()
        if modalities not in ("both", "vis", "nir"):
            raise ValidationError(f"modalities không hợp lệ: {modalities}")
        self.modalities = modalities
        self.content_align = content_align and modalities == "both"
        self.recon = recon and modalities == "both"
        self.content_encoders = nn.ModuleDict({m: ContentEncoder(c) for m, c in MODALITY_CHANNELS.items()})
        self.style_encoders = nn.ModuleDict({m: StyleEncoder(c) for m, c in MODALITY_CHANNELS.items()})
        self.seg_decoder = SegmentationDecoder()
        self.image_decoders = nn.ModuleDict({m: ImageDecoder(c) for m, c in MODALITY_CHANNELS.items()})

    def encode_content(self, image: torch.Tensor, modality: str) -> torch.Tensor:
        channels = _check_modality(modality)
        if image.shape[1] != channels:
            raise ShapeError(f"Ảnh {modality} phải có {channels} kênh, nhận được {image.shape[1]}")
        return self.content_encoders[modality](image)

    def encode_style(self, image: torch.Tensor, modality: str) -> torch.Tensor:
        channels = _check_modality(modality)
        if image.shape[1] != channels:
            raise ShapeError(f"Ảnh {modality} phải có {channels} kênh, nhận được {image.shape[1]}")
        return self.style_encoders[modality](image)

    def encode(self, image: torch.Tensor, modality: str) -> FeatureBundle:
        return FeatureBundle(
            content=self.encode_content(image, modality),
            style=self.encode_style(image, modality),
            modality=modality,
        )

    def decode_segmentation(self, content: torch.Tensor, out_size: Optional[Tuple[int, int]] = None):
        return self.seg_decoder(content, out_size)

    def decode_image(self, style: torch.Tensor, content: torch.Tensor, target_modality: str) -> torch.Tensor:
        _check_modality(target_modality)
        return self.image_decoders[target_modality](style, content)

    def predict_segmentation(self, vis: torch.Tensor, nir: torch.Tensor,
                             modalities: Optional[str] = None) -> torch.Tensor:
        """
        Xác suất lớp (B, 6, H, W). Với 'both' là trung bình xác suất của hai nhánh.
        """
        modalities = modalities or self.modalities
        size = vis.shape[-2:]
        probs = []
        if modalities in ("both", "vis"):
            probs.append(F.softmax(self.decode_segmentation(self.encode_content(vis, "vis"), size), dim=1))
        if modalities in ("both", "nir"):
            probs.append(F.softmax(self.decode_segmentation(self.encode_content(nir, "nir"), size), dim=1))
        return torch.stack(probs, dim=0).mean(dim=0)

    def compute_losses(self, vis: torch.Tensor, nir: torch.Tensor,
                       gt: torch.Tensor) -> Dict[str, torch.Tensor]:
        """
        Tính bốn thành phần alignment và tổng. Thành phần bị tắt được log bằng 0
        và không đóng góp gradient.
        """
        size = vis.shape[-2:]
        zero = vis.new_zeros(())
        components: Dict[str, torch.Tensor] = {name: zero for name in ALIGNMENT_COMPONENTS}

        if self.modalities == "vis":
            content = self.encode_content(vis, "vis")
            components["segmentation"] = branch_cross_entropy(self.decode_segmentation(content, size), gt)
        elif self.modalities == "nir":
            content = self.encode_content(nir, "nir")
            components["segmentation"] = branch_cross_entropy(self.decode_segmentation(content, size), gt)
        else:
            bundle_v = self.encode(vis, "vis")
            bundle_n = self.encode(nir, "nir")
            components["segmentation"] = segmentation_loss(
                self.decode_segmentation(bundle_v.content, size),
                self.decode_segmentation(bundle_n.content, size),
                gt,
            )
            if self.content_align:
                components["content"] = content_alignment_loss(bundle_v.content, bundle_n.content)
            if self.recon:
                components["recon_vis"], components["recon_nir"] = reconstruction_losses(
                    vis, nir, (bundle_v, bundle_n), self.decode_image
                )
        components["total"] = alignment_total_loss(components)
        return components
