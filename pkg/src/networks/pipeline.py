# src/networks/pipeline.py

"""
Ghép hai luồng: luồng ngữ nghĩa (alignment -> G_SR -> O_SR) và luồng thị giác (fusion -> O_VF),
G^Final trộn O_SR và O_VF thành O_Final. Tổng loss là tổ hợp tuyến tính của năm thành phần.
"""
import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.data_model import Image, ScenePair, SemanticMask, batch_pairs, tensor_to_image
from ..core.exceptions import ConfigError, NumericalError, ShapeError
from .alignment import AlignmentModule
from .fusion import VisualFusionModule
from .image_ops import check_same_size
from .reconstruction import DiscriminatorBank, ReconstructionGenerator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Trọng số của tổng loss. Mặc định (1, 0.1, 0.01, 1, 0.1)."""
    lambda_align: float = 1.0
    alpha_recon: float = 0.1
    beta_fusion: float = 0.01
    alpha1_final: float = 1.0
    beta1_final: float = 0.1

    def __post_init__(self):
        negative = {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) < 0}
        if negative:
            raise ConfigError(f"Trọng số loss không được âm: {negative}")

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


# Thành phần của LossReport -> trường trọng số tương ứng
LOSS_TERMS = {
    "align": "lambda_align",
    "region_adv": "alpha_recon",
    "fusion": "beta_fusion",
    "final_region_adv": "alpha1_final",
    "final_fusion": "beta1_final",
}

Scalar = Union[float, torch.Tensor]


@dataclass
class LossReport:
    """Năm thành phần không trọng số của tổng loss."""
    align: Scalar = 0.0
    region_adv: Scalar = 0.0
    fusion: Scalar = 0.0
    final_region_adv: Scalar = 0.0
    final_fusion: Scalar = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in LOSS_TERMS}


def total_loss(report: LossReport, weights: LossWeights) -> torch.Tensor:
    """λ L_align + α L_region_adv + β L_fusion + α1 L_final_region_adv + β1 L_final_fusion."""
    values = [getattr(report, name) for name in LOSS_TERMS]
    reference = next((v for v in values if torch.is_tensor(v)), None)
    dtype = reference.dtype if reference is not None else torch.float64
    device = reference.device if reference is not None else None
    total = None
    for (name, weight_name), value in zip(LOSS_TERMS.items(), values):
        if not torch.is_tensor(value):
            value = torch.tensor(float(value), dtype=dtype, device=device)
        if not bool(torch.isfinite(value).all()):
            raise NumericalError(f"Thành phần loss '{name}' không hữu hạn: {value}")
        term = getattr(weights, weight_name) * value
        total = term if total is None else total + term
    return total


class FinalGenerator(nn.Module):
    """
    G^Final: O_Final = clamp((O_SR + O_VF) / 2 + residual(O_SR, O_VF), 0, 1).
    Conv cuối của nhánh residual khởi tạo bằng 0 nên lúc đầu O_Final đúng bằng trung bình hai luồng.
    """

    def __init__(self, channels: int = 32, num_blocks: int = 3):
        super().__init__()
        self.head = nn.Conv2d(6, channels, 3, 1, 1)
        self.blocks = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(channels, channels, 3, 1, 1),
                nn.ReLU(inplace=True),
                nn.Conv2d(channels, channels, 3, 1, 1),
            )
            for _ in range(num_blocks)
        ])
        self.tail = nn.Conv2d(channels, 3, 3, 1, 1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, o_sr: torch.Tensor, o_vf: torch.Tensor) -> torch.Tensor:
        if o_sr.shape != o_vf.shape:
            raise ShapeError(f"O_SR {tuple(o_sr.shape)} và O_VF {tuple(o_vf.shape)} khác shape")
        x = F.relu(self.head(torch.cat([o_sr, o_vf], dim=1)))
        for block in self.blocks:
            x = x + block(x)
        return torch.clamp(0.5 * (o_sr + o_vf) + self.tail(x), 0.0, 1.0)


class HSVFNetwork(nn.Module):
    """Toàn bộ tham số huấn luyện được, kể cả hai discriminator bank (luồng ngữ nghĩa và output cuối)."""

    def __init__(self, align_modalities: str = "both", content_align: bool = True, recon: bool = True,
                 discriminator: str = "region", semantic_conditioning: bool = True,
                 self_attention: bool = True, cross_attention: bool = True):
        super().__init__()
        self.alignment = AlignmentModule(align_modalities, content_align, recon)
        self.generator = ReconstructionGenerator(semantic_conditioning=semantic_conditioning)
        self.fusion = VisualFusionModule(self_attention=self_attention, cross_attention=cross_attention)
        self.final = FinalGenerator()
        self.disc_recon = DiscriminatorBank(mode=discriminator)
        self.disc_final = DiscriminatorBank(mode=discriminator)

    def semantic_inputs(self, vis: torch.Tensor, nir: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Xác suất segmentation (trung bình các nhánh) và content của nhánh visible làm điều kiện cho G_SR."""
        seg_probs = self.alignment.predict_segmentation(vis, nir)
        return {"seg_probs": seg_probs, "content": self.alignment.encode_content(vis, "vis")}

    def forward(self, vis: torch.Tensor, nir: torch.Tensor) -> Dict[str, torch.Tensor]:
        check_same_size(vis, nir)
        semantic = self.semantic_inputs(vis, nir)
        o_sr = self.generator(semantic["seg_probs"], semantic["content"])
        o_vf = self.fusion(vis, nir)
        o_final = self.final(o_sr, o_vf)
        return {
            "seg_probs": semantic["seg_probs"],
            "seg_labels": semantic["seg_probs"].argmax(dim=1),
            "o_sr": o_sr,
            "o_vf": o_vf,
            "o_final": o_final,
        }


NETWORK_FLAGS = ("align_modalities", "content_align", "recon", "discriminator", "semantic_conditioning",
                 "self_attention", "cross_attention")


def build_network(flags: Optional[Dict[str, object]] = None, seed: Optional[int] = None,
                  dtype: torch.dtype = torch.float32) -> HSVFNetwork:
    """Khởi tạo HSVFNetwork từ các cờ ablation; seed cố định khởi tạo tham số."""
    flags = dict(flags or {})
    unknown = set(flags) - set(NETWORK_FLAGS)
    if unknown:
        raise ConfigError(f"Cờ network không hợp lệ: {sorted(unknown)}")
    if seed is not None:
        torch.manual_seed(seed)
    network = HSVFNetwork(**flags).to(dtype)
    n_params = sum(p.numel() for p in network.parameters())
    logger.debug(f"Khởi tạo HSVFNetwork ({n_params} tham số), cờ: {flags}")
    return network


@dataclass
class InferenceResult:
    final: Image
    sr: Image
    vf: Image
    segmentation: SemanticMask

    def as_dict(self) -> Dict[str, object]:
        return {"O_Final": self.final, "O_SR": self.sr, "O_VF": self.vf, "S_pred": self.segmentation}


@torch.no_grad()
def infer(network: HSVFNetwork, pair: ScenePair, device: Optional[torch.device] = None) -> InferenceResult:
    """Chạy toàn bộ pipeline cho một cặp haze ở eval mode; tất định."""
    was_training = network.training
    network.eval()
    try:
        param = next(network.parameters())
        batch = batch_pairs([pair], dtype=param.dtype, device=device or param.device)
        outputs = network(batch["vis"], batch["nir"])
    finally:
        network.train(was_training)
    labels = outputs["seg_labels"][0].cpu().numpy().astype(np.int64)
    return InferenceResult(
        final=tensor_to_image(outputs["o_final"]),
        sr=tensor_to_image(outputs["o_sr"]),
        vf=tensor_to_image(outputs["o_vf"]),
        segmentation=SemanticMask(labels),
    )
