# src/core/data_model.py

"""
Domain types của MiniVNHD: Image, SemanticMask, HazeParams, ScenePair.
Ảnh được lưu dạng numpy HWC, giá trị thực trong [0, 1]. Network dùng tensor BCHW,
chuyển đổi qua image_to_tensor / tensor_to_image.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .exceptions import ShapeError, ValidationError

logger = logging.getLogger(__name__)

CLASS_NAMES: Tuple[str, ...] = ("sky", "ground", "buildings", "vegetation", "water", "vehicles")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_LABEL = 255
MIN_SIDE = 16
# Sai số cho phép khi kiểm tra [0, 1] với kết quả blend dấu phẩy động
VALUE_TOLERANCE = 1e-9

CONDITIONS = ("clear", "haze")
MODALITIES = ("vis", "nir")
PROVENANCES = ("synthetic", "external")

SKY, GROUND, BUILDINGS, VEGETATION, WATER, VEHICLES = range(NUM_CLASSES)


@dataclass(frozen=True)
class Image:
    """
    Ảnh H x W x C với C thuộc {1, 3}, giá trị trong [0, 1].
    Vai trò (I_V, I_N, O_SR, ...) được phân biệt bởi nơi tạo ra nó, không phải bởi type.
    """
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        object.__setattr__(self, "pixels", pixels)
        self.validate()

    def validate(self):
        if self.pixels.ndim != 3:
            raise ValidationError(f"Image phải có 3 chiều HWC, nhận được {self.pixels.ndim}")
        h, w, c = self.pixels.shape
        if c not in (1, 3):
            raise ValidationError(f"Số kênh phải là 1 hoặc 3, nhận được {c}")
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValidationError(f"Image quá nhỏ: {h}x{w} (tối thiểu {MIN_SIDE}x{MIN_SIDE})")
        if not np.all(np.isfinite(self.pixels)):
            raise ValidationError("Image chứa giá trị NaN/Inf")
        if self.pixels.min() < -VALUE_TOLERANCE or self.pixels.max() > 1.0 + VALUE_TOLERANCE:
            raise ValidationError(
                f"Giá trị pixel ngoài [0,1]: min={self.pixels.min():.6g}, max={self.pixels.max():.6g}"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def size(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class SemanticMask:
    """Nhãn per-pixel trong {0..5} cộng với IGNORE_LABEL = 255."""
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValidationError(f"SemanticMask phải là mảng 2 chiều, nhận được {labels.ndim}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValidationError("SemanticMask chứa nhãn không nguyên")
        labels = labels.astype(np.int64)
        invalid = (labels != IGNORE_LABEL) & ((labels < 0) | (labels >= NUM_CLASSES))
        if np.any(invalid):
            bad = np.unique(labels[invalid]).tolist()
            raise ValidationError(f"SemanticMask chứa nhãn không hợp lệ: {bad}")
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> Tuple[int, int]:
        return self.labels.shape[0], self.labels.shape[1]

    def class_histogram(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


@dataclass(frozen=True)
class HazeParams:
    """
    Tham số của mô hình tán xạ khí quyển I = J t + A (1 - t).

    atmospheric_light: A, một số hoặc tuple 3 giá trị (mỗi kênh visible).
    beta_vis: hệ số tán xạ của visible (nghịch đảo đơn vị scene).
    nir_beta_ratio: beta_nir = nir_beta_ratio * beta_vis, trong (0, 1].
    """
    atmospheric_light: Union[float, Tuple[float, ...]]
    beta_vis: float
    nir_beta_ratio: float = 0.3

    def __post_init__(self):
        light = self.atmospheric_light
        if isinstance(light, (list, tuple, np.ndarray)):
            light = tuple(float(v) for v in light)
            if len(light) not in (1, 3):
                raise ValidationError(f"atmospheric_light phải có 1 hoặc 3 kênh, nhận được {len(light)}")
            if len(light) == 1:
                light = light[0]
        else:
            light = float(light)
        object.__setattr__(self, "atmospheric_light", light)
        values = light if isinstance(light, tuple) else (light,)
        if any(v < 0.0 or v > 1.0 for v in values):
            raise ValidationError(f"atmospheric_light ngoài [0,1]: {values}")
        if self.beta_vis < 0:
            raise ValidationError(f"beta_vis phải >= 0, nhận được {self.beta_vis}")
        if not 0.0 < self.nir_beta_ratio <= 1.0:
            raise ValidationError(f"nir_beta_ratio phải nằm trong (0, 1], nhận được {self.nir_beta_ratio}")

    def light_for(self, modality: str) -> np.ndarray:
        """A dưới dạng mảng broadcast được với ảnh HWC của modality tương ứng."""
        values = np.atleast_1d(np.asarray(self.atmospheric_light, dtype=np.float64))
        if modality == "vis":
            return np.broadcast_to(values, (3,)).copy()
        # NIR dùng trung bình các kênh visible
        return np.array([values.mean()])

    def beta_for(self, modality: str) -> float:
        if modality == "vis":
            return float(self.beta_vis)
        return float(self.beta_vis * self.nir_beta_ratio)

    def to_dict(self) -> Dict[str, object]:
        light = self.atmospheric_light
        return {
            "atmospheric_light": list(light) if isinstance(light, tuple) else light,
            "beta_vis": self.beta_vis,
            "nir_beta_ratio": self.nir_beta_ratio,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "HazeParams":
        return cls(
            atmospheric_light=data["atmospheric_light"],
            beta_vis=float(data["beta_vis"]),
            nir_beta_ratio=float(data.get("nir_beta_ratio", 0.3)),
        )


@dataclass(frozen=True)
class ScenePair:
    """Cặp visible (3 kênh) / NIR (1 kênh) đã căn chỉnh pixel, kèm mask, depth và tham số haze."""
    id: str
    visible: Image
    nir: Image
    condition: str = "clear"
    mask: Optional[SemanticMask] = None
    depth: Optional[np.ndarray] = None
    haze_params: Optional[HazeParams] = None
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.depth is not None:
            object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float64))
        self.validate()

    def validate(self):
        for name in ("visible", "nir"):
            if not isinstance(getattr(self, name), Image):
                raise ValidationError(f"[{self.id}] thiếu ảnh {name} (cần Image)")
        if self.visible.channels != 3:
            raise ValidationError(f"[{self.id}] visible phải có 3 kênh, nhận được {self.visible.channels}")
        if self.nir.channels != 1:
            raise ValidationError(f"[{self.id}] nir phải có 1 kênh, nhận được {self.nir.channels}")
        if self.visible.size != self.nir.size:
            raise ShapeError(
                f"[{self.id}] visible {self.visible.size} và nir {self.nir.size} không cùng kích thước"
            )
        if self.mask is not None and self.mask.size != self.visible.size:
            raise ShapeError(f"[{self.id}] mask {self.mask.size} khác kích thước ảnh {self.visible.size}")
        if self.depth is not None:
            if self.depth.shape != self.visible.size:
                raise ShapeError(f"[{self.id}] depth {self.depth.shape} khác kích thước ảnh {self.visible.size}")
            if not np.all(np.isfinite(self.depth)) or self.depth.min() < 0:
                raise ValidationError(f"[{self.id}] depth phải hữu hạn và >= 0")
        if self.condition not in CONDITIONS:
            raise ValidationError(f"[{self.id}] condition không hợp lệ: {self.condition}")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"[{self.id}] provenance không hợp lệ: {self.provenance}")
        if self.condition == "haze" and self.provenance == "synthetic" and self.haze_params is None:
            raise ValidationError(f"[{self.id}] mẫu synthetic có haze nhưng thiếu haze_params")

    @property
    def size(self) -> Tuple[int, int]:
        return self.visible.size


# ==============================================================================
# Chuyển đổi numpy HWC <-> tensor BCHW
# ==============================================================================

def image_to_tensor(image: Image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Image HWC -> tensor 1 x C x H x W."""
    return torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def tensor_to_image(tensor: torch.Tensor) -> Image:
    """Tensor C x H x W hoặc 1 x C x H x W -> Image."""
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise ShapeError(f"tensor_to_image cần batch size 1, nhận được {tensor.shape[0]}")
        tensor = tensor[0]
    array = tensor.detach().cpu().to(torch.float64).numpy().transpose(1, 2, 0)
    return Image(array)


def mask_to_tensor(mask: SemanticMask) -> torch.Tensor:
    return torch.from_numpy(mask.labels.astype(np.int64))


def batch_pairs(pairs: Sequence[ScenePair], dtype: torch.dtype = torch.float32,
                device: Optional[torch.device] = None) -> Dict[str, torch.Tensor]:
    """
    Gom một danh sách ScenePair thành batch tensor.

    Returns:
        Dict với 'vis' (B,3,H,W), 'nir' (B,1,H,W), và 'mask' (B,H,W) nếu mọi pair đều có mask,
        'depth' (B,H,W) nếu mọi pair đều có depth.
    """
    if not pairs:
        raise ValidationError("batch_pairs nhận danh sách rỗng")
    batch = {
        "vis": torch.cat([image_to_tensor(p.visible, dtype) for p in pairs], dim=0),
        "nir": torch.cat([image_to_tensor(p.nir, dtype) for p in pairs], dim=0),
    }
    if all(p.mask is not None for p in pairs):
        batch["mask"] = torch.stack([mask_to_tensor(p.mask) for p in pairs], dim=0)
    if all(p.depth is not None for p in pairs):
        batch["depth"] = torch.stack([torch.from_numpy(p.depth).to(dtype) for p in pairs], dim=0)
    if device is not None:
        batch = {k: v.to(device) for k, v in batch.items()}
    return batch


def luminance(pixels: np.ndarray) -> np.ndarray:
    """Luminance Rec.709 của ảnh HWC; ảnh 1 kênh trả về chính nó."""
    if pixels.ndim == 2:
        return pixels
    if pixels.shape[2] == 1:
        return pixels[:, :, 0]
    return pixels[:, :, 0] * 0.2126 + pixels[:, :, 1] * 0.7152 + pixels[:, :, 2] * 0.0722


def as_pixels(image: Union[Image, np.ndarray]) -> np.ndarray:
    """Cho phép metric nhận cả Image lẫn mảng numpy thô."""
    if isinstance(image, Image):
        return image.pixels
    array = np.asarray(image, dtype=np.float64)
    return array[:, :, None] if array.ndim == 2 else array


def as_labels(mask: Union[SemanticMask, np.ndarray]) -> np.ndarray:
    if isinstance(mask, SemanticMask):
        return mask.labels
    return np.asarray(mask).astype(np.int64)
