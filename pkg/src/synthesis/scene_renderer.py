# src/synthesis/scene_renderer.py

"""
Render cảnh thủ tục cho MiniVNHD: bầu trời, mặt đất, dải nước, cây, nhà, xe.
Visible và NIR được suy ra từ cùng một layout; NIR = nir_response[class] * luminance(visible).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from ..core.data_model import (
    BUILDINGS, GROUND, Image, NUM_CLASSES, SKY, ScenePair, SemanticMask, VEGETATION, VEHICLES, WATER,
    luminance,
)
from ..core.exceptions import ValidationError

logger = logging.getLogger(__name__)

MIN_SCENE_SIZE = 64
MAX_DEPTH = 5.0

DEFAULT_NIR_RESPONSE: Dict[int, float] = {
    SKY: 0.8,
    GROUND: 1.1,
    BUILDINGS: 1.0,
    VEGETATION: 2.2,
    WATER: 0.4,
    VEHICLES: 0.9,
}

# Màu nền (RGB) và texture (sigma của gaussian_filter, biên độ) cho mỗi class
_BASE_COLORS = {
    SKY: (0.62, 0.74, 0.90),
    GROUND: (0.48, 0.42, 0.32),
    BUILDINGS: (0.55, 0.55, 0.57),
    VEGETATION: (0.20, 0.46, 0.16),
    WATER: (0.16, 0.30, 0.46),
    VEHICLES: (0.70, 0.20, 0.18),
}
_TEXTURE = {
    SKY: (6.0, 0.03),
    GROUND: (1.5, 0.12),
    BUILDINGS: (1.0, 0.14),
    VEGETATION: (0.8, 0.22),
    WATER: (3.0, 0.08),
    VEHICLES: (0.7, 0.08),
}


@dataclass(frozen=True)
class SceneRecipe:
    """
    Tham số sinh một cảnh. Cùng recipe luôn cho cùng ảnh (byte-identical).

    Attributes:
        seed: seed của numpy Generator dùng cho cảnh này.
        size: cạnh ảnh vuông (pixel), >= 64.
        n_buildings, n_vegetation, n_vehicles: số vùng mỗi loại.
        water: có dải nước hay không.
        horizon_range: vị trí đường chân trời theo tỉ lệ chiều cao.
        nir_response: hệ số nhân luminance -> NIR cho từng class.
        sky_radiance: màu nền của trời (RGB). None dùng màu mặc định; corpus đặt bằng A của haze
            để trời chính là nguồn airlight.
    """
    seed: int
    size: int = 64
    n_buildings: int = 3
    n_vegetation: int = 4
    n_vehicles: int = 2
    water: bool = True
    horizon_range: Tuple[float, float] = (0.32, 0.48)
    nir_response: Dict[int, float] = field(default_factory=lambda: dict(DEFAULT_NIR_RESPONSE))
    sky_radiance: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if self.sky_radiance is not None:
            if len(self.sky_radiance) != 3 or not all(0.0 <= v <= 1.0 for v in self.sky_radiance):
                raise ValidationError(f"sky_radiance phải là 3 giá trị trong [0, 1]: {self.sky_radiance}")
        missing = [c for c in range(NUM_CLASSES) if c not in self.nir_response]
        if missing:
            raise ValidationError(f"nir_response thiếu class {missing}")
        if any(v <= 0 for v in self.nir_response.values()):
            raise ValidationError(f"nir_response phải dương: {self.nir_response}")
        if self.nir_response[VEGETATION] <= self.nir_response[WATER]:
            raise ValidationError("nir_response[vegetation] phải lớn hơn nir_response[water]")
        if min(self.n_buildings, self.n_vegetation, self.n_vehicles) < 0:
            raise ValidationError("Số vùng của layout không được âm")


def _band_limited_noise(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    std = noise.std()
    return noise / std if std > 0 else noise


def _ground_depth(size: int, horizon: int) -> np.ndarray:
    """Depth theo hàng: tăng dần từ đáy ảnh lên chân trời, bầu trời = MAX_DEPTH."""
    rows = np.arange(size, dtype=np.float64)
    span = float(size - horizon)
    # Phối cảnh đơn giản: khoảng cách tỉ lệ nghịch với khoảng cách tới chân trời
    distance_from_horizon = (rows - horizon + 1.0) / span
    ground = np.clip(0.25 / np.maximum(distance_from_horizon, 1e-6), 0.0, MAX_DEPTH * 0.98)
    depth_rows = np.where(rows < horizon, MAX_DEPTH, ground)
    return np.repeat(depth_rows[:, None], size, axis=1)


def render_layout(recipe: SceneRecipe, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sinh mask class và depth map cho recipe.

    Returns:
        (labels H x W int64, depth H x W float64)
    """
    size = recipe.size
    horizon = int(round(size * rng.uniform(*recipe.horizon_range)))
    labels = np.full((size, size), SKY, dtype=np.int64)
    labels[horizon:, :] = GROUND
    depth = _ground_depth(size, horizon)
    yy, xx = np.mgrid[0:size, 0:size]

    if recipe.water:
        top = int(rng.integers(horizon + 2, horizon + max(3, (size - horizon) // 2)))
        height = int(rng.integers(max(2, size // 16), max(3, size // 6)))
        labels[top:min(size, top + height), :] = WATER

    # Vật thể mang depth của hàng chân (nơi chạm đất)
    def _paint(region: np.ndarray, cls: int, base_row: int):
        labels[region] = cls
        depth[region] = depth[min(base_row, size - 1), 0]

    for _ in range(recipe.n_vegetation):
        base = int(rng.integers(horizon + 1, size))
        cx = rng.uniform(0, size)
        ry = rng.uniform(size * 0.04, size * 0.12)
        rx = rng.uniform(size * 0.05, size * 0.16)
        cy = base - ry
        region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        _paint(region, VEGETATION, base)

    for _ in range(recipe.n_buildings):
        base = int(rng.integers(horizon + 1, horizon + max(2, (size - horizon) // 3)))
        width = int(rng.integers(max(3, size // 14), max(4, size // 5)))
        height = int(rng.integers(max(4, size // 8), max(5, size // 3)))
        left = int(rng.integers(0, size - width))
        region = (yy >= base - height) & (yy < base) & (xx >= left) & (xx < left + width)
        _paint(region, BUILDINGS, base)

    for _ in range(recipe.n_vehicles):
        base = int(rng.integers(horizon + (size - horizon) // 2, size))
        width = int(rng.integers(max(3, size // 16), max(4, size // 8)))
        height = max(2, width // 2)
        left = int(rng.integers(0, size - width))
        region = (yy >= base - height) & (yy < base) & (xx >= left) & (xx < left + width)
        _paint(region, VEHICLES, base)

    return labels, depth


def render_scene(recipe: SceneRecipe, scene_id: str = None) -> ScenePair:
    """
    Render một cặp visible/NIR sạch (condition=clear) kèm mask đầy đủ và depth.

    Raises:
        ValidationError: recipe.size < 64.
    """
    if recipe.size < MIN_SCENE_SIZE:
        raise ValidationError(f"Kích thước cảnh tối thiểu {MIN_SCENE_SIZE}, nhận được {recipe.size}")
    rng = np.random.default_rng(recipe.seed)
    labels, depth = render_layout(recipe, rng)
    size = recipe.size

    visible = np.zeros((size, size, 3), dtype=np.float64)
    for cls in range(NUM_CLASSES):
        region = labels == cls
        color = np.asarray(_BASE_COLORS[cls])
        if cls == SKY and recipe.sky_radiance is not None:
            color = np.asarray(recipe.sky_radiance, dtype=np.float64)
        elif cls in (BUILDINGS, VEHICLES):
            # Mỗi scene có tông màu riêng cho nhà / xe
            color = np.clip(color + rng.uniform(-0.12, 0.12, size=3), 0.05, 0.95)
        sigma, amplitude = _TEXTURE[cls]
        texture = _band_limited_noise(rng, (size, size), sigma) * amplitude
        if cls == SKY:
            # Trời sáng dần về phía chân trời
            texture = texture + np.linspace(-0.08, 0.06, size)[:, None]
        shaded = color[None, None, :] * (1.0 + texture[:, :, None])
        visible[region] = shaded[region]
    visible = np.clip(visible, 0.0, 1.0)

    response = np.zeros((size, size), dtype=np.float64)
    for cls, factor in recipe.nir_response.items():
        response[labels == cls] = factor
    nir = response * luminance(visible)
    if recipe.sky_radiance is not None:
        # Trời NIR theo trung bình kênh, cùng quy ước với HazeParams.light_for("nir")
        sky = labels == SKY
        nir[sky] = visible[sky].mean(axis=-1)
    nir = np.clip(nir, 0.0, 1.0)

    pair_id = scene_id if scene_id is not None else f"scene_seed{recipe.seed}_clear"
    return ScenePair(
        id=pair_id,
        visible=Image(visible),
        nir=Image(nir),
        condition="clear",
        mask=SemanticMask(labels),
        depth=depth,
        haze_params=None,
        provenance="synthetic",
    )
