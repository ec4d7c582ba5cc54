# src/synthesis/corpus_builder.py

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from ..core.async_workers import ordered_map
from ..core.data_model import HazeParams, Image, ScenePair, luminance
from ..core.exceptions import DataError, ValidationError
from ..storage.file_handlers import create_file_handler
from ..storage.manifest import ManifestEntry, save_pair, write_manifest
from .haze_model import apply_haze, random_haze_params
from .scene_renderer import SceneRecipe, render_scene

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
CORPUS_INFO_NAME = "corpus.json"
SPLIT_FRACTIONS = (("train", 0.70), ("val", 0.15), ("test", 0.15))
MAX_SAMPLE_ATTEMPTS = 16


def sample_seeds(seed: int, index: int, attempt: int = 0) -> Tuple[int, np.random.Generator]:
    """Seed của scene và Generator cho haze, chỉ phụ thuộc (seed, index, attempt)."""
    scene_ss, haze_ss = np.random.SeedSequence([seed, index, attempt]).spawn(2)
    return int(scene_ss.generate_state(1)[0]), np.random.default_rng(haze_ss)


def global_contrast(image: Image) -> float:
    """RMS contrast toàn cục: độ lệch chuẩn của luminance (cùng định nghĩa với metric rms_contrast)."""
    return float(luminance(image.pixels).astype(np.float64).std())


def haze_lowers_contrast(clear: ScenePair, hazy: ScenePair) -> bool:
    return all(global_contrast(getattr(hazy, m)) <= global_contrast(getattr(clear, m)) for m in ("visible", "nir"))


def hazy_counterpart(clear: ScenePair, params: HazeParams, pair_id: str) -> ScenePair:
    """Phủ haze lên cả hai modality của một cặp sạch, giữ nguyên mask và depth."""
    return ScenePair(
        id=pair_id,
        visible=apply_haze(clear.visible, clear.depth, params, "vis"),
        nir=apply_haze(clear.nir, clear.depth, params, "nir"),
        condition="haze",
        mask=clear.mask,
        depth=clear.depth,
        haze_params=params,
        provenance="synthetic",
    )


def render_sample(index: int, seed: int, size: int, beta_range: Sequence[float],
                  nir_beta_ratio: float) -> Tuple[ScenePair, ScenePair]:
    """
    Cặp clear/haze của scene `index`.

    A được rút trước và làm màu trời của cảnh, nên pixel xa (trời) hội tụ về đúng độ sáng của chúng.
    Mẫu nào haze vẫn làm tăng RMS contrast ở một modality được rút lại với attempt kế tiếp.

    Raises:
        DataError: hết MAX_SAMPLE_ATTEMPTS mà không có mẫu hợp lệ.
    """
    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        scene_seed, haze_rng = sample_seeds(seed, index, attempt)
        params = random_haze_params(haze_rng, beta_range=beta_range, nir_beta_ratio=nir_beta_ratio)
        recipe = SceneRecipe(seed=scene_seed, size=size, sky_radiance=tuple(params.light_for("vis").tolist()))
        clear = render_scene(recipe, scene_id=f"scene_{index:04d}_clear")
        hazy = hazy_counterpart(clear, params, f"scene_{index:04d}_haze")
        if haze_lowers_contrast(clear, hazy):
            return clear, hazy
        logger.debug(f"Scene {index}: haze làm tăng contrast ở attempt {attempt}, rút lại")
    raise DataError(f"Scene {index}: không có mẫu haze giảm contrast sau {MAX_SAMPLE_ATTEMPTS} lần rút")


def split_counts(count: int) -> Dict[str, int]:
    """Số scene mỗi split (70/15/15), train luôn có ít nhất một scene."""
    n_train = max(1, int(round(count * SPLIT_FRACTIONS[0][1])))
    n_val = min(count - n_train, int(round(count * SPLIT_FRACTIONS[1][1])))
    return {"train": n_train, "val": n_val, "test": count - n_train - n_val}


def synthesize_corpus(count: int, seed: int, beta_range: Sequence[float] = (0.4, 1.2),
                      nir_beta_ratio: float = 0.3, out_dir: Union[str, Path] = "data/minivnhd",
                      size: int = 64, workers: int = 1) -> List[ManifestEntry]:
    """
    Sinh `count` cặp sạch và `count` cặp haze tương ứng, ghi PNG + manifest.

    Ngoài manifest.jsonl còn ghi train/val/test.jsonl (chia theo index scene, hai condition
    của cùng scene luôn chung split) và corpus.json chứa tham số sinh.

    Returns:
        Danh sách ManifestEntry theo thứ tự (scene 0 clear, scene 0 haze, scene 1 clear, ...).
    """
    if count < 1:
        raise ValidationError(f"count phải >= 1, nhận được {count}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Không thể tạo thư mục corpus {out_dir}: {e}") from e

    logger.info(f"Bắt đầu sinh corpus: {count} scene, seed={seed}, beta_range={tuple(beta_range)}, "
                f"nir_beta_ratio={nir_beta_ratio}, size={size}, workers={workers}")

    def _build(index: int) -> List[ManifestEntry]:
        clear, hazy = render_sample(index, seed, size, beta_range, nir_beta_ratio)
        return [save_pair(clear, out_dir), save_pair(hazy, out_dir)]

    entries: List[ManifestEntry] = []
    for index, pair_entries in enumerate(ordered_map(_build, range(count), workers=workers, name="Synth")):
        entries.extend(pair_entries)
        if (index + 1) % 50 == 0:
            logger.info(f"Đã sinh {index + 1}/{count} scene")

    write_manifest(entries, out_dir / MANIFEST_NAME)

    counts = split_counts(count)
    start = 0
    for split_name, _ in SPLIT_FRACTIONS:
        stop = start + counts[split_name]
        write_manifest(entries[2 * start:2 * stop], out_dir / f"{split_name}.jsonl")
        start = stop

    create_file_handler(out_dir / CORPUS_INFO_NAME, "json").write({
        "count": count,
        "seed": seed,
        "beta_range": [float(beta_range[0]), float(beta_range[1])],
        "nir_beta_ratio": nir_beta_ratio,
        "size": size,
        "splits": counts,
    })
    logger.info(f"Hoàn tất corpus tại {out_dir}: {len(entries)} entry, splits={counts}")
    return entries


def beta_ladder(recipe: SceneRecipe, betas: Sequence[float], atmospheric_light: float = 0.85,
                nir_beta_ratio: float = 0.3) -> List[ScenePair]:
    """Render một cảnh dưới nhiều mức beta (A cố định). beta = 0 cho lại đúng ảnh sạch."""
    clear = render_scene(recipe)
    ladder = []
    for beta in betas:
        params = HazeParams(atmospheric_light=atmospheric_light, beta_vis=float(beta),
                            nir_beta_ratio=nir_beta_ratio)
        ladder.append(hazy_counterpart(clear, params, f"{clear.id}_beta{beta:g}"))
    return ladder
