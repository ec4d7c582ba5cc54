# src/training/ablation.py

"""
Các arm ablation cố định. Mỗi arm huấn luyện một số biến thể trên nhiều seed, chấm điểm trên tập val
và ghi '<out>/<arm>_summary.json' (metric theo seed, trung bình, biến thể tốt nhất theo từng seed).

    attention      stage fusion; MI, Q_AB/F, VIF của O_VF
    alignment      stage align; mIoU, pixel accuracy trên val
    discriminator  align -> recon; fog density và khoảng cách histogram gradient theo class của O_SR
    weights        align/recon/fusion dùng chung -> finetune theo (alpha1, beta1); fog density,
                   gradient energy của O_Final
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import torch

from .. import config
from ..core.data_model import ScenePair, batch_pairs, tensor_to_image
from ..core.exceptions import ConfigError
from ..metrics import fusion_metrics
from ..metrics.quality_models import fog_density
from ..metrics.segmentation import class_gradient_histogram_distance
from ..networks.pipeline import HSVFNetwork, infer
from ..storage.checkpoint_store import CheckpointStore
from ..storage.file_handlers import create_file_handler
from ..storage.manifest import load_manifest_pairs
from .evaluation import load_metric_models
from .stage_config import StageConfig, load_stage_config
from .stage_runner import run_stage

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)

ATTENTION_VARIANTS = {
    "joint": {"self_attention": True, "cross_attention": True},
    "self": {"self_attention": True, "cross_attention": False},
    "cross": {"self_attention": False, "cross_attention": True},
    "none": {"self_attention": False, "cross_attention": False},
}

ALIGNMENT_VARIANTS = {
    "vis": {"align_modalities": "vis", "content_align": False, "recon": False},
    "nir": {"align_modalities": "nir", "content_align": False, "recon": False},
    "both": {"align_modalities": "both", "content_align": False, "recon": False},
    "both_content": {"align_modalities": "both", "content_align": True, "recon": False},
    "full": {"align_modalities": "both", "content_align": True, "recon": True},
}

DISCRIMINATOR_VARIANTS = {
    "region": {"discriminator": "region", "semantic_conditioning": True},
    "image": {"discriminator": "image", "semantic_conditioning": True},
    "unconditioned": {"discriminator": "image", "semantic_conditioning": False},
}

# (alpha1_final, beta1_final)
WEIGHT_VARIANTS = {
    "a0_b0.1": (0.0, 0.1),
    "a0.01_b0.1": (0.01, 0.1),
    "a0.1_b0.1": (0.1, 0.1),
    "a1_b0.1": (1.0, 0.1),
    "a10_b0.1": (10.0, 0.1),
    "a1_b0": (1.0, 0.0),
    "a10_b0": (10.0, 0.0),
}

# metric -> True nếu nhỏ hơn là tốt hơn
ARM_METRICS = {
    "attention": {"mi": False, "q_abf": False, "vif": False},
    "alignment": {"val_mIoU": False, "val_pixel_acc": False},
    "discriminator": {"fog_density": True, "class_histogram_distance": True},
    "weights": {"fog_density": True, "gradient_energy": False},
}

ARMS = tuple(ARM_METRICS)

Scores = Dict[str, float]


# ==============================================================================
# Chấm điểm output của network trên tập val
# ==============================================================================

@torch.no_grad()
def fusion_outputs(network: HSVFNetwork, pairs: Sequence[ScenePair]) -> List:
    network.eval()
    param = next(network.parameters())
    outputs = []
    for pair in pairs:
        batch = batch_pairs([pair], dtype=param.dtype, device=param.device)
        outputs.append(tensor_to_image(network.fusion(batch["vis"], batch["nir"])))
    return outputs


def score_fusion_outputs(outputs: Sequence, pairs: Sequence[ScenePair]) -> Scores:
    return {
        "mi": float(np.mean([fusion_metrics.mutual_information(o, p.visible, p.nir) for o, p in zip(outputs, pairs)])),
        "q_abf": float(np.mean([fusion_metrics.q_abf(p.visible, p.nir, o) for o, p in zip(outputs, pairs)])),
        "vif": float(np.mean([fusion_metrics.fusion_vif(p.visible, p.nir, o) for o, p in zip(outputs, pairs)])),
    }


class AblationRunner:
    """
    Chạy một arm trên các seed. Config của từng stage đọc từ cùng một file config;
    checkpoint của biến thể nằm ở '<out>/<arm>/<biến thể>/seed<k>'.
    """

    def __init__(self, config_path: Union[str, Path], out_dir: Union[str, Path],
                 seeds: Sequence[int] = DEFAULT_SEEDS, metric_dir: Union[str, Path] = config.METRIC_MODEL_DIR):
        self.config_path = Path(config_path)
        self.out_dir = Path(out_dir)
        self.seeds = tuple(seeds)
        self.metric_dir = Path(metric_dir)
        self._val_pairs = None
        self._clear_train = None

    # --- dữ liệu ---------------------------------------------------------------

    def stage_config(self, stage: str, seed: int, ckpt_dir: Path, flags: Mapping[str, object] = None,
                     **overrides) -> StageConfig:
        base = load_stage_config(self.config_path, stage)
        merged_flags = {**base.network_flags, **(flags or {})}
        return base.with_overrides(seed=seed, ckpt_dir=Path(ckpt_dir), network_flags=merged_flags, **overrides)

    def val_pairs(self) -> List[ScenePair]:
        if self._val_pairs is None:
            cfg = load_stage_config(self.config_path, "align")
            self._val_pairs = load_manifest_pairs(cfg.val_manifest, condition="haze")
        return self._val_pairs

    def clear_train_pairs(self) -> List[ScenePair]:
        if self._clear_train is None:
            cfg = load_stage_config(self.config_path, "align")
            self._clear_train = load_manifest_pairs(cfg.train_manifest, condition="clear")
        return self._clear_train

    def variant_dir(self, arm: str, variant: str, seed: int) -> Path:
        return self.out_dir / arm / variant / f"seed{seed}"

    def _shared_pretrain(self, arm: str, seed: int, stages: Sequence[str]) -> CheckpointStore:
        """Các stage pretrain dùng chung cho mọi biến thể của arm (chạy một lần cho mỗi seed)."""
        shared = self.out_dir / arm / "_shared" / f"seed{seed}"
        store = CheckpointStore(shared)
        for stage in stages:
            if store.exists(stage):
                logger.info(f"[{arm}] seed {seed}: dùng lại checkpoint '{stage}' tại {shared}")
                continue
            run_stage(self.stage_config(stage, seed, shared))
        return store

    # --- các arm ---------------------------------------------------------------

    def _attention(self, variant: str, seed: int) -> Scores:
        cfg = self.stage_config("fusion", seed, self.variant_dir("attention", variant, seed),
                                ATTENTION_VARIANTS[variant])
        result = run_stage(cfg, keep_network=True)
        pairs = self.val_pairs()
        return score_fusion_outputs(fusion_outputs(result.network, pairs), pairs)

    def _alignment(self, variant: str, seed: int) -> Scores:
        cfg = self.stage_config("align", seed, self.variant_dir("alignment", variant, seed),
                                ALIGNMENT_VARIANTS[variant])
        result = run_stage(cfg)
        return {k: float(v) for k, v in result.val_metrics.items() if k in ARM_METRICS["alignment"]}

    def _discriminator(self, variant: str, seed: int) -> Scores:
        shared = self._shared_pretrain("discriminator", seed, ("align",))
        target = self.variant_dir("discriminator", variant, seed)
        shared.copy_stages(("align",), target)
        result = run_stage(self.stage_config("recon", seed, target, DISCRIMINATOR_VARIANTS[variant]),
                           keep_network=True)
        models = load_metric_models(self.metric_dir)
        pairs = self.val_pairs()
        outputs = [infer(result.network, pair).sr for pair in pairs]
        clear = self.clear_train_pairs()
        distance = class_gradient_histogram_distance(
            outputs, [p.mask for p in pairs], [p.visible for p in clear], [p.mask for p in clear],
        )
        return {
            "fog_density": float(np.mean([fog_density(o, models.fog) for o in outputs])),
            "class_histogram_distance": float(distance["mean"]),
        }

    def _weights(self, variant: str, seed: int) -> Scores:
        shared = self._shared_pretrain("weights", seed, ("align", "recon", "fusion"))
        target = self.variant_dir("weights", variant, seed)
        shared.copy_stages(("align", "recon", "fusion"), target)
        alpha1, beta1 = WEIGHT_VARIANTS[variant]
        base = self.stage_config("finetune", seed, target)
        cfg = base.with_overrides(weights=replace(base.weights, alpha1_final=alpha1, beta1_final=beta1))
        result = run_stage(cfg, keep_network=True)
        models = load_metric_models(self.metric_dir)
        outputs = [infer(result.network, pair).final for pair in self.val_pairs()]
        return {
            "fog_density": float(np.mean([fog_density(o, models.fog) for o in outputs])),
            "gradient_energy": float(np.mean([fusion_metrics.gradient_energy(o) for o in outputs])),
        }

    def variants(self, arm: str) -> Tuple[str, ...]:
        return tuple({
            "attention": ATTENTION_VARIANTS,
            "alignment": ALIGNMENT_VARIANTS,
            "discriminator": DISCRIMINATOR_VARIANTS,
            "weights": WEIGHT_VARIANTS,
        }[arm])

    def run(self, arm: str) -> Dict[str, object]:
        """Chạy toàn bộ arm và ghi '<out>/<arm>_summary.json'."""
        if arm not in ARMS:
            raise ConfigError(f"Arm ablation không hợp lệ: '{arm}' (hợp lệ: {ARMS})")
        if arm in ("discriminator", "weights"):
            load_metric_models(self.metric_dir)
        scorer: Callable[[str, int], Scores] = getattr(self, f"_{arm}")

        per_seed: Dict[str, Dict[int, Scores]] = {variant: {} for variant in self.variants(arm)}
        for seed in self.seeds:
            for variant in self.variants(arm):
                logger.info(f"[ablate {arm}] seed {seed}, biến thể '{variant}'")
                per_seed[variant][seed] = scorer(variant, seed)
                logger.info(f"[ablate {arm}] {variant}/seed{seed}: {per_seed[variant][seed]}")

        summary = summarize(arm, per_seed, self.seeds)
        path = self.out_dir / f"{arm}_summary.json"
        create_file_handler(path, "json").write(summary)
        logger.info(f"Đã ghi tổng kết arm '{arm}' vào {path}")
        return summary


def summarize(arm: str, per_seed: Mapping[str, Mapping[int, Scores]], seeds: Sequence[int]) -> Dict[str, object]:
    """Trung bình theo seed và biến thể tốt nhất của từng metric ở từng seed."""
    directions = ARM_METRICS[arm]
    means = {
        variant: {metric: float(np.mean([scores[seed][metric] for seed in seeds])) for metric in directions}
        for variant, scores in per_seed.items()
    }
    best_per_seed = {}
    for metric, lower_is_better in directions.items():
        pick = min if lower_is_better else max
        best_per_seed[metric] = {
            str(seed): pick(per_seed, key=lambda v: per_seed[v][seed][metric]) for seed in seeds
        }
    return {
        "arm": arm,
        "seeds": list(seeds),
        "lower_is_better": dict(directions),
        "variants": {
            variant: {"per_seed": {str(s): dict(v) for s, v in scores.items()}, "mean": means[variant]}
            for variant, scores in per_seed.items()
        },
        "best_per_seed": best_per_seed,
    }


def run_ablation(arm: str, config_path: Union[str, Path], out_dir: Union[str, Path],
                 seeds: Sequence[int] = DEFAULT_SEEDS,
                 metric_dir: Union[str, Path] = config.METRIC_MODEL_DIR) -> Dict[str, object]:
    return AblationRunner(config_path, out_dir, seeds=seeds, metric_dir=metric_dir).run(arm)
