# src/training/stage_runner.py

"""
Chạy một stage training: align, recon, fusion hoặc finetune.

Mỗi step ghi một record JSON Lines chứa mọi thành phần loss (không trọng số) và tổng đã trọng số;
mỗi epoch ghi một record tổng kết kèm metric validation. Loss NaN/Inf dừng training và dump batch.
"""
import logging
import math
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import psutil
import torch
import torch.nn as nn

from ..core.data_model import ScenePair, batch_pairs
from ..core.async_workers import prefetch
from ..core.exceptions import DataError, NumericalError
from ..metrics.segmentation import confusion_matrix, metrics_from_confusion
from ..networks.fusion import fusion_loss
from ..networks.pipeline import HSVFNetwork, LossReport, build_network, total_loss
from ..networks.reconstruction import discriminator_loss, generator_region_loss
from ..storage.checkpoint_store import CheckpointStore
from ..storage.file_handlers import create_file_handler
from ..storage.manifest import load_manifest_pairs
from .stage_config import StageConfig

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.5, 0.999)


@dataclass
class StageResult:
    stage: str
    checkpoint: Path
    log_path: Path
    step_totals: List[float] = field(default_factory=list)
    val_metrics: Dict[str, float] = field(default_factory=dict)
    network: Optional[HSVFNetwork] = None


# ==============================================================================
# Reproducibility / dữ liệu
# ==============================================================================

def seed_everything(seed: int, deterministic: bool):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    else:
        torch.use_deterministic_algorithms(False)


def iterate_batches(pairs: Sequence[ScenePair], batch_size: int, rng: np.random.Generator,
                    dtype: torch.dtype, device: torch.device) -> Iterator[Dict[str, torch.Tensor]]:
    """Duyệt pairs theo thứ tự xáo trộn bởi rng; batch cuối có thể nhỏ hơn."""
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        batch = batch_pairs(chunk, dtype=dtype, device=device)
        batch["ids"] = [p.id for p in chunk]
        yield batch


def _load_pairs(manifest: Path, condition: Optional[str] = None) -> List[ScenePair]:
    pairs = load_manifest_pairs(manifest, condition=condition)
    if not pairs:
        raise DataError(f"Manifest {manifest} không có pair nào (condition={condition})")
    return pairs


def dump_batch(batch: Dict[str, object], ckpt_dir: Path, stage: str, step: int) -> Path:
    """Lưu batch gây lỗi số học để tái hiện."""
    path = Path(ckpt_dir) / f"nan_dump_{stage}_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in batch.items() if torch.is_tensor(v)}
    if "ids" in batch:
        arrays["ids"] = np.array(batch["ids"])
    np.savez_compressed(path, **arrays)
    return path


def _rss_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


# ==============================================================================
# Các bước của từng stage
# ==============================================================================

class _StageTrainer:
    """Giữ optimizer và định nghĩa một step cho stage cụ thể."""

    def __init__(self, cfg: StageConfig, network: HSVFNetwork):
        self.cfg = cfg
        self.network = network
        self.weights = cfg.weights
        self.fusion_options = cfg.fusion_loss
        self.generator_params = self.trainable_modules()
        params = [p for m in self.generator_params for p in m.parameters()]
        self.optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=ADAM_BETAS)
        disc_modules = self.discriminator_modules()
        self.disc_optimizer = None
        if disc_modules:
            disc_params = [p for m in disc_modules for p in m.parameters()]
            self.disc_optimizer = torch.optim.Adam(disc_params, lr=cfg.learning_rate, betas=ADAM_BETAS)
        for module in self.frozen_modules():
            module.requires_grad_(False)

    def trainable_modules(self) -> List[nn.Module]:
        raise NotImplementedError

    def discriminator_modules(self) -> List[nn.Module]:
        return []

    def frozen_modules(self) -> List[nn.Module]:
        return []

    def optimizers(self) -> List[torch.optim.Optimizer]:
        return [o for o in (self.optimizer, self.disc_optimizer) if o is not None]

    def _fusion(self, output, batch):
        return fusion_loss(output, batch["vis"], batch["nir"], weights=self.fusion_options.weights,
                           luminance=self.fusion_options.luminance)

    def step(self, batch, clear_batch) -> Tuple[LossReport, Dict[str, float]]:
        raise NotImplementedError

    def _clear_labels(self, clear_batch) -> torch.Tensor:
        """S_C: nhãn dự đoán trên ảnh clear bằng nhánh content visible (hoặc nhánh duy nhất)."""
        alignment = self.network.alignment
        branch = "vis" if alignment.modalities == "both" else alignment.modalities
        with torch.no_grad():
            probs = alignment.predict_segmentation(clear_batch["vis"], clear_batch["nir"], modalities=branch)
        return probs.argmax(dim=1)

    def _discriminator_step(self, pairs) -> Dict[str, float]:
        """pairs: [(tên, bank, real, real_labels, fake, fake_labels)]"""
        self.disc_optimizer.zero_grad(set_to_none=True)
        losses = {}
        total = None
        for name, bank, real, real_labels, fake, fake_labels in pairs:
            loss = discriminator_loss(bank, real, real_labels, fake, fake_labels)
            if not bool(torch.isfinite(loss)):
                raise NumericalError(f"Loss discriminator '{name}' không hữu hạn")
            losses[name] = float(loss.detach())
            total = loss if total is None else total + loss
        total.backward()
        self.disc_optimizer.step()
        return losses


class _AlignTrainer(_StageTrainer):
    def trainable_modules(self):
        return [self.network.alignment]

    def step(self, batch, clear_batch):
        components = self.network.alignment.compute_losses(batch["vis"], batch["nir"], batch["mask"])
        extra = {f"align_{k}": float(v.detach()) for k, v in components.items() if k != "total"}
        return LossReport(align=components["total"]), extra


class _ReconTrainer(_StageTrainer):
    def trainable_modules(self):
        return [self.network.generator]

    def discriminator_modules(self):
        return [self.network.disc_recon]

    def frozen_modules(self):
        return [self.network.alignment]

    def step(self, batch, clear_batch):
        network = self.network
        with torch.no_grad():
            semantic = network.semantic_inputs(batch["vis"], batch["nir"])
        s_pred = semantic["seg_probs"].argmax(dim=1)
        o_sr = network.generator(semantic["seg_probs"], semantic["content"])
        s_clear = self._clear_labels(clear_batch)
        extra = self._discriminator_step([
            ("disc_recon", network.disc_recon, clear_batch["vis"], s_clear, o_sr, s_pred),
        ])
        return LossReport(region_adv=generator_region_loss(network.disc_recon, o_sr, s_pred)), extra


class _FusionTrainer(_StageTrainer):
    def trainable_modules(self):
        return [self.network.fusion]

    def step(self, batch, clear_batch):
        o_vf = self.network.fusion(batch["vis"], batch["nir"])
        return LossReport(fusion=self._fusion(o_vf, batch)), {}


class _FinetuneTrainer(_StageTrainer):
    def trainable_modules(self):
        n = self.network
        return [n.alignment, n.generator, n.fusion, n.final]

    def discriminator_modules(self):
        return [self.network.disc_recon, self.network.disc_final]

    def step(self, batch, clear_batch):
        network = self.network
        outputs = network(batch["vis"], batch["nir"])
        s_pred = outputs["seg_labels"].detach()
        s_clear = self._clear_labels(clear_batch)
        extra = self._discriminator_step([
            ("disc_recon", network.disc_recon, clear_batch["vis"], s_clear, outputs["o_sr"], s_pred),
            ("disc_final", network.disc_final, clear_batch["vis"], s_clear, outputs["o_final"], s_pred),
        ])
        components = network.alignment.compute_losses(batch["vis"], batch["nir"], batch["mask"])
        extra.update({f"align_{k}": float(v.detach()) for k, v in components.items() if k != "total"})
        report = LossReport(
            align=components["total"],
            region_adv=generator_region_loss(network.disc_recon, outputs["o_sr"], s_pred),
            fusion=self._fusion(outputs["o_vf"], batch),
            final_region_adv=generator_region_loss(network.disc_final, outputs["o_final"], s_pred),
            final_fusion=self._fusion(outputs["o_final"], batch),
        )
        return report, extra


_TRAINERS = {
    "align": _AlignTrainer,
    "recon": _ReconTrainer,
    "fusion": _FusionTrainer,
    "finetune": _FinetuneTrainer,
}


# ==============================================================================
# Validation
# ==============================================================================

@torch.no_grad()
def validate_stage(cfg: StageConfig, network: HSVFNetwork, val_pairs: Sequence[ScenePair],
                   device: torch.device) -> Dict[str, float]:
    """align: mIoU/pixel_acc trên tập val; các stage khác: fusion loss trung bình của output của stage."""
    network.eval()
    try:
        if cfg.stage == "align":
            confusion = None
            for pair in val_pairs:
                batch = batch_pairs([pair], dtype=cfg.torch_dtype, device=device)
                probs = network.alignment.predict_segmentation(batch["vis"], batch["nir"])
                cm = confusion_matrix(probs.argmax(dim=1)[0].cpu().numpy(), pair.mask)
                confusion = cm if confusion is None else confusion + cm
            scores = metrics_from_confusion(confusion)
            return {"val_mIoU": scores["mIoU"], "val_pixel_acc": scores["pixel_acc"]}

        losses = []
        for pair in val_pairs:
            batch = batch_pairs([pair], dtype=cfg.torch_dtype, device=device)
            if cfg.stage == "fusion":
                output = network.fusion(batch["vis"], batch["nir"])
            else:
                key = "o_sr" if cfg.stage == "recon" else "o_final"
                output = network(batch["vis"], batch["nir"])[key]
            losses.append(float(fusion_loss(output, batch["vis"], batch["nir"])))
        return {"val_fusion_loss": float(np.mean(losses))}
    finally:
        network.train()


# ==============================================================================
# Entry point
# ==============================================================================

def prepare_network(cfg: StageConfig, store: CheckpointStore, device: torch.device) -> HSVFNetwork:
    """Khởi tạo network theo seed rồi nạp checkpoint của các stage tiên quyết."""
    store.require_prerequisites(cfg.stage)
    network = build_network(cfg.network_flags, seed=cfg.seed, dtype=cfg.torch_dtype)
    if cfg.stage == "recon":
        store.load("align", network)
    elif cfg.stage == "finetune":
        store.load("align", network)
        store.load("recon", network, modules=("generator", "disc_recon"))
        store.load("fusion", network)
    return network.to(device)


def run_stage(cfg: StageConfig, keep_network: bool = False) -> StageResult:
    """
    Huấn luyện một stage và lưu checkpoint '<ckpt_dir>/<stage>.pt' cùng log '<stage>_log.jsonl'.

    Raises:
        PrerequisiteError: thiếu checkpoint của stage trước.
        NumericalError: loss NaN/Inf (batch được dump vào ckpt_dir).
    """
    cfg.validate()
    device = cfg.resolve_device()
    seed_everything(cfg.seed, cfg.deterministic)
    store = CheckpointStore(cfg.ckpt_dir)
    network = prepare_network(cfg, store, device)
    network.train()
    trainer = _TRAINERS[cfg.stage](cfg, network)

    condition = None if cfg.stage == "align" else "haze"
    train_pairs = _load_pairs(cfg.train_manifest, condition)
    val_pairs = _load_pairs(cfg.val_manifest, "haze")
    clear_pairs = _load_pairs(cfg.train_manifest, "clear") if cfg.stage in ("recon", "finetune") else []
    if cfg.stage in ("align", "finetune") and any(p.mask is None for p in train_pairs):
        raise DataError(f"Stage '{cfg.stage}' cần mask ngữ nghĩa cho mọi pair trong {cfg.train_manifest}")

    milestone = max(1, math.ceil(cfg.decay_at * cfg.epochs))
    schedulers = [torch.optim.lr_scheduler.MultiStepLR(o, milestones=[milestone], gamma=cfg.decay_factor)
                  for o in trainer.optimizers()]

    log_path = Path(cfg.ckpt_dir) / f"{cfg.stage}_log.jsonl"
    result = StageResult(stage=cfg.stage, checkpoint=store.path_for(cfg.stage), log_path=log_path)
    logger.info(f"Bắt đầu stage '{cfg.stage}': {cfg.epochs} epoch, {len(train_pairs)} pair train, "
                f"batch {cfg.batch_size}, lr {cfg.learning_rate}, seed {cfg.seed}, device {device}")

    step = 0
    with create_file_handler(log_path, "jsonl") as log:
        for epoch in range(1, cfg.epochs + 1):
            epoch_start = time.time()
            rng = np.random.default_rng([cfg.seed, epoch])
            clear_rng = np.random.default_rng([cfg.seed, epoch, 1])
            batches = iterate_batches(train_pairs, cfg.batch_size, rng, cfg.torch_dtype, device)
            clear_iter = iterate_batches(clear_pairs, cfg.batch_size, clear_rng, cfg.torch_dtype, device) \
                if clear_pairs else None
            epoch_totals = []

            for batch in prefetch(batches, maxsize=cfg.prefetch):
                step += 1
                clear_batch = None
                if clear_iter is not None:
                    clear_batch = next(clear_iter, None)
                    if clear_batch is None:
                        clear_iter = iterate_batches(clear_pairs, cfg.batch_size, clear_rng, cfg.torch_dtype, device)
                        clear_batch = next(clear_iter)
                try:
                    report, extra = trainer.step(batch, clear_batch)
                    loss = total_loss(report, cfg.weights)
                except NumericalError:
                    dump = dump_batch(batch, cfg.ckpt_dir, cfg.stage, step)
                    logger.error(f"Loss không hữu hạn ở step {step} (epoch {epoch}); đã dump batch vào {dump}")
                    raise

                trainer.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                trainer.optimizer.step()

                total_value = float(loss.detach())
                epoch_totals.append(total_value)
                result.step_totals.append(total_value)
                record = {"type": "step", "stage": cfg.stage, "epoch": epoch, "step": step,
                          "lr": trainer.optimizer.param_groups[0]["lr"], "total": total_value,
                          **report.to_dict(), **extra}
                log.write_record(record)
                if step % cfg.log_every == 0:
                    logger.debug(f"[{cfg.stage}] step {step}: total={total_value:.5f}")

            for scheduler in schedulers:
                scheduler.step()
            val_metrics = validate_stage(cfg, network, val_pairs, device)
            result.val_metrics = val_metrics
            log.write_record({"type": "epoch", "stage": cfg.stage, "epoch": epoch,
                              "mean_total": float(np.mean(epoch_totals)), **val_metrics})
            log.flush()
            val_text = ", ".join(f"{k}={v:.4f}" for k, v in val_metrics.items())
            logger.info(f"[{cfg.stage}] epoch {epoch}/{cfg.epochs}: loss={np.mean(epoch_totals):.5f}, {val_text}, "
                        f"lr={trainer.optimizer.param_groups[0]['lr']:.2e}, "
                        f"{time.time() - epoch_start:.1f}s, RSS {_rss_mb():.0f} MB")

    store.save(cfg.stage, network, epoch=cfg.epochs, seed=cfg.seed, network_flags=cfg.network_flags)
    if keep_network:
        result.network = network
    return result
