# src/storage/checkpoint_store.py

import logging
import os
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, ValidationError as PydanticValidationError

from ..core.exceptions import CheckpointError, PrerequisiteError
from .file_handlers import create_file_handler

logger = logging.getLogger(__name__)

STAGES = ("align", "recon", "fusion", "finetune")

# Submodule của HSVFNetwork mà mỗi stage sở hữu và lưu vào checkpoint
STAGE_MODULES = {
    "align": ("alignment",),
    "recon": ("alignment", "generator", "disc_recon"),
    "fusion": ("fusion",),
    "finetune": ("alignment", "generator", "fusion", "final", "disc_recon", "disc_final"),
}

# Checkpoint bắt buộc phải có trước khi chạy stage
STAGE_PREREQUISITES = {
    "align": (),
    "recon": ("align",),
    "fusion": (),
    "finetune": ("align", "recon", "fusion"),
}


class ParameterInfo(BaseModel):
    name: str
    shape: List[int]


class CheckpointInfo(BaseModel):
    """Sidecar JSON mô tả checkpoint, đọc được mà không cần torch."""
    model_config = ConfigDict(extra="forbid")

    stage: str
    epoch: int
    seed: int
    network_flags: Dict[str, Union[str, bool]] = {}
    parameters: List[ParameterInfo]


class CheckpointStore:
    """
    Quản lý checkpoint theo stage trong một thư mục: '<stage>.pt' + sidecar '<stage>.json'.
    File được ghi qua file tạm rồi đổi tên nên không bao giờ để lại checkpoint dở dang.
    """

    def __init__(self, base_dir: Union[str, Path]):
        self.base_dir = Path(base_dir)
        try:
            self.base_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CheckpointError(f"Không thể tạo thư mục checkpoint '{self.base_dir}': {e}") from e
        logger.debug(f"CheckpointStore tại '{self.base_dir}'")

    def path_for(self, stage: str) -> Path:
        if stage not in STAGES:
            raise CheckpointError(f"Stage không hợp lệ: '{stage}'")
        return self.base_dir / f"{stage}.pt"

    def info_path_for(self, stage: str) -> Path:
        return self.path_for(stage).with_suffix(".json")

    def exists(self, stage: str) -> bool:
        return self.path_for(stage).exists() and self.info_path_for(stage).exists()

    def available_stages(self) -> List[str]:
        return [stage for stage in STAGES if self.exists(stage)]

    def require(self, stages: Sequence[str], for_stage: str = ""):
        missing = [stage for stage in stages if not self.exists(stage)]
        if missing:
            target = f" cho stage '{for_stage}'" if for_stage else ""
            raise PrerequisiteError(f"Thiếu checkpoint {missing}{target} trong '{self.base_dir}'")

    def require_prerequisites(self, stage: str):
        self.require(STAGE_PREREQUISITES[stage], for_stage=stage)

    def save(self, stage: str, network: nn.Module, epoch: int, seed: int,
             network_flags: Optional[Dict[str, Union[str, bool]]] = None) -> Path:
        path = self.path_for(stage)
        state = {name: getattr(network, name).state_dict() for name in STAGE_MODULES[stage]}
        info = CheckpointInfo(
            stage=stage,
            epoch=epoch,
            seed=seed,
            network_flags=dict(network_flags or {}),
            parameters=[
                ParameterInfo(name=f"{module}.{key}", shape=list(tensor.shape))
                for module, module_state in state.items()
                for key, tensor in module_state.items()
            ],
        )
        tmp_path = path.with_suffix(".pt.tmp")
        try:
            torch.save({"info": info.model_dump(), "state": state}, tmp_path)
            os.replace(tmp_path, path)
        except OSError as e:
            logger.error(f"Không thể ghi checkpoint '{path}': {e}")
            raise CheckpointError(f"Không thể ghi checkpoint '{path}': {e}") from e
        create_file_handler(self.info_path_for(stage), "json").write(info.model_dump())
        logger.info(f"Đã lưu checkpoint stage '{stage}' (epoch {epoch}) vào {path}")
        return path

    def read_info(self, stage: str) -> CheckpointInfo:
        info_path = self.info_path_for(stage)
        if not info_path.exists():
            raise CheckpointError(f"Không tìm thấy sidecar checkpoint: {info_path}")
        try:
            return CheckpointInfo.model_validate(create_file_handler(info_path, "json").read())
        except PydanticValidationError as e:
            raise CheckpointError(f"Sidecar checkpoint không hợp lệ '{info_path}': {e}") from e

    def load(self, stage: str, network: nn.Module, modules: Optional[Sequence[str]] = None) -> CheckpointInfo:
        """
        Nạp các submodule của stage vào network.

        Args:
            modules: chỉ nạp các submodule này (mặc định: tất cả submodule mà stage sở hữu).
        """
        path = self.path_for(stage)
        if not path.exists():
            raise CheckpointError(f"Không tìm thấy checkpoint: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as e:
            raise CheckpointError(f"Không đọc được checkpoint '{path}': {e}") from e
        for name in modules or payload["state"].keys():
            if name not in payload["state"]:
                raise CheckpointError(f"Checkpoint '{path}' không chứa module '{name}'")
            try:
                getattr(network, name).load_state_dict(payload["state"][name])
            except RuntimeError as e:
                raise CheckpointError(f"Module '{name}' không khớp checkpoint '{path}': {e}") from e
        logger.debug(f"Đã nạp checkpoint '{stage}' từ {path}")
        return CheckpointInfo.model_validate(payload["info"])

    def load_for_inference(self, network: nn.Module) -> List[str]:
        """
        Nạp bộ checkpoint đầy đủ nhất: 'finetune' nếu có, nếu không thì ghép align + recon + fusion
        (G^Final giữ khởi tạo trung bình hai luồng).

        Returns:
            Danh sách stage đã nạp.
        """
        if self.exists("finetune"):
            self.load("finetune", network)
            return ["finetune"]
        self.require(("align", "recon", "fusion"), for_stage="inference")
        self.load("align", network)
        self.load("recon", network, modules=("generator", "disc_recon"))
        self.load("fusion", network)
        logger.warning("Không có checkpoint 'finetune', dùng các module pretrain riêng lẻ")
        return ["align", "recon", "fusion"]

    def network_flags(self) -> Dict[str, Union[str, bool]]:
        """Cờ network của checkpoint mới nhất theo thứ tự stage."""
        for stage in reversed(STAGES):
            if self.exists(stage):
                return dict(self.read_info(stage).network_flags)
        raise CheckpointError(f"Không có checkpoint nào trong '{self.base_dir}'")

    def copy_stages(self, stages: Sequence[str], target_dir: Union[str, Path]) -> "CheckpointStore":
        """Chép checkpoint + sidecar của các stage sang thư mục khác (dùng chung pretrain giữa các arm)."""
        self.require(stages, for_stage="copy")
        target = CheckpointStore(target_dir)
        for stage in stages:
            shutil.copy2(self.path_for(stage), target.path_for(stage))
            shutil.copy2(self.info_path_for(stage), target.info_path_for(stage))
        logger.debug(f"Đã chép checkpoint {list(stages)} từ {self.base_dir} sang {target.base_dir}")
        return target
