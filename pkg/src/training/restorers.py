# src/training/restorers.py

"""
Restorer: thứ biến một cặp haze thành ảnh đã khử sương, để evaluate chấm điểm cùng một cách
cho network đã huấn luyện và cho baseline đồng nhất (output = input).
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Type, Union

import torch

from ..core.data_model import Image, ScenePair, SemanticMask
from ..core.exceptions import ConfigError
from ..networks.pipeline import build_network, infer
from ..storage.checkpoint_store import CheckpointStore

logger = logging.getLogger(__name__)


@dataclass
class Restoration:
    final: Image
    sr: Optional[Image] = None
    vf: Optional[Image] = None
    segmentation: Optional[SemanticMask] = None

    def streams(self) -> Dict[str, Image]:
        return {name: image for name, image in (("sr", self.sr), ("vf", self.vf)) if image is not None}


class Restorer(ABC):
    name = "base"

    @abstractmethod
    def restore(self, pair: ScenePair) -> Restoration:
        pass


class IdentityRestorer(Restorer):
    """Trả lại ảnh visible haze nguyên vẹn."""
    name = "identity"

    def restore(self, pair: ScenePair) -> Restoration:
        return Restoration(final=pair.visible)


class HSVFRestorer(Restorer):
    """Network đầy đủ nạp từ thư mục checkpoint, chạy ở eval mode dưới no_grad."""
    name = "hsvf"

    def __init__(self, ckpt_dir: Union[str, Path], device: Union[str, torch.device] = "cpu",
                 dtype: torch.dtype = torch.float32):
        store = CheckpointStore(ckpt_dir)
        self.network = build_network(store.network_flags(), dtype=dtype)
        self.loaded_stages = store.load_for_inference(self.network)
        self.device = torch.device(device)
        self.network.to(self.device).eval()
        logger.info(f"HSVFRestorer: nạp {self.loaded_stages} từ {ckpt_dir}")

    def restore(self, pair: ScenePair) -> Restoration:
        result = infer(self.network, pair, device=self.device)
        return Restoration(final=result.final, sr=result.sr, vf=result.vf, segmentation=result.segmentation)


_RESTORERS: Dict[str, Type[Restorer]] = {
    IdentityRestorer.name: IdentityRestorer,
    HSVFRestorer.name: HSVFRestorer,
}


def create_restorer(name: str, **kwargs) -> Restorer:
    """
    Factory cho restorer.

    Args:
        name: 'hsvf' hoặc 'identity'
        **kwargs: tham số của restorer (ckpt_dir, device cho 'hsvf')
    """
    restorer_cls = _RESTORERS.get(name)
    if restorer_cls is None:
        raise ConfigError(f"Restorer không được hỗ trợ: '{name}' (hợp lệ: {sorted(_RESTORERS)})")
    if restorer_cls is IdentityRestorer:
        return IdentityRestorer()
    return restorer_cls(**kwargs)
