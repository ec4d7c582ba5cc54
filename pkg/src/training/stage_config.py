# src/training/stage_config.py

"""
Config của một stage training.

File config dùng cú pháp dotenv (đọc bằng python-dotenv) với key lồng nhau nối bằng '__':
section COMMON áp dụng cho mọi stage, section ALIGN / RECON / FUSION / FINETUNE ghi đè cho stage tương ứng.
Biến môi trường HSVF_SEED ghi đè seed trong file.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import torch
from dotenv import dotenv_values

from .. import config
from ..core.exceptions import ConfigError
from ..networks.pipeline import NETWORK_FLAGS, LossWeights
from ..storage.checkpoint_store import STAGES

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}

# Số epoch mặc định theo stage (lịch rút gọn cho corpus tổng hợp 64x64)
DEFAULT_EPOCHS = {"align": 20, "recon": 40, "fusion": 40, "finetune": 20}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


@dataclass(frozen=True)
class FusionLossOptions:
    luminance: bool = False
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int
    batch_size: int = 4
    learning_rate: float = 2e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    train_manifest: Path = Path(config.DATA_DIR) / "train.jsonl"
    val_manifest: Path = Path(config.DATA_DIR) / "val.jsonl"
    ckpt_dir: Path = Path(config.CKPT_DIR)
    network_flags: Dict[str, Union[str, bool]] = field(default_factory=dict)
    fusion_loss: FusionLossOptions = field(default_factory=FusionLossOptions)
    decay_at: float = 0.6
    decay_factor: float = 0.5
    dtype: str = "float32"
    deterministic: bool = config.DETERMINISTIC
    device: str = config.DEVICE
    log_every: int = config.LOG_EVERY_STEPS
    prefetch: int = config.PREFETCH_BATCHES

    def validate(self, check_paths: bool = True):
        if self.stage not in STAGES:
            raise ConfigError(f"Stage không hợp lệ: '{self.stage}' (hợp lệ: {STAGES})")
        if self.epochs < 1:
            raise ConfigError(f"epochs phải >= 1, nhận được {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size phải >= 1, nhận được {self.batch_size}")
        if self.log_every < 1:
            raise ConfigError(f"log_every phải >= 1, nhận được {self.log_every}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate phải > 0, nhận được {self.learning_rate}")
        if not 0.0 < self.decay_at <= 1.0 or not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_at/decay_factor phải trong (0, 1]: {self.decay_at}, {self.decay_factor}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype phải thuộc {tuple(DTYPES)}, nhận được '{self.dtype}'")
        unknown = set(self.network_flags) - set(NETWORK_FLAGS)
        if unknown:
            raise ConfigError(f"Cờ ablation không hợp lệ: {sorted(unknown)}")
        self._validate_flags()
        if check_paths:
            for path in (self.train_manifest, self.val_manifest):
                if not Path(path).exists():
                    raise ConfigError(f"Manifest không tồn tại: {path}")

    def _validate_flags(self):
        flags = self.network_flags
        modalities = flags.get("align_modalities", "both")
        if modalities not in ("both", "vis", "nir"):
            raise ConfigError(f"align_modalities phải là both/vis/nir, nhận được '{modalities}'")
        if modalities != "both" and (flags.get("content_align", True) or flags.get("recon", True)):
            raise ConfigError(
                f"align_modalities='{modalities}' chỉ có một nhánh: phải tắt content_align và recon"
            )
        if flags.get("discriminator", "region") not in ("region", "image"):
            raise ConfigError(f"discriminator phải là region/image, nhận được '{flags['discriminator']}'")
        if self.stage in ("fusion",) and self.weights.beta_fusion == 0:
            raise ConfigError("Stage fusion với beta_fusion = 0 không huấn luyện gì")
        if self.stage == "recon" and self.weights.alpha_recon == 0:
            raise ConfigError("Stage recon với alpha_recon = 0 không huấn luyện gì")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def resolve_device(self) -> torch.device:
        if self.device == "auto":
            return torch.device("cuda" if torch.cuda.is_available() else "cpu")
        return torch.device(self.device)

    def with_overrides(self, **changes) -> "StageConfig":
        return replace(self, **changes)


# ==============================================================================
# Đọc / ghi file config
# ==============================================================================

def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ConfigError(f"{key}: giá trị boolean không hợp lệ '{raw}'")


def _parse_number(key: str, raw: str, kind):
    try:
        return kind(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: không chuyển được '{raw}' sang {kind.__name__}") from e


def _nested(values: Mapping[str, Optional[str]]) -> Dict[str, Dict[str, str]]:
    sections: Dict[str, Dict[str, str]] = {}
    for key, value in values.items():
        if value is None:
            continue
        if "__" not in key:
            raise ConfigError(f"Key '{key}' thiếu section (dạng SECTION__KEY)")
        section, name = key.split("__", 1)
        sections.setdefault(section.upper(), {})[name.upper()] = value
    return sections


_STAGE_KEYS = {"EPOCHS": int, "BATCH_SIZE": int, "LEARNING_RATE": float}
_COMMON_KEYS = {"SEED": int, "BATCH_SIZE": int, "LEARNING_RATE": float, "DECAY_AT": float,
                "DECAY_FACTOR": float, "DTYPE": str, "DEVICE": str, "DETERMINISTIC": bool, "LOG_EVERY": int}
_ABLATION_KEYS = {"ALIGN_MODALITIES": str, "CONTENT_ALIGN": bool, "RECON": bool, "DISCRIMINATOR": str,
                  "SEMANTIC_CONDITIONING": bool, "SELF_ATTENTION": bool, "CROSS_ATTENTION": bool}
_WEIGHT_KEYS = ("LAMBDA_ALIGN", "ALPHA_RECON", "BETA_FUSION", "ALPHA1_FINAL", "BETA1_FINAL")


def _typed(section: str, values: Dict[str, str], schema: Mapping[str, type]) -> Dict[str, object]:
    out = {}
    for name, raw in values.items():
        key = f"{section}__{name}"
        if name not in schema:
            raise ConfigError(f"Key không được hỗ trợ: {key}")
        kind = schema[name]
        if kind is bool:
            out[name] = _parse_bool(key, raw)
        elif kind is str:
            out[name] = raw.strip()
        else:
            out[name] = _parse_number(key, raw, kind)
    return out


def load_stage_config(path: Union[str, Path], stage: str, check_paths: bool = True) -> StageConfig:
    """
    Đọc file config cho một stage.

    Raises:
        ConfigError: file không tồn tại, key/giá trị không hợp lệ, hoặc cờ mâu thuẫn với stage.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Không tìm thấy file config: {path}")
    if stage not in STAGES:
        raise ConfigError(f"Stage không hợp lệ: '{stage}' (hợp lệ: {STAGES})")
    sections = _nested(dotenv_values(path))

    known = {"COMMON", "DATA", "WEIGHTS", "ABLATION", "FUSION_LOSS"} | {s.upper() for s in STAGES}
    unknown = set(sections) - known
    if unknown:
        raise ConfigError(f"Section không được hỗ trợ: {sorted(unknown)}")

    common = _typed("COMMON", sections.get("COMMON", {}), _COMMON_KEYS)
    stage_values = _typed(stage.upper(), sections.get(stage.upper(), {}), _STAGE_KEYS)
    merged = {**common, **stage_values}

    weights_raw = _typed("WEIGHTS", sections.get("WEIGHTS", {}), {k: float for k in _WEIGHT_KEYS})
    weights = LossWeights(**{k.lower(): v for k, v in weights_raw.items()})

    ablation = _typed("ABLATION", sections.get("ABLATION", {}), _ABLATION_KEYS)
    network_flags = {k.lower(): v for k, v in ablation.items()}

    fusion_raw = _typed("FUSION_LOSS", sections.get("FUSION_LOSS", {}),
                        {"LUMINANCE": bool, "W_SSIM": float, "W_TEXTURE": float, "W_INTENSITY": float})
    fusion_options = FusionLossOptions(
        luminance=fusion_raw.get("LUMINANCE", False),
        weights=(fusion_raw.get("W_SSIM", 1.0), fusion_raw.get("W_TEXTURE", 1.0), fusion_raw.get("W_INTENSITY", 1.0)),
    )

    data = sections.get("DATA", {})
    unknown_data = set(data) - {"TRAIN", "VAL", "CKPT_DIR"}
    if unknown_data:
        raise ConfigError(f"Key DATA không được hỗ trợ: {sorted(unknown_data)}")

    seed = merged.get("SEED", 0)
    env_seed = os.getenv(config.SEED_ENV_VAR)
    if env_seed:
        seed = _parse_number(config.SEED_ENV_VAR, env_seed, int)
        logger.info(f"{config.SEED_ENV_VAR}={seed} ghi đè seed trong config")

    stage_config = StageConfig(
        stage=stage,
        epochs=merged.get("EPOCHS", DEFAULT_EPOCHS[stage]),
        batch_size=merged.get("BATCH_SIZE", 4),
        learning_rate=merged.get("LEARNING_RATE", 2e-4),
        seed=seed,
        weights=weights,
        train_manifest=Path(data.get("TRAIN", Path(config.DATA_DIR) / "train.jsonl")),
        val_manifest=Path(data.get("VAL", Path(config.DATA_DIR) / "val.jsonl")),
        ckpt_dir=Path(data.get("CKPT_DIR", config.CKPT_DIR)),
        network_flags=network_flags,
        fusion_loss=fusion_options,
        decay_at=merged.get("DECAY_AT", 0.6),
        decay_factor=merged.get("DECAY_FACTOR", 0.5),
        dtype=merged.get("DTYPE", "float32"),
        deterministic=merged.get("DETERMINISTIC", config.DETERMINISTIC),
        device=merged.get("DEVICE", config.DEVICE),
        log_every=merged.get("LOG_EVERY", config.LOG_EVERY_STEPS),
    )
    stage_config.validate(check_paths=check_paths)
    logger.debug(f"Config stage '{stage}': {stage_config}")
    return stage_config


DEFAULT_CONFIG_TEXT = """\
# Config training, cú pháp dotenv, key lồng nhau SECTION__KEY.
# Section của stage (ALIGN/RECON/FUSION/FINETUNE) ghi đè COMMON. HSVF_SEED ghi đè COMMON__SEED.

COMMON__SEED=0
COMMON__BATCH_SIZE=4
# Adam, betas (0.5, 0.999); lr giảm x0.5 ở 60% số epoch
COMMON__LEARNING_RATE=2e-4
COMMON__DECAY_AT=0.6
COMMON__DECAY_FACTOR=0.5
# float64 cho kiểm tra tái lập chặt
COMMON__DTYPE=float32
COMMON__DETERMINISTIC=true
COMMON__DEVICE=auto
COMMON__LOG_EVERY=10

DATA__TRAIN={data_dir}/train.jsonl
DATA__VAL={data_dir}/val.jsonl
DATA__CKPT_DIR={ckpt_dir}

# Lịch gốc trên dữ liệu thật: 200 / 400 / 400 / 200 epoch
ALIGN__EPOCHS=20
RECON__EPOCHS=40
FUSION__EPOCHS=40
FINETUNE__EPOCHS=20

# Trọng số tổng loss, đặt theo kinh nghiệm: 1, 0.1, 0.01, 1, 0.1
WEIGHTS__LAMBDA_ALIGN=1
WEIGHTS__ALPHA_RECON=0.1
WEIGHTS__BETA_FUSION=0.01
WEIGHTS__ALPHA1_FINAL=1
WEIGHTS__BETA1_FINAL=0.1

# Ablation: both|vis|nir; region|image
ABLATION__ALIGN_MODALITIES=both
ABLATION__CONTENT_ALIGN=true
ABLATION__RECON=true
ABLATION__DISCRIMINATOR=region
ABLATION__SEMANTIC_CONDITIONING=true
ABLATION__SELF_ATTENTION=true
ABLATION__CROSS_ATTENTION=true

FUSION_LOSS__LUMINANCE=false
FUSION_LOSS__W_SSIM=1
FUSION_LOSS__W_TEXTURE=1
FUSION_LOSS__W_INTENSITY=1
"""


def write_default_config(path: Union[str, Path], data_dir: Union[str, Path] = config.DATA_DIR,
                         ckpt_dir: Union[str, Path] = config.CKPT_DIR) -> Path:
    path = Path(path)
    text = DEFAULT_CONFIG_TEXT.format(data_dir=Path(data_dir).as_posix(), ckpt_dir=Path(ckpt_dir).as_posix())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Không thể ghi config {path}: {e}") from e
    logger.info(f"Đã ghi config mặc định vào {path}")
    return path
