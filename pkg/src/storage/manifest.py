# src/storage/manifest.py

"""
Manifest JSON Lines của corpus và cặp thao tác load_pair / save_pair.

Mỗi dòng manifest: {id, vis, nir, mask?, depth?, condition, haze_params?, provenance?}.
Đường dẫn ảnh tương đối với thư mục chứa manifest.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from ..core.data_model import HazeParams, Image, ScenePair, SemanticMask
from ..core.exceptions import DataError
from .file_handlers import create_file_handler

logger = logging.getLogger(__name__)

_REQUIRED_KEYS = ("id", "vis", "nir", "condition")


@dataclass
class ManifestEntry:
    id: str
    vis: str
    nir: str
    condition: str
    mask: Optional[str] = None
    depth: Optional[str] = None
    haze_params: Optional[Dict[str, Any]] = None
    provenance: str = "synthetic"
    # Không serialize: thư mục gốc để resolve đường dẫn tương đối
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "id": self.id,
            "vis": self.vis,
            "nir": self.nir,
            "condition": self.condition,
        }
        if self.mask is not None:
            record["mask"] = self.mask
        if self.depth is not None:
            record["depth"] = self.depth
        if self.haze_params is not None:
            record["haze_params"] = self.haze_params
        if self.provenance != "synthetic":
            record["provenance"] = self.provenance
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any], base_dir: Path) -> "ManifestEntry":
        missing = [k for k in _REQUIRED_KEYS if k not in record]
        if missing:
            raise DataError(f"Manifest entry thiếu key {missing}: {record}")
        return cls(
            id=str(record["id"]),
            vis=record["vis"],
            nir=record["nir"],
            condition=record["condition"],
            mask=record.get("mask"),
            depth=record.get("depth"),
            haze_params=record.get("haze_params"),
            provenance=record.get("provenance", "synthetic"),
            base_dir=Path(base_dir),
        )

    def resolve(self, relative: str) -> Path:
        return self.base_dir / relative


def read_manifest(manifest_path: Union[str, Path]) -> List[ManifestEntry]:
    """Đọc manifest JSONL; base_dir của mỗi entry là thư mục chứa manifest."""
    manifest_path = Path(manifest_path)
    records = create_file_handler(manifest_path, "jsonl").read()
    entries = [ManifestEntry.from_record(r, manifest_path.parent) for r in records]
    logger.debug(f"Đọc {len(entries)} entry từ {manifest_path}")
    return entries


def write_manifest(entries: List[ManifestEntry], manifest_path: Union[str, Path]):
    create_file_handler(Path(manifest_path), "jsonl").write([e.to_record() for e in entries])
    logger.info(f"Đã ghi manifest {manifest_path} ({len(entries)} entry)")


def load_pair(entry: ManifestEntry) -> ScenePair:
    """
    Đọc một ScenePair từ các file mà entry tham chiếu.

    Raises:
        DataError: file thiếu, sai format, hai modality khác kích thước hoặc nhãn không hợp lệ.
    """
    visible = Image(create_file_handler(entry.resolve(entry.vis), "rgb").read())
    nir = Image(create_file_handler(entry.resolve(entry.nir), "gray").read())
    mask = None
    if entry.mask is not None:
        mask = SemanticMask(create_file_handler(entry.resolve(entry.mask), "mask").read())
    depth = None
    if entry.depth is not None:
        depth = create_file_handler(entry.resolve(entry.depth), "depth").read()
    haze_params = HazeParams.from_dict(entry.haze_params) if entry.haze_params else None
    return ScenePair(
        id=entry.id,
        visible=visible,
        nir=nir,
        condition=entry.condition,
        mask=mask,
        depth=depth,
        haze_params=haze_params,
        provenance=entry.provenance,
    )


def save_pair(pair: ScenePair, directory: Union[str, Path]) -> ManifestEntry:
    """
    Ghi pair thành các file PNG trong directory và trả về ManifestEntry (đường dẫn tương đối).
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Không thể tạo thư mục {directory}: {e}") from e

    entry = ManifestEntry(
        id=pair.id,
        vis=f"{pair.id}_vis.png",
        nir=f"{pair.id}_nir.png",
        condition=pair.condition,
        haze_params=pair.haze_params.to_dict() if pair.haze_params else None,
        provenance=pair.provenance,
        base_dir=directory,
    )
    create_file_handler(entry.resolve(entry.vis), "rgb").write(pair.visible.pixels)
    create_file_handler(entry.resolve(entry.nir), "gray").write(pair.nir.pixels)
    if pair.mask is not None:
        entry.mask = f"{pair.id}_mask.png"
        create_file_handler(entry.resolve(entry.mask), "mask").write(pair.mask.labels)
    if pair.depth is not None:
        entry.depth = f"{pair.id}_depth.png"
        create_file_handler(entry.resolve(entry.depth), "depth").write(pair.depth)
    return entry


def load_manifest_pairs(manifest_path: Union[str, Path], condition: Optional[str] = None) -> List[ScenePair]:
    """Tiện ích: đọc toàn bộ pair của một manifest, có thể lọc theo condition."""
    entries = read_manifest(manifest_path)
    if condition is not None:
        entries = [e for e in entries if e.condition == condition]
    return [load_pair(e) for e in entries]
