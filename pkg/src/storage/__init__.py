# src/storage/__init__.py

from .file_handlers import (
    BaseFileHandler, RGBImageHandler, GrayImageHandler, LabelMaskHandler, DepthMapHandler,
    JSONLinesHandler, JSONDocumentHandler, create_file_handler
)
from .manifest import ManifestEntry, read_manifest, write_manifest, load_pair, save_pair
from .checkpoint_store import CheckpointStore, STAGES

__all__ = [
    'BaseFileHandler',
    'RGBImageHandler',
    'GrayImageHandler',
    'LabelMaskHandler',
    'DepthMapHandler',
    'JSONLinesHandler',
    'JSONDocumentHandler',
    'create_file_handler',
    'ManifestEntry',
    'read_manifest',
    'write_manifest',
    'load_pair',
    'save_pair',
    'CheckpointStore',
    'STAGES',
]
