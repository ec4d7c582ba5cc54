# src/core/__init__.py

from .exceptions import (
    HSVFError, ConfigError, CheckpointError, PrerequisiteError, DataError, ValidationError, ShapeError,
    UnfittedModelError, InsufficientCorpusError, NumericalError
)
from .data_model import Image, SemanticMask, HazeParams, ScenePair, CLASS_NAMES, NUM_CLASSES, IGNORE_LABEL

__all__ = [
    'HSVFError',
    'ConfigError',
    'CheckpointError',
    'PrerequisiteError',
    'DataError',
    'ValidationError',
    'ShapeError',
    'UnfittedModelError',
    'InsufficientCorpusError',
    'NumericalError',
    'Image',
    'SemanticMask',
    'HazeParams',
    'ScenePair',
    'CLASS_NAMES',
    'NUM_CLASSES',
    'IGNORE_LABEL',
]
