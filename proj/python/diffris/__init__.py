"""Python access to the diffris C++ core.

Configurations are plain dicts shaped like the JSON run configuration
(sections backbones, cp_adapter, pcmrd, training, data, eval); missing keys
take their defaults.
"""

from __future__ import annotations

import json
from os import PathLike
from typing import Any, Mapping, Sequence

from . import _diffris
from ._diffris import (
    ContractViolation,
    Error,
    IoError,
    NumericError,
    ParameterError,
    ShapeError,
    UsageError,
    alpha_bars,
    emit_report,
    forward_diffuse,
    mask_iou,
    tokenize_words,
)

__all__ = [
    "ContractViolation",
    "Error",
    "IoError",
    "Model",
    "NumericError",
    "ParameterError",
    "ShapeError",
    "UsageError",
    "alpha_bars",
    "default_config",
    "emit_report",
    "evaluate",
    "forward_diffuse",
    "generate_samples",
    "generate_split",
    "gradcheck",
    "mask_iou",
    "summarize",
    "tokenize_words",
    "train",
    "validate_config",
]

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def _encode(config: Mapping[str, Any] | None) -> str:
    return json.dumps(dict(config)) if config else ""


def default_config() -> dict:
    return json.loads(_diffris.default_config())


def validate_config(config: Mapping[str, Any]) -> dict:
    """Returns the fully populated configuration or raises ParameterError."""
    return json.loads(_diffris.validate_config(_encode(config)))


def summarize(intersections: Sequence[int], unions: Sequence[int],
              thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> dict:
    return json.loads(_diffris.summarize(list(intersections), list(unions), list(thresholds)))


def generate_samples(n: int, seed: int, config: Mapping[str, Any] | None = None) -> list[dict]:
    samples = _diffris.generate_samples(n, seed, _encode(config))
    for s in samples:
        s["scene"] = json.loads(s["scene"])
    return samples


def generate_split(n: int, seed: int, out: str | PathLike, config: Mapping[str, Any] | None = None):
    return _diffris.generate_split(n, seed, _encode(config), out)


def train(data: str | PathLike, out: str | PathLike, config: Mapping[str, Any] | None = None) -> list[dict]:
    """Trains on a generated dataset directory; returns one record per epoch."""
    return [json.loads(e) for e in _diffris.train(_encode(config), data, out)]


def evaluate(checkpoint: str | PathLike, data: str | PathLike, split: str = "val",
             config: Mapping[str, Any] | None = None) -> dict:
    return json.loads(_diffris.evaluate(_encode(config), checkpoint, data, split))


def gradcheck(seed: int = 0) -> list[dict]:
    return list(_diffris.gradcheck(seed))


class Model(_diffris.Model):
    def __init__(self, config: Mapping[str, Any] | None = None):
        super().__init__(_encode(config))
