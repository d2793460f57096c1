"""Value types shared across the package.

Labels follow one convention everywhere: bona fide = 1, attack = 0, and
scores are oriented so that higher means more bona fide.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

BONAFIDE = 1
ATTACK = 0


class NonFiniteError(ValueError):
    """A tensor that must be finite holds NaN or infinity."""


def _require(ok: bool, msg: str, exc: type[ValueError] = ValueError):
    if not ok:
        raise exc(msg)


def check_feature_map(x: torch.Tensor) -> torch.Tensor:
    """Validate a [B, C, H, W] activation block."""
    _require(x.dim() == 4, f"feature map must be 4-D, got shape {tuple(x.shape)}")
    _require(all(s >= 1 for s in x.shape), f"feature map has an empty dimension: {tuple(x.shape)}")
    _require(bool(torch.isfinite(x).all()), "feature map contains non-finite values", NonFiniteError)
    return x


def check_embedding(z: torch.Tensor) -> torch.Tensor:
    _require(z.dim() == 2, f"embedding must be [B, D], got shape {tuple(z.shape)}")
    _require(z.shape[0] >= 1 and z.shape[1] >= 2, f"embedding needs B >= 1 and D >= 2, got {tuple(z.shape)}")
    _require(bool(torch.isfinite(z).all()), "embedding contains non-finite values", NonFiniteError)
    return z


def check_logits(y: torch.Tensor) -> torch.Tensor:
    _require(y.dim() == 2 and y.shape[1] == 2, f"logits must be [B, 2], got shape {tuple(y.shape)}")
    _require(bool(torch.isfinite(y).all()), "logits contain non-finite values", NonFiniteError)
    return y


def check_labels(labels) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    _require(labels.dim() == 1 and labels.numel() >= 1, "labels must be a non-empty 1-D array")
    _require(not labels.is_floating_point(), "labels must be integers")
    _require(bool(((labels == 0) | (labels == 1)).all()), "labels must be 0 (attack) or 1 (bona fide)")
    return labels.long()


@dataclass(frozen=True)
class LabeledBatch:
    images: torch.Tensor
    labels: torch.Tensor
    domain_tags: Optional[torch.Tensor] = None
    video_ids: Optional[Sequence[str]] = None

    def __post_init__(self):
        _require(self.images.dim() == 4 and self.images.shape[1] == 3,
                 f"images must be [B, 3, H, W], got {tuple(self.images.shape)}")
        labels = check_labels(self.labels)
        object.__setattr__(self, "labels", labels)
        b = self.images.shape[0]
        _require(labels.shape[0] == b, f"{labels.shape[0]} labels for {b} images")
        if self.domain_tags is not None:
            tags = torch.as_tensor(self.domain_tags).long()
            _require(tags.shape == (b,), f"domain_tags must have length {b}")
            object.__setattr__(self, "domain_tags", tags)
        if self.video_ids is not None:
            _require(len(self.video_ids) == b, f"video_ids must have length {b}")

    def __len__(self):
        return self.images.shape[0]


@dataclass(frozen=True)
class ScoreRecord:
    video_id: str
    frame_id: int
    score: float
    label: int

    def __post_init__(self):
        _require(isinstance(self.video_id, str) and self.video_id != "", "video_id must be a non-empty string")
        _require(isinstance(self.frame_id, int) and self.frame_id >= 0, f"frame_id must be an integer >= 0, got {self.frame_id!r}")
        _require(0.0 <= self.score <= 1.0, f"score must lie in [0, 1], got {self.score!r}")
        _require(self.label in (0, 1), f"label must be 0 or 1, got {self.label!r}")
