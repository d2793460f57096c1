"""Backbone + classifier with mixing insertion points and the two forward paths.

Training runs the factual path (with CGMixStyle after the configured stages)
plus a gradient-free counterfactual pass through the shared classifier.
Inference runs the plain backbone and classifier only.
"""
from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn
import torchvision

from .config import ExperimentConfig, config_to_text, parse_config_text
from .counterfactual import InterventionSpec, intervene, select_intervention
from .mixstyle import CGMixStyle
from .types import LabeledBatch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cfpad-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ResNet18Extractor(nn.Module):
    """Four-stage ResNet-18 trunk ending in global average pooling (D = 512)."""

    embedding_dim = 512

    def __init__(self):
        super().__init__()
        net = torchvision.models.resnet18(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleDict({
            "stage1": net.layer1, "stage2": net.layer2,
            "stage3": net.layer3, "stage4": net.layer4,
        })
        self.pool = nn.AdaptiveAvgPool2d(1)

    def load_torchvision_weights(self, path: str | Path) -> None:
        """Load a torchvision ``resnet18`` state dict (the ``fc`` entries are skipped)."""
        state = torch.load(path, map_location="cpu", weights_only=True)
        mapped = {}
        for key, value in state.items():
            head, _, rest = key.partition(".")
            if head in ("conv1", "bn1"):
                mapped[f"stem.{0 if head == 'conv1' else 1}.{rest}"] = value
            elif head.startswith("layer"):
                mapped[f"stages.stage{head[5:]}.{rest}"] = value
        missing, unexpected = self.load_state_dict(mapped, strict=False)
        if missing or unexpected:
            raise CheckpointError(f"pretrained weights do not fit ResNet-18: missing={missing}, unexpected={unexpected}")


class ToyExtractor(nn.Module):
    """Two conv stages and D = 16, for CPU-speed experiments and gradient checks."""

    def __init__(self, width: int = 8, embedding_dim: int = 16):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.stem = nn.Identity()
        self.stages = nn.ModuleDict({
            "stage1": nn.Sequential(
                nn.Conv2d(3, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True),
                nn.MaxPool2d(2)),
            "stage2": nn.Sequential(
                # no affine on the last norm: a free gain here and the classifier weights
                # grow together without bound on separable data
                nn.Conv2d(width, embedding_dim, 3, padding=1, bias=False),
                nn.BatchNorm2d(embedding_dim, affine=False), nn.ReLU(inplace=True)),
        })
        self.pool = nn.AdaptiveAvgPool2d(1)


def build_extractor(name: str) -> nn.Module:
    if name == "resnet18":
        return ResNet18Extractor()
    if name == "toy":
        return ToyExtractor()
    raise ValueError(f"unknown backbone {name!r}")


class PadModel(nn.Module):
    """Feature extractor, 2-way affine classifier and parameter-free mixers.

    Mixing layers sit after each configured stage that the backbone actually
    has (the toy backbone only has stage1 and stage2).
    """

    def __init__(self, cfg: ExperimentConfig, extractor: Optional[nn.Module] = None):
        super().__init__()
        self.cfg = cfg
        self.feature_extractor = extractor if extractor is not None else build_extractor(cfg.backbone)
        self.embedding_dim = self.feature_extractor.embedding_dim
        self.classifier = nn.Linear(self.embedding_dim, 2)
        points = [p for p in cfg.mix_insertion_points if p in self.feature_extractor.stages]
        self.mixers = nn.ModuleDict({p: CGMixStyle(cfg) for p in points})

    @property
    def mix_insertion_points(self) -> tuple[str, ...]:
        return tuple(self.mixers.keys())

    def embed(self, images: torch.Tensor, labels=None, rng=None, domain_tags=None,
              mix: bool = True, cfg: Optional[ExperimentConfig] = None) -> torch.Tensor:
        cfg = cfg or self.cfg
        fe = self.feature_extractor
        x = fe.stem(images)
        for name, stage in fe.stages.items():
            x = stage(x)
            if mix and self.training and name in self.mixers and cfg.mixing_enabled:
                mixer = self.mixers[name]
                if cfg is not mixer.cfg:
                    mixer = CGMixStyle(cfg)
                x = mixer(x, labels, rng, domain_tags)
        return torch.flatten(fe.pool(x), 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Plain logits with no mixing; what inference uses."""
        return self.classifier(self.embed(images, mix=False))

    def backbone_parameters(self):
        return self.feature_extractor.parameters()

    def classifier_parameters(self):
        return self.classifier.parameters()


def build_model(cfg: ExperimentConfig, seed: Optional[int] = None) -> PadModel:
    """Construct a model with weights initialised from ``seed`` (default ``cfg.seed``).

    Random initialisation follows torchvision's ResNet scheme (Kaiming-normal
    convolutions, unit BatchNorm) and PyTorch's default for the classifier.
    ``cfg.pretrained_weights`` names a local torchvision ResNet-18 state dict
    that replaces the random trunk weights when set.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed if seed is None else seed)
        model = PadModel(cfg)
    if cfg.pretrained_weights:
        if cfg.backbone != "resnet18":
            raise ValueError("pretrained weights are only supported for the resnet18 backbone")
        model.feature_extractor.load_torchvision_weights(cfg.pretrained_weights)
        log.info("loaded pretrained backbone weights from %s", cfg.pretrained_weights)
    return model


class TrainForward(NamedTuple):
    y: torch.Tensor
    y_bar: torch.Tensor
    z: torch.Tensor


def forward_train(model: PadModel, batch: LabeledBatch, cfg: ExperimentConfig,
                  rng: np.random.Generator, spec: Optional[InterventionSpec] = None) -> TrainForward:
    """Factual logits ``y``, counterfactual logits ``y_bar`` and embedding ``z``.

    ``y_bar`` is computed without gradient through the shared classifier.
    With interventions off, ``y_bar`` is a detached copy of ``y`` so the effect
    logits are exactly zero.
    """
    if not model.training:
        raise RuntimeError("forward_train needs the model in training mode")
    z = model.embed(batch.images, batch.labels, rng, batch.domain_tags, mix=True, cfg=cfg)
    y = model.classifier(z)
    if not cfg.intervention_enabled:
        return TrainForward(y, y.detach(), z)
    if spec is None:
        spec = select_intervention(cfg.intervention_mode, rng, cfg.intervention_degree)
    z_bar = intervene(z, spec, rng, partial_shuffle=cfg.partial_shuffle,
                      across_batch=cfg.shuffle_scope == "across_batch")
    with torch.no_grad():
        y_bar = model.classifier(z_bar)
    return TrainForward(y, y_bar, z)


def forward_infer(model: PadModel, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Bona fide probability per image; deterministic, no mixing or intervention."""
    if model.training:
        raise RuntimeError("forward_infer needs the model in inference mode (call model.eval())")
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"images must be [B, 3, H, W], got {tuple(images.shape)}")
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = model(images[start:start + batch_size])
            # float64 keeps well-separated scores from all rounding to exactly 0 or 1
            out.append(torch.softmax(logits.double(), dim=1)[:, 1])
    return torch.cat(out) if out else images.new_zeros(0, dtype=torch.float64)


@torch.no_grad()
def infer_embeddings(model: PadModel, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    if model.training:
        raise RuntimeError("infer_embeddings needs the model in inference mode")
    return torch.cat([model.embed(images[s:s + batch_size], mix=False)
                      for s in range(0, images.shape[0], batch_size)])


# -- checkpoints ---------------------------------------------------------------
#
# A checkpoint is a torch zip container holding one dict:
#   format: "cfpad-checkpoint", version: 1,
#   config: the full ExperimentConfig in the flat key/value text format,
#   backbone: name, embedding_dim: D, epoch: int,
#   state_dict: weight arrays keyed by layer path (e.g. "classifier.weight").

def save_checkpoint(path: str | Path, model: PadModel, cfg: ExperimentConfig, epoch: int = -1) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_text(cfg),
        "backbone": cfg.backbone,
        "embedding_dim": model.embedding_dim,
        "epoch": epoch,
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[PadModel, ExperimentConfig, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for bad files
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    cfg = parse_config_text(payload["config"]).replace(pretrained_weights="")
    model = PadModel(cfg)
    state = payload["state_dict"]
    w = state.get("classifier.weight")
    if w is None or w.shape[1] != model.embedding_dim or payload.get("embedding_dim") != model.embedding_dim:
        got = None if w is None else w.shape[1]
        raise CheckpointError(
            f"{path}: embedding dimension mismatch: checkpoint classifier takes D={got}, "
            f"backbone {cfg.backbone!r} produces D={model.embedding_dim}")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the configured model: {exc}") from exc
    model.eval()
    return model, cfg, {k: payload[k] for k in ("backbone", "embedding_dim", "epoch")}
