"""Class-guided MixStyle.

Per-channel feature statistics of each sample are interpolated with those of
a reference sample drawn from the same batch. The reference is chosen by a
permutation that, in the default ``class_guided`` mode, only pairs samples
sharing a label so bona fide and attack styles are never exchanged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig
from .types import check_feature_map

PERMUTATION_MODES = ("class_guided", "random", "cross_domain")


class ChannelStats(NamedTuple):
    mu: torch.Tensor  # [B, C]
    sigma: torch.Tensor  # [B, C]


@dataclass(frozen=True)
class MixWeights:
    lam: torch.Tensor  # [B]

    def __post_init__(self):
        lam = torch.as_tensor(self.lam)
        if lam.dim() != 1 or lam.numel() < 1:
            raise ValueError("mix weights must be a non-empty 1-D array")
        if not bool(((lam >= 0) & (lam <= 1)).all()):
            raise ValueError("mix weights must lie in [0, 1]")
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class ReferencePermutation:
    indices: np.ndarray
    mode: str

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or not np.array_equal(np.sort(idx), np.arange(idx.size)):
            raise ValueError(f"indices are not a permutation of 0..{idx.size - 1}")
        if self.mode not in PERMUTATION_MODES:
            raise ValueError(f"unknown permutation mode {self.mode!r}")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.indices.size


def compute_channel_stats(x: torch.Tensor, eps: float = 1e-6, unbiased: bool = False) -> ChannelStats:
    """Spatial mean and ``sqrt(var + eps)`` for every (sample, channel)."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    check_feature_map(x)
    if unbiased and x.shape[2] * x.shape[3] < 2:
        raise ValueError("unbiased variance needs at least two spatial positions")
    mu = x.mean(dim=(2, 3))
    var = x.var(dim=(2, 3), unbiased=unbiased)
    return ChannelStats(mu, (var + eps).sqrt())


def _as_numpy_int(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a).astype(np.int64)


def _cross_domain_indices(tags: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Samples are laid out grouped by domain (random group order, shuffled
    # within groups) and every position is mapped to the one `m` steps ahead,
    # m = largest group size. If m <= B/2 this never lands in the source group.
    b = tags.size
    domains = rng.permutation(np.unique(tags))
    groups = [rng.permutation(np.flatnonzero(tags == d)) for d in domains]
    sizes = [g.size for g in groups]
    m = max(sizes)
    indices = np.arange(b)
    if m <= b - m:
        order = np.concatenate(groups)
        indices[order] = order[(np.arange(b) + m) % b]
        return indices
    # One domain holds the majority: swap every minority sample with a distinct
    # majority sample and leave the surplus majority samples on themselves.
    big = groups[int(np.argmax(sizes))]
    others = rng.permutation(np.concatenate([g for g in groups if g is not big]))
    partners = big[: others.size]
    indices[others] = partners
    indices[partners] = others
    return indices


def make_reference_permutation(labels, mode: str = "class_guided", domain_tags=None,
                               rng: Optional[np.random.Generator] = None) -> ReferencePermutation:
    """Choose, for every sample, the batch member whose statistics it mixes with.

    ``class_guided`` shuffles within each label group (a singleton class maps
    to itself); ``random`` is an unconstrained uniform permutation;
    ``cross_domain`` maps each sample to one from a different domain wherever
    the domain sizes allow it.
    """
    rng = np.random.default_rng() if rng is None else rng
    labels = _as_numpy_int(labels)
    b = labels.size
    if b < 1:
        raise ValueError("empty batch")
    if mode == "random":
        return ReferencePermutation(rng.permutation(b), mode)
    if mode == "class_guided":
        indices = np.arange(b)
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            indices[members] = members[rng.permutation(members.size)]
        return ReferencePermutation(indices, mode)
    if mode == "cross_domain":
        if domain_tags is None:
            raise ValueError("cross_domain mode requires domain tags")
        tags = _as_numpy_int(domain_tags)
        if tags.size != b:
            raise ValueError(f"{tags.size} domain tags for a batch of {b}")
        if np.unique(tags).size < 2:
            raise ValueError("cross_domain mode requires at least two distinct domains in the batch")
        return ReferencePermutation(_cross_domain_indices(tags, rng), mode)
    raise ValueError(f"unknown permutation mode {mode!r}")


def sample_mix_weights(batch_size: int, beta_alpha: float, rng: np.random.Generator) -> MixWeights:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if not beta_alpha > 0:
        raise ValueError("beta_alpha must be > 0")
    return MixWeights(torch.from_numpy(rng.beta(beta_alpha, beta_alpha, size=batch_size)))


def mix_statistics(x: torch.Tensor, perm, lam, eps: float = 1e-6,
                   stats_gradient_blocked: bool = True, unbiased: bool = False) -> torch.Tensor:
    """Re-style ``x`` with statistics interpolated towards its reference samples.

    ``out = gamma * (x - mu) / sigma + beta`` where gamma and beta blend the
    sample's own statistics with those of ``x[perm]`` using weight ``lam``.
    With ``stats_gradient_blocked`` the statistics are constants for autograd.
    """
    b = x.shape[0]
    indices = perm.indices if isinstance(perm, ReferencePermutation) else _as_numpy_int(perm)
    if indices.shape != (b,):
        raise ValueError(f"permutation of length {indices.size} for a batch of {b}")
    lam = lam.lam if isinstance(lam, MixWeights) else torch.as_tensor(lam)
    if lam.shape != (b,):
        raise ValueError(f"{lam.numel()} mix weights for a batch of {b}")

    mu, sigma = compute_channel_stats(x, eps, unbiased)
    if stats_gradient_blocked:
        mu, sigma = mu.detach(), sigma.detach()
    index = torch.from_numpy(indices).to(x.device)
    lam = lam.to(dtype=x.dtype, device=x.device).view(b, 1)
    gamma = lam * sigma + (1 - lam) * sigma[index]
    beta = lam * mu + (1 - lam) * mu[index]
    x_normed = (x - mu[:, :, None, None]) / sigma[:, :, None, None]
    return x_normed * gamma[:, :, None, None] + beta[:, :, None, None]


def cgmixstyle_forward(x: torch.Tensor, labels, cfg: ExperimentConfig, rng: np.random.Generator,
                       training: bool, domain_tags=None, lam=None) -> torch.Tensor:
    """Apply the mixing layer as configured; identity outside training.

    ``lam`` overrides the Beta draw (used to pin the identity case in tests).
    """
    if not training or cfg.shuffle_mode == "off":
        return x
    if cfg.shuffle_mode == "class_guided" and labels is None:
        raise ValueError("class_guided mixing needs the batch labels")
    b = x.shape[0]
    if cfg.mix_activation == "per_batch":
        if rng.random() >= cfg.mix_probability:
            return x
        active = None
    else:
        active = rng.random(b) < cfg.mix_probability
        if not active.any():
            return x
    if labels is None:
        labels = np.zeros(b, dtype=np.int64)
    perm = make_reference_permutation(labels, cfg.shuffle_mode, domain_tags, rng)
    if lam is None:
        weights = sample_mix_weights(b, cfg.beta_alpha, rng).lam
    else:
        weights = torch.as_tensor(lam, dtype=torch.float64).expand(b).clone()
    if active is not None:
        weights[torch.from_numpy(~active)] = 1.0
    return mix_statistics(x, perm, weights, cfg.stats_eps, True, cfg.unbiased_variance)


class CGMixStyle(nn.Module):
    """Parameter-free module wrapper around :func:`cgmixstyle_forward`."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, x, labels=None, rng=None, domain_tags=None):
        if not self.training or self.cfg.shuffle_mode == "off":
            return x
        if rng is None:
            raise ValueError("an explicit numpy Generator is required in training mode")
        return cgmixstyle_forward(x, labels, self.cfg, rng, True, domain_tags)

    def extra_repr(self):
        return f"mode={self.cfg.shuffle_mode}, p={self.cfg.mix_probability}, alpha={self.cfg.beta_alpha}"
