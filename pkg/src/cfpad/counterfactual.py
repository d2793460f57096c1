"""Counterfactual interventions on the pooled embedding and the effect loss.

An intervention produces a counterfactual embedding ``z_bar`` from ``z``; the
classifier's output on it is subtracted from the factual output and the
difference (the effect logits) is trained against the true label.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .types import check_embedding, check_labels, check_logits

INTERVENTION_KINDS = ("zero", "replace", "shuffle")


@dataclass(frozen=True)
class InterventionSpec:
    kind: str
    degree: float = 0.2

    def __post_init__(self):
        if self.kind not in INTERVENTION_KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if not (isinstance(self.degree, (int, float)) and 0.0 <= self.degree <= 1.0):
            raise ValueError(f"intervention degree must lie in [0, 1], got {self.degree!r}")

    def count(self, dim: int) -> int:
        """Number of coordinates touched per sample, ``floor(degree * dim)``."""
        # the tiny slack keeps e.g. 0.3 * 10 from flooring to 2
        return int(math.floor(self.degree * dim + 1e-9))


def _random_subsets(rng: np.random.Generator, b: int, d: int, k: int) -> np.ndarray:
    """[b, k] array; each row a uniformly random k-subset of range(d)."""
    return np.argsort(rng.random((b, d)), axis=1)[:, :k]


def intervene(z: torch.Tensor, spec: InterventionSpec, rng: np.random.Generator,
              partial_shuffle: bool = False, across_batch: bool = False) -> torch.Tensor:
    """Return a counterfactual copy of ``z``; ``z`` itself is never modified.

    zero: k random coordinates per sample set to 0.
    replace: k random coordinates per sample take the value of their previous
        neighbour (index i reads i-1, index 0 wraps to D-1), always read from
        the original vector.
    shuffle: each sample's coordinates permuted uniformly at random. With
        ``partial_shuffle`` only k chosen coordinates are permuted among
        themselves; with ``across_batch`` coordinate j of every sample is
        taken from a random other sample instead.
    """
    check_embedding(z)
    b, d = z.shape
    out = z.detach().clone()
    rows = np.arange(b)[:, None]
    if spec.kind == "shuffle":
        if across_batch:
            src = np.argsort(rng.random((b, d)), axis=0)
            return out[torch.from_numpy(src), torch.arange(d)]
        if partial_shuffle:
            idx = _random_subsets(rng, b, d, spec.count(d))
            shuffled = np.take_along_axis(idx, np.argsort(rng.random(idx.shape), axis=1), axis=1)
            row_idx = torch.from_numpy(np.repeat(rows, idx.shape[1], axis=1))
            out[row_idx, torch.from_numpy(idx)] = z.detach()[row_idx, torch.from_numpy(shuffled)]
            return out
        perm = np.argsort(rng.random((b, d)), axis=1)
        return torch.gather(out, 1, torch.from_numpy(perm).to(out.device))

    k = spec.count(d)
    if k == 0:
        return out
    idx = _random_subsets(rng, b, d, k)
    return zero_coordinates(z, idx) if spec.kind == "zero" else replace_coordinates(z, idx)


def _index_tensor(z: torch.Tensor, idx) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(idx, dtype=np.int64), device=z.device)
    if idx.dim() == 1:
        idx = idx.unsqueeze(0).expand(z.shape[0], -1)
    if idx.shape[0] != z.shape[0] or (idx.numel() and not bool(((idx >= 0) & (idx < z.shape[1])).all())):
        raise ValueError("coordinate indices do not fit the embedding")
    return idx


def zero_coordinates(z: torch.Tensor, idx) -> torch.Tensor:
    """Copy of ``z`` with the given coordinates set to 0 (``idx``: [k] or [B, k])."""
    return z.detach().clone().scatter_(1, _index_tensor(z, idx), 0.0)


def replace_coordinates(z: torch.Tensor, idx) -> torch.Tensor:
    """Copy of ``z`` where each listed coordinate i takes the original value at i-1 (0 wraps to D-1)."""
    idx = _index_tensor(z, idx)
    prev = torch.gather(z.detach(), 1, (idx - 1) % z.shape[1])
    return z.detach().clone().scatter_(1, idx, prev)


def select_intervention(mode: str, rng: np.random.Generator, degree: float = 0.2) -> InterventionSpec:
    """One intervention for a whole mini-batch; ``all`` draws a kind uniformly."""
    if mode == "off":
        raise ValueError("intervention mode 'off' has no intervention to select")
    if mode == "all":
        return InterventionSpec(INTERVENTION_KINDS[int(rng.integers(3))], degree)
    return InterventionSpec(mode, degree)


def counterfactual_effect(y: torch.Tensor, y_bar: torch.Tensor) -> torch.Tensor:
    if y.shape != y_bar.shape:
        raise ValueError(f"logit shapes differ: {tuple(y.shape)} vs {tuple(y_bar.shape)}")
    return y - y_bar


class LossParts(NamedTuple):
    total: torch.Tensor
    ce: torch.Tensor
    effect_ce: torch.Tensor


def loss_parts(y: torch.Tensor, y_bar: torch.Tensor, labels, lambda_w: float) -> LossParts:
    if lambda_w < 0:
        raise ValueError("loss weight must be >= 0")
    check_logits(y)
    check_logits(y_bar)
    labels = check_labels(labels).to(y.device)
    ce = F.cross_entropy(y, labels)
    effect_ce = F.cross_entropy(counterfactual_effect(y, y_bar.detach()), labels)
    return LossParts(ce + lambda_w * effect_ce, ce, effect_ce)


def total_loss(y: torch.Tensor, y_bar: torch.Tensor, labels, lambda_w: float = 2.0) -> torch.Tensor:
    """``CE(y) + lambda_w * CE(y - y_bar)``; ``y_bar`` is treated as a constant."""
    return loss_parts(y, y_bar, labels, lambda_w).total
