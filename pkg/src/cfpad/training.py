"""SGD training with a step learning-rate schedule, per-epoch evaluation and checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, TextIO

import numpy as np
import torch

from .config import ExperimentConfig, validate_config
from .counterfactual import loss_parts, select_intervention
from .data import ImageDataset, balanced_batches
from .metrics import EvaluationReport, evaluate_records
from .model import PadModel, forward_infer, forward_train, save_checkpoint
from .types import LabeledBatch, NonFiniteError, ScoreRecord

log = logging.getLogger(__name__)

TRAINLOG_FORMAT = "cfpad-trainlog"
HISTORY_FORMAT = "cfpad-history"
TRAINLOG_COLUMNS = ("epoch", "step", "ce", "effect_ce", "total", "lr_backbone", "intervention_kind")


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, ce: float, effect_ce: float, total: float):
        self.epoch, self.batch_index = epoch, batch_index
        self.components = {"ce": ce, "effect_ce": effect_ce, "total": total}
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}: "
                         f"ce={ce!r} effect_ce={effect_ce!r} total={total!r}")


def lr_schedule(epoch: int, cfg: ExperimentConfig) -> tuple[float, float]:
    """Base rates halved once for every halving epoch <= ``epoch`` (applied at epoch start)."""
    if not 0 <= epoch < cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    k = sum(1 for e in cfg.lr_halving_epochs if e <= epoch)
    factor = 0.5 ** k
    return cfg.lr_backbone * factor, cfg.lr_classifier * factor


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr_backbone: float = 0.0
    lr_classifier: float = 0.0
    rng_state: dict = field(default_factory=dict)
    best_metric: float = -math.inf


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    total: float
    ce: float
    effect_ce: float
    steps: int


def make_optimizer(model: PadModel, cfg: ExperimentConfig) -> torch.optim.SGD:
    """Two parameter groups (extractor, classifier) sharing momentum and L2 weight decay."""
    lr_b, lr_c = lr_schedule(0, cfg)
    return torch.optim.SGD(
        [{"params": list(model.backbone_parameters()), "lr": lr_b, "name": "backbone"},
         {"params": list(model.classifier_parameters()), "lr": lr_c, "name": "classifier"}],
        lr=lr_c, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def apply_lr(optimizer: torch.optim.Optimizer, lrs: tuple[float, float]) -> None:
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr


def train_epoch(model: PadModel, optimizer: torch.optim.Optimizer, batches: Iterable[LabeledBatch],
                cfg: ExperimentConfig, rng: np.random.Generator, epoch: int = 0, step: int = 0,
                log_file: Optional[TextIO] = None) -> EpochStats:
    model.train()
    sums = np.zeros(3)
    n = 0
    lr_b = optimizer.param_groups[0]["lr"]
    for i, batch in enumerate(batches):
        spec = None
        if cfg.intervention_enabled:
            spec = select_intervention(cfg.intervention_mode, rng, cfg.intervention_degree)
        try:
            out = forward_train(model, batch, cfg, rng, spec)
            parts = loss_parts(out.y, out.y_bar, batch.labels, cfg.loss_weight_lambda)
        except NonFiniteError as exc:
            nan = float("nan")
            raise NonFiniteLossError(epoch, i, nan, nan, nan) from exc
        values = [float(parts.total.detach()), float(parts.ce.detach()), float(parts.effect_ce.detach())]
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteLossError(epoch, i, values[1], values[2], values[0])
        optimizer.zero_grad(set_to_none=True)
        parts.total.backward()
        optimizer.step()
        sums += values
        n += 1
        if log_file is not None:
            kind = spec.kind if spec is not None else "off"
            log_file.write(f"{epoch}\t{step + n - 1}\t{values[1]!r}\t{values[2]!r}\t{values[0]!r}\t{lr_b!r}\t{kind}\n")
    if n == 0:
        raise ValueError("no batches in epoch")
    mean = sums / n
    return EpochStats(epoch, float(mean[0]), float(mean[1]), float(mean[2]), n)


def score_dataset(model: PadModel, data: ImageDataset) -> list[ScoreRecord]:
    """Frame-level bona fide scores from the inference path."""
    was_training = model.training
    model.eval()
    try:
        scores = forward_infer(model, data.images).double().clamp_(0.0, 1.0).tolist()
    finally:
        model.train(was_training)
    return [ScoreRecord(v, int(f), s, int(l))
            for v, f, s, l in zip(data.video_ids, data.frame_ids, scores, data.labels)]


def evaluate_dataset(model: PadModel, data: ImageDataset, threshold_policy: str = "eer",
                     threshold: Optional[float] = None) -> tuple[EvaluationReport, list[ScoreRecord]]:
    records = score_dataset(model, data)
    return evaluate_records(records, threshold_policy, threshold), records


@dataclass
class FitResult:
    history: list[EvaluationReport]
    epoch_stats: list[EpochStats]
    best_epoch: int
    best_auc: float
    state: TrainState
    artifacts: list[Path] = field(default_factory=list)


_HISTORY_COLUMNS = ("epoch", "total", "ce", "effect_ce", "apcer", "bpcer", "hter", "auc", "eer",
                    "threshold", "n_bonafide", "n_attack", "threshold_policy")


def _history_row(stats: EpochStats, report: EvaluationReport) -> str:
    r = asdict(report)
    vals = [stats.epoch, stats.total, stats.ce, stats.effect_ce] + [r[c] for c in _HISTORY_COLUMNS[4:]]
    return "\t".join(repr(v) if isinstance(v, float) else str(v) for v in vals) + "\n"


def read_history(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {HISTORY_FORMAT} v1":
        raise ValueError(f"{path}: not a {HISTORY_FORMAT} v1 file")
    cols = lines[1].split("\t")
    rows = []
    for line in lines[2:]:
        row = dict(zip(cols, line.split("\t")))
        rows.append({k: (v if k == "threshold_policy" else int(v) if k in ("epoch", "n_bonafide", "n_attack")
                         else float(v)) for k, v in row.items()})
    return rows


def fit(model: PadModel, train_data: ImageDataset, eval_data: Optional[ImageDataset], cfg: ExperimentConfig,
        out_dir: Optional[str | Path] = None, threshold_policy: str = "eer",
        threshold: Optional[float] = None) -> FitResult:
    """Run ``cfg.max_epochs`` epochs, evaluating on ``eval_data`` after each one.

    With ``out_dir`` the per-batch training log, per-epoch history, the
    best-AUC checkpoint and the final checkpoint are written there.
    """
    validate_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    state = TrainState()
    history, stats_list = [], []
    best_epoch, best_auc = -1, -math.inf
    out = Path(out_dir) if out_dir is not None else None
    log_file = hist_file = None
    artifacts = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.tsv", "w")
        log_file.write(f"# {TRAINLOG_FORMAT} v1\n" + "\t".join(TRAINLOG_COLUMNS) + "\n")
        hist_file = open(out / "history.tsv", "w")
        hist_file.write(f"# {HISTORY_FORMAT} v1\n" + "\t".join(_HISTORY_COLUMNS) + "\n")
        artifacts += [out / "train_log.tsv", out / "history.tsv"]
    try:
        for epoch in range(cfg.max_epochs):
            lrs = lr_schedule(epoch, cfg)
            apply_lr(optimizer, lrs)
            state.epoch, state.lr_backbone, state.lr_classifier = epoch, *lrs
            stats = train_epoch(model, optimizer, balanced_batches(train_data, cfg.batch_size, rng),
                                cfg, rng, epoch, state.step, log_file)
            state.step += stats.steps
            stats_list.append(stats)
            if eval_data is not None:
                report, _ = evaluate_dataset(model, eval_data, threshold_policy, threshold)
                history.append(report)
                if hist_file is not None:
                    hist_file.write(_history_row(stats, report))
                if report.auc > best_auc:
                    best_epoch, best_auc = epoch, report.auc
                    state.best_metric = best_auc
                    if out is not None:
                        save_checkpoint(out / "checkpoint_best.pt", model, cfg, epoch)
            log.debug("epoch %d: loss %.4f ce %.4f effect %.4f", epoch, stats.total, stats.ce, stats.effect_ce)
        state.rng_state = rng.bit_generator.state
        if out is not None:
            save_checkpoint(out / "checkpoint_final.pt", model, cfg, cfg.max_epochs - 1)
            artifacts.append(out / "checkpoint_final.pt")
            if best_epoch >= 0:
                artifacts.append(out / "checkpoint_best.pt")
    finally:
        for f in (log_file, hist_file):
            if f is not None:
                f.close()
    model.eval()
    return FitResult(history, stats_list, best_epoch, best_auc, state, artifacts)
