"""``cfpad`` command line: train, eval, score, synth, complexity, export-embeddings, ablation.

Exit codes: 0 success, 1 validation failure (config, manifest, score file,
checkpoint), 2 runtime failure (non-finite loss, unwritable output).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .complexity import count_flops, count_parameters
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import (ImageDataset, ManifestError, SynthPlan, default_domains, parse_synth_plan, read_manifest,
                   write_synthetic_plan)
from .experiments import (TOY_PROTOCOL_CONFIG, Protocol, format_ablation_table, format_ablation_tsv,
                          leave_one_out, run_ablation)
from .metrics import (ScoreFileError, evaluate_records, format_report_table, fuse_video_scores, read_scores,
                      report_to_kv, write_scores)
from .model import CheckpointError, PadModel, build_model, infer_embeddings, load_checkpoint
from .plotting import plot_ablation, plot_roc, plot_training_history
from .training import NonFiniteLossError, evaluate_dataset, fit, read_history

log = logging.getLogger("cfpad")

EMBEDDINGS_FORMAT = "cfpad-embeddings"


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts: list[Path] = field(default_factory=list)
    message: str = ""


class ValidationError(Exception):
    """Bad user input; maps to exit code 1."""


def _threshold_args(policy: Optional[str], threshold: Optional[float]) -> tuple[str, Optional[float]]:
    if threshold is not None:
        if policy == "eer":
            raise ValidationError("--threshold conflicts with --threshold-policy eer")
        return "fixed", threshold
    if policy == "fixed":
        raise ValidationError("--threshold-policy fixed needs --threshold")
    return policy or "eer", None


def _load_dataset(paths: Sequence[str | Path], image_size: int, trainable: bool = False) -> ImageDataset:
    parts = []
    for p in paths:
        manifest = read_manifest(p)
        if trainable:
            manifest.check_trainable()
        parts.append(ImageDataset.from_manifest(manifest, image_size))
    return parts[0] if len(parts) == 1 else ImageDataset.concat(parts)


def _write_report(report, out: Path, stem: str, title: str) -> list[Path]:
    kv = out / f"{stem}.txt"
    kv.write_text(report_to_kv(report))
    table = out / f"{stem}_table.txt"
    table.write_text(format_report_table(report, title))
    return [kv, table]


def _ensure_dir(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from exc
    return out


# -- commands ----------------------------------------------------------------------

def cmd_train(config_path: Optional[str], train_manifests: Sequence[str], eval_manifest: str, out_dir: str,
              seed: Optional[int] = None, toy_backbone: bool = False, threshold_policy: Optional[str] = None,
              threshold: Optional[float] = None) -> CommandResult:
    cfg = load_config(config_path, seed=seed, backbone="toy" if toy_backbone else None)
    policy, tau = _threshold_args(threshold_policy, threshold)
    if not train_manifests:
        raise ValidationError("at least one --manifests path is required")
    train = _load_dataset(train_manifests, cfg.image_size, trainable=True)
    evaluation = _load_dataset([eval_manifest], cfg.image_size)
    out = _ensure_dir(out_dir)
    save_config(cfg, out / "config.txt")
    model = build_model(cfg)
    result = fit(model, train, evaluation, cfg, out, policy, tau)
    artifacts = [out / "config.txt"] + result.artifacts
    artifacts += _write_report(result.history[-1], out, "report", f"final epoch, eval on {evaluation.name}")
    artifacts.append(plot_training_history(read_history(out / "history.tsv"), out / "training_curves.png"))
    print(format_report_table(result.history[-1], f"final epoch ({cfg.max_epochs}), best AUC epoch {result.best_epoch}"),
          end="")
    return CommandResult(0, artifacts)


def cmd_eval(checkpoint: str, manifest: str, out_dir: str, threshold_policy: Optional[str] = None,
             threshold: Optional[float] = None) -> CommandResult:
    policy, tau = _threshold_args(threshold_policy, threshold)
    model, cfg, _ = load_checkpoint(checkpoint)
    data = _load_dataset([manifest], cfg.image_size)
    out = _ensure_dir(out_dir)
    try:
        report, records = evaluate_dataset(model, data, policy, tau)
    except ValueError as exc:
        raise ValidationError(f"{manifest}: {exc}") from exc
    artifacts = [write_scores(records, out / "scores.csv")]
    artifacts += _write_report(report, out, "report", f"{data.name} ({len(data)} frames)")
    fused = _fused_arrays(records)
    artifacts.append(plot_roc(*fused, out / "roc.png", title=data.name, auc_value=report.auc))
    print(format_report_table(report, f"{data.name}"), end="")
    return CommandResult(0, artifacts)


def _fused_arrays(records):
    fused = fuse_video_scores(records)
    return np.array([f[1] for f in fused]), np.array([f[2] for f in fused])


def cmd_score(score_csv: str, threshold_policy: Optional[str] = None, threshold: Optional[float] = None,
              out_dir: Optional[str] = None) -> CommandResult:
    policy, tau = _threshold_args(threshold_policy, threshold)
    records = read_scores(score_csv)
    try:
        report = evaluate_records(records, policy, tau)
    except ValueError as exc:
        raise ValidationError(f"{score_csv}: {exc}") from exc
    src = Path(score_csv)
    out = _ensure_dir(out_dir) if out_dir else src.parent
    artifacts = _write_report(report, out, f"{src.stem}_report", src.name)
    artifacts.append(plot_roc(*_fused_arrays(records), out / f"{src.stem}_roc.png", title=src.name,
                              auc_value=report.auc))
    print(format_report_table(report, src.name), end="")
    return CommandResult(0, artifacts)


def cmd_synth(spec_file: Optional[str], out_dir: str, seed: Optional[int] = None) -> CommandResult:
    """Write synthetic domains described by ``spec_file`` (default: the four stock domains)."""
    if spec_file:
        try:
            plan = parse_synth_plan(Path(spec_file).read_text())
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"{spec_file}: {exc}") from exc
    else:
        plan = SynthPlan(tuple(default_domains()), n_videos=24, frames_per_video=4)
    if seed is not None:
        plan = replace(plan, seed=seed)
    out = _ensure_dir(out_dir)
    try:
        manifests = write_synthetic_plan(plan, out)
    except OSError as exc:
        raise RuntimeError(f"cannot write synthetic data under {out}: {exc}") from exc
    for m in manifests:
        print(m)
    return CommandResult(0, manifests)


def complexity_rows(cfg: ExperimentConfig) -> list[tuple[str, str, int, int, int]]:
    """(backbone, mechanisms, params, FLOPs at cfg.image_size, FLOPs at 224) rows."""
    rows = []
    settings = {
        "off": dict(shuffle_mode="off", intervention_mode="off"),
        "CGMixStyle+CI": dict(shuffle_mode="class_guided", intervention_mode="all"),
    }
    for backbone in ("resnet18", "toy"):
        for label, overrides in settings.items():
            model = PadModel(cfg.replace(backbone=backbone, pretrained_weights="", **overrides))
            rows.append((backbone, label, count_parameters(model),
                         count_flops(model, cfg.image_size), count_flops(model, 224)))
    return rows


def cmd_complexity(config_path: Optional[str] = None, out_dir: Optional[str] = None) -> CommandResult:
    cfg = load_config(config_path)
    rows = complexity_rows(cfg)
    lines = [f"{'backbone':<9} {'mechanisms':<14} {'params':>11} {'Param.(M)':>9} "
             f"{'FLOPs(G)@' + str(cfg.image_size):>13} {'FLOPs(G)@224':>13}"]
    for backbone, mech, params, flops, flops224 in rows:
        lines.append(f"{backbone:<9} {mech:<14} {params:>11d} {params / 1e6:>9.2f} "
                     f"{flops / 1e9:>13.3f} {flops224 / 1e9:>13.3f}")
    lines.append("FLOPs count one multiply-accumulate as one operation (conv + linear layers).")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    artifacts = []
    if out_dir:
        out = _ensure_dir(out_dir)
        (out / "complexity.txt").write_text(text)
        artifacts.append(out / "complexity.txt")
    return CommandResult(0, artifacts)


def cmd_export_embeddings(checkpoint: str, manifest: str, out_path: str) -> CommandResult:
    """One row per frame: video_id, frame_id, label, domain_tag, then D embedding values."""
    model, cfg, _ = load_checkpoint(checkpoint)
    data = _load_dataset([manifest], cfg.image_size)
    z = infer_embeddings(model, data.images).double().numpy()
    out = Path(out_path)
    _ensure_dir(out.parent)
    header = ["video_id", "frame_id", "label", "domain_tag"] + [f"z{i}" for i in range(z.shape[1])]
    lines = [f"# {EMBEDDINGS_FORMAT} v1", ",".join(header)]
    for i in range(len(data)):
        vals = ",".join(repr(float(v)) for v in z[i])
        lines.append(f"{data.video_ids[i]},{data.frame_ids[i]},{data.labels[i]},{data.domain_tags[i]},{vals}")
    try:
        out.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise RuntimeError(f"cannot write {out}: {exc}") from exc
    return CommandResult(0, [out])


def cmd_ablation(config_path: Optional[str], out_dir: str, seeds: int = 5, all_protocols: bool = False,
                 n_videos: int = 24, frames: int = 4, n_eval_videos: int = 60) -> CommandResult:
    """Baseline / +CGMixStyle / +CI / both on the stock synthetic domains.

    Without ``config_path`` the toy-backbone protocol configuration is used.
    """
    cfg = load_config(config_path) if config_path else TOY_PROTOCOL_CONFIG
    domains = default_domains()
    protocols = leave_one_out(len(domains)) if all_protocols else [Protocol((0, 1, 2), 3)]
    result = run_ablation(domains, protocols, range(seeds), cfg,
                          n_videos=n_videos, frames=frames, n_eval_videos=n_eval_videos)
    out = _ensure_dir(out_dir)
    table = result.mean_table()
    text = format_ablation_table(table)
    (out / "ablation_table.txt").write_text(text)
    (out / "ablation.tsv").write_text(format_ablation_tsv(result))
    fig = plot_ablation(table, out / "ablation.png")
    print(text, end="")
    return CommandResult(0, [out / "ablation_table.txt", out / "ablation.tsv", fig])


# -- argument parsing ------------------------------------------------------------

def _add_threshold(p):
    p.add_argument("--threshold-policy", choices=("eer", "fixed"), default=None,
                   help="eer: threshold at the equal-error point of these scores (default); "
                        "fixed: use --threshold")
    p.add_argument("--threshold", type=float, default=None, help="fixed decision threshold in [0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfpad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on one or more manifests")
    p.add_argument("--config", default=None)
    p.add_argument("--manifests", action="append", default=[], required=True,
                   help="training manifest (repeat for several domains)")
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--toy-backbone", action="store_true")
    _add_threshold(p)

    p = sub.add_parser("eval", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_threshold(p)

    p = sub.add_parser("score", help="metrics from a score CSV")
    p.add_argument("score_csv")
    p.add_argument("--out", default=None)
    _add_threshold(p)

    p = sub.add_parser("synth", help="generate synthetic domains")
    p.add_argument("--spec", default=None, help="synth spec file (default: stock O/C/I/M domains)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("complexity", help="parameter and FLOP counts")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("export-embeddings", help="write per-frame embeddings for projection plots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("ablation", help="component ablation on synthetic cross-domain protocols")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--all-protocols", action="store_true", help="every leave-one-domain-out split")
    return parser


def _dispatch(args) -> CommandResult:
    c = args.command
    if c == "train":
        return cmd_train(args.config, args.manifests, args.eval_manifest, args.out, args.seed,
                         args.toy_backbone, args.threshold_policy, args.threshold)
    if c == "eval":
        return cmd_eval(args.checkpoint, args.manifest, args.out, args.threshold_policy, args.threshold)
    if c == "score":
        return cmd_score(args.score_csv, args.threshold_policy, args.threshold, args.out)
    if c == "synth":
        return cmd_synth(args.spec, args.out, args.seed)
    if c == "complexity":
        return cmd_complexity(args.config, args.out)
    if c == "export-embeddings":
        return cmd_export_embeddings(args.checkpoint, args.manifest, args.out)
    if c == "ablation":
        return cmd_ablation(args.config, args.out, args.seeds, args.all_protocols)
    raise AssertionError(c)


def run(argv: Optional[Sequence[str]] = None) -> CommandResult:
    """Parse ``argv`` and run the command, mapping failures to exit codes."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ManifestError, ScoreFileError, CheckpointError, ValidationError) as exc:
        print(f"cfpad: error: {exc}", file=sys.stderr)
        return CommandResult(1, message=str(exc))
    except NonFiniteLossError as exc:
        print(f"cfpad: training aborted: {exc}", file=sys.stderr)
        return CommandResult(2, message=str(exc))
    except (RuntimeError, OSError) as exc:
        print(f"cfpad: error: {exc}", file=sys.stderr)
        return CommandResult(2, message=str(exc))


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
