"""PAD error rates (ISO/IEC 30107-3 style), EER threshold, AUC and video fusion.

Scores are oriented so that higher means more bona fide, labels are 1 for
bona fide and 0 for attack, and a score exactly at the threshold is decided
as bona fide. Error rates are returned in percent.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .types import ScoreRecord

SCORES_FORMAT = "cfpad-scores"
SCORES_VERSION = 1
SCORES_HEADER = ("video_id", "frame_id", "score", "label")
REPORT_FORMAT = "cfpad-report"
REPORT_VERSION = 1
THRESHOLD_POLICIES = ("eer", "fixed")


class ScoreFileError(ValueError):
    pass


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 (attack) or 1 (bona fide)")
    bona, attack = scores[labels == 1], scores[labels == 0]
    if bona.size == 0 or attack.size == 0:
        raise ValueError("metrics need both bona fide and attack samples")
    return bona, attack


def apcer_bpcer(scores, labels, threshold: float) -> tuple[float, float]:
    """APCER: attacks accepted (score >= t); BPCER: bona fide rejected (score < t)."""
    bona, attack = _split(scores, labels)
    apcer = 100.0 * np.count_nonzero(attack >= threshold) / attack.size
    bpcer = 100.0 * np.count_nonzero(bona < threshold) / bona.size
    return float(apcer), float(bpcer)


def hter(scores, labels, threshold: float) -> float:
    a, b = apcer_bpcer(scores, labels, threshold)
    return (a + b) / 2.0


def eer_threshold(scores, labels) -> tuple[float, float]:
    """Threshold where APCER and BPCER are closest, and the HTER there.

    Candidates are the midpoints between consecutive distinct scores; the
    lowest candidate wins ties. With a single distinct score the only
    candidate is that score.
    """
    bona, attack = _split(scores, labels)
    uniq = np.unique(np.concatenate([bona, attack]))
    cands = (uniq[:-1] + uniq[1:]) / 2.0 if uniq.size > 1 else uniq
    bona_s, attack_s = np.sort(bona), np.sort(attack)
    # counts of scores strictly below each candidate
    apcer = 100.0 * (attack_s.size - np.searchsorted(attack_s, cands, side="left")) / attack_s.size
    bpcer = 100.0 * np.searchsorted(bona_s, cands, side="left") / bona_s.size
    k = int(np.argmin(np.abs(apcer - bpcer)))  # argmin returns the first (lowest) on ties
    return float(cands[k]), float((apcer[k] + bpcer[k]) / 2.0)


def auc(scores, labels) -> float:
    """P(bona fide score > attack score) + 0.5 * P(tie), computed exactly."""
    bona, attack = _split(scores, labels)
    attack_s = np.sort(attack)
    below = np.searchsorted(attack_s, bona, side="left")
    equal = np.searchsorted(attack_s, bona, side="right") - below
    twice_u = 2 * int(below.sum()) + int(equal.sum())
    return twice_u / (2 * bona.size * attack.size)


# -- fusion ------------------------------------------------------------------------

def fuse_video_scores(records: Iterable[ScoreRecord]) -> list[tuple[str, float, int]]:
    """Mean-rule fusion: one ``(video_id, score, label)`` per video, sorted by id."""
    groups: dict[str, list] = {}
    labels: dict[str, int] = {}
    for r in records:
        if r.video_id in labels and labels[r.video_id] != r.label:
            raise ValueError(f"video {r.video_id!r} has frames with conflicting labels")
        labels[r.video_id] = r.label
        groups.setdefault(r.video_id, []).append(r.score)
    # fsum is exactly rounded, so the fused value does not depend on frame order
    return [(vid, math.fsum(groups[vid]) / len(groups[vid]), labels[vid]) for vid in sorted(groups)]


# -- reports -----------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationReport:
    apcer: float
    bpcer: float
    hter: float
    auc: float
    eer: float
    threshold: float
    n_bonafide: int
    n_attack: int
    threshold_policy: str = "eer"

    def __post_init__(self):
        if abs(self.hter - (self.apcer + self.bpcer) / 2.0) > 1e-9:
            raise ValueError("hter must equal (apcer + bpcer) / 2")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc must lie in [0, 1]")


def evaluate(scores, labels, threshold_policy: str = "eer", threshold: Optional[float] = None) -> EvaluationReport:
    """Full report. ``eer`` picks the threshold on these scores; ``fixed`` uses ``threshold``."""
    if threshold_policy not in THRESHOLD_POLICIES:
        raise ValueError(f"threshold policy must be one of {THRESHOLD_POLICIES}")
    bona, attack = _split(scores, labels)
    eer_tau, eer = eer_threshold(scores, labels)
    if threshold_policy == "fixed":
        if threshold is None:
            raise ValueError("fixed threshold policy needs a threshold")
        tau = float(threshold)
    else:
        tau = eer_tau
    a, b = apcer_bpcer(scores, labels, tau)
    return EvaluationReport(a, b, (a + b) / 2.0, auc(scores, labels), eer, tau,
                            int(bona.size), int(attack.size), threshold_policy)


def evaluate_records(records: Sequence[ScoreRecord], threshold_policy: str = "eer",
                     threshold: Optional[float] = None) -> EvaluationReport:
    fused = fuse_video_scores(records)
    return evaluate([f[1] for f in fused], [f[2] for f in fused], threshold_policy, threshold)


def report_to_kv(report: EvaluationReport) -> str:
    lines = [f"# {REPORT_FORMAT} v{REPORT_VERSION}"]
    for key, value in asdict(report).items():
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return "\n".join(lines) + "\n"


def report_from_kv(text: str) -> EvaluationReport:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {REPORT_FORMAT} v{REPORT_VERSION}":
        raise ValueError("not a cfpad-report v1 file")
    kv = dict(line.split("=", 1) for line in lines[1:] if line.strip())
    ints = {"n_bonafide", "n_attack"}
    vals = {k: (int(v) if k in ints else v if k == "threshold_policy" else float(v)) for k, v in kv.items()}
    return EvaluationReport(**vals)


def format_report_table(report: EvaluationReport, title: str = "") -> str:
    head = f"{'HTER(%)':>8} {'AUC(%)':>8} {'APCER(%)':>9} {'BPCER(%)':>9} {'EER(%)':>8} {'thr':>8}  n_bf/n_pa  policy"
    row = (f"{report.hter:8.2f} {100 * report.auc:8.2f} {report.apcer:9.2f} {report.bpcer:9.2f} "
           f"{report.eer:8.2f} {report.threshold:8.4f}  {report.n_bonafide}/{report.n_attack}  {report.threshold_policy}")
    out = [title] if title else []
    return "\n".join(out + [head, row]) + "\n"


# -- score files ---------------------------------------------------------------------

def write_scores(records: Sequence[ScoreRecord], path: str | Path) -> Path:
    buf = io.StringIO()
    buf.write(f"# {SCORES_FORMAT} v{SCORES_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORES_HEADER)
    for r in records:
        w.writerow([r.video_id, r.frame_id, repr(float(r.score)), r.label])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_scores(path: str | Path) -> list[ScoreRecord]:
    """Parse a score CSV; the version comment line is optional, the header is not."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    lineno = 0
    if lines and lines[0].startswith("#"):
        if lines[0].split() != ["#", SCORES_FORMAT, f"v{SCORES_VERSION}"]:
            raise ScoreFileError(f"{path}:1: unsupported score file version line {lines[0]!r}")
        lines, lineno = lines[1:], 1
    if not lines or tuple(c.strip() for c in lines[0].split(",")) != SCORES_HEADER:
        raise ScoreFileError(f"{path}:{lineno + 1}: expected header {','.join(SCORES_HEADER)}")
    records, seen = [], set()
    for offset, row in enumerate(csv.reader(lines[1:]), lineno + 2):
        if not row or not "".join(row).strip():
            continue
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            rec = ScoreRecord(row[0].strip(), int(row[1]), float(row[2]), int(row[3]))
        except ValueError as exc:
            raise ScoreFileError(f"{path}:{offset}: malformed row {','.join(row)!r}: {exc}") from None
        key = (rec.video_id, rec.frame_id)
        if key in seen:
            raise ScoreFileError(f"{path}:{offset}: duplicate (video_id, frame_id) {key}")
        seen.add(key)
        records.append(rec)
    if not records:
        raise ScoreFileError(f"{path}: no score rows")
    return records
