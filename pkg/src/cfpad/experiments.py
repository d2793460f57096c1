"""Leave-one-domain-out protocols on synthetic domains and the component ablation table."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import ImageDataset, SyntheticDomainSpec, synth_dataset
from .metrics import EvaluationReport
from .model import build_model
from .training import evaluate_dataset, fit

# The toy backbone has two stages; mixing after the last one would overwrite
# the pooled embedding itself, so only stage1 mixes (ResNet-18 likewise skips
# its final stage by default).
TOY_PROTOCOL_CONFIG = ExperimentConfig(backbone="toy", image_size=64, mix_insertion_points=("stage1",))

# name -> config overrides; the order is the row order of the table
METHODS = {
    "Baseline": dict(shuffle_mode="off", intervention_mode="off"),
    "+ CGMixStyle": dict(intervention_mode="off"),
    "+ CI": dict(shuffle_mode="off"),
    "CF-PAD (all)": {},
}


@dataclass(frozen=True)
class Protocol:
    train: tuple[int, ...]
    test: int

    def label(self, domains: Sequence[SyntheticDomainSpec]) -> str:
        return "&".join(domains[i].name for i in self.train) + " -> " + domains[self.test].name


def leave_one_out(n_domains: int) -> list[Protocol]:
    return [Protocol(tuple(i for i in range(n_domains) if i != t), t) for t in range(n_domains)]


@dataclass
class ProtocolData:
    train: ImageDataset
    seen: ImageDataset
    unseen: ImageDataset


def make_protocol_data(domains: Sequence[SyntheticDomainSpec], protocol: Protocol, seed: int,
                       n_videos: int = 24, frames: int = 4, n_eval_videos: int = 60,
                       image_size: int = 64) -> ProtocolData:
    """Train and seen-domain eval sets from the train domains, unseen set from the test domain.

    Every (seed, domain, split) gets its own random stream, so a domain's
    videos do not depend on which protocol it appears in.
    """
    def gen(domain_idx: int, split: int, n: int) -> ImageDataset:
        rng = np.random.default_rng([seed, domain_idx, split])
        return synth_dataset(domains[domain_idx], n, frames, rng, image_size)

    train = ImageDataset.concat([gen(i, 0, n_videos) for i in protocol.train])
    seen = ImageDataset.concat([gen(i, 1, n_videos) for i in protocol.train])
    return ProtocolData(train, seen, gen(protocol.test, 2, n_eval_videos))


@dataclass
class RunResult:
    method: str
    protocol: str
    seed: int
    unseen: EvaluationReport
    seen: EvaluationReport
    seconds: float


@dataclass
class AblationResult:
    runs: list[RunResult] = field(default_factory=list)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.runs))

    def protocols(self) -> list[str]:
        return list(dict.fromkeys(r.protocol for r in self.runs))

    def select(self, method: str, protocol: Optional[str] = None) -> list[RunResult]:
        return [r for r in self.runs if r.method == method and (protocol is None or r.protocol == protocol)]

    def mean_table(self) -> dict[str, dict[str, tuple[float, float]]]:
        """``table[method][protocol] = (mean HTER %, mean AUC %)`` over seeds, plus "Average"."""
        table = {}
        for m in self.methods():
            row = {}
            for p in self.protocols():
                runs = self.select(m, p)
                row[p] = (float(np.mean([r.unseen.hter for r in runs])),
                          float(np.mean([100 * r.unseen.auc for r in runs])))
            row["Average"] = (float(np.mean([v[0] for v in row.values()])),
                              float(np.mean([v[1] for v in row.values()])))
            table[m] = row
        return table


def run_ablation(domains: Sequence[SyntheticDomainSpec], protocols: Sequence[Protocol],
                 seeds: Sequence[int], base_cfg: ExperimentConfig,
                 methods: Optional[dict[str, dict]] = None, **data_kwargs) -> AblationResult:
    methods = METHODS if methods is None else methods
    result = AblationResult()
    for protocol in protocols:
        for seed in seeds:
            data = make_protocol_data(domains, protocol, seed, image_size=base_cfg.image_size, **data_kwargs)
            for name, overrides in methods.items():
                cfg = base_cfg.replace(seed=seed, **overrides)
                model = build_model(cfg)
                t0 = time.perf_counter()
                fitted = fit(model, data.train, data.unseen, cfg)
                seconds = time.perf_counter() - t0
                seen, _ = evaluate_dataset(model, data.seen)
                result.runs.append(RunResult(name, protocol.label(domains), seed, fitted.history[-1], seen, seconds))
    return result


def format_ablation_table(table: dict[str, dict[str, tuple[float, float]]]) -> str:
    """HTER/AUC columns per protocol, methods as rows."""
    methods = list(table)
    protocols = list(table[methods[0]])
    name_w = max(len("Method"), *(len(m) for m in methods))
    col_w = max(15, *(len(p) for p in protocols))
    head1 = " " * name_w + " | " + " | ".join(p.center(col_w) for p in protocols)
    sub = f"{'HTER(%)':>7} {'AUC(%)':>7}".center(col_w)
    head2 = "Method".ljust(name_w) + " | " + " | ".join(sub for _ in protocols)
    lines = [head1, head2, "-" * len(head2)]
    for m in methods:
        cells = [f"{table[m][p][0]:7.2f} {table[m][p][1]:7.2f}".center(col_w) for p in protocols]
        lines.append(m.ljust(name_w) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def format_ablation_tsv(result: AblationResult) -> str:
    lines = ["# cfpad-ablation v1",
             "method\tprotocol\tseed\tunseen_hter\tunseen_auc\tseen_hter\tseen_auc\tseconds"]
    for r in result.runs:
        lines.append(f"{r.method}\t{r.protocol}\t{r.seed}\t{r.unseen.hter!r}\t{r.unseen.auc!r}\t"
                     f"{r.seen.hter!r}\t{r.seen.auc!r}\t{r.seconds:.2f}")
    return "\n".join(lines) + "\n"
