import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cfpad.config import ExperimentConfig
from cfpad.data import SyntheticDomainSpec, balanced_batches, synth_dataset
from cfpad.model import build_model, load_checkpoint
from cfpad.training import (NonFiniteLossError, apply_lr, fit, lr_schedule, make_optimizer, read_history,
                            train_epoch)


@pytest.fixture(scope="module")
def tiny_data():
    spec = SyntheticDomainSpec(pattern_strength=0.3, noise_sigma=0.01, name="t")
    return synth_dataset(spec, 8, 2, np.random.default_rng(0), 16)


def small_cfg(**kw):
    base = dict(backbone="toy", image_size=16, mix_insertion_points=("stage1",), batch_size=4, max_epochs=3,
                lr_halving_epochs=(1, 2))
    base.update(kw)
    return ExperimentConfig(**base)


def test_schedule_anchor():
    cfg = ExperimentConfig()
    assert lr_schedule(0, cfg) == (0.001, 0.01)
    assert lr_schedule(29, cfg) == (0.001, 0.01)
    assert lr_schedule(30, cfg) == (0.0005, 0.005)
    assert lr_schedule(44, cfg) == (0.0005, 0.005)
    assert lr_schedule(45, cfg) == (0.00025, 0.0025)
    assert lr_schedule(59, cfg) == (0.00025, 0.0025)
    for bad in (-1, 60):
        with pytest.raises(ValueError):
            lr_schedule(bad, cfg)


def test_optimizer_groups():
    cfg = small_cfg()
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    assert [g["lr"] for g in opt.param_groups] == [0.001, 0.01]
    assert all(g["momentum"] == 0.9 and g["weight_decay"] == 5e-4 for g in opt.param_groups)
    assert sum(p.numel() for g in opt.param_groups for p in g["params"]) == \
        sum(p.numel() for p in model.parameters())
    apply_lr(opt, (1.0, 2.0))
    assert [g["lr"] for g in opt.param_groups] == [1.0, 2.0]


def test_effect_ce_is_ln2_without_intervention(tiny_data, tmp_path):
    cfg = small_cfg(intervention_mode="off", max_epochs=1, lr_halving_epochs=())
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    gen = np.random.default_rng(0)
    with open(tmp_path / "log.tsv", "w") as fh:
        stats = train_epoch(model, opt, balanced_batches(tiny_data, 4, gen), cfg, gen, log_file=fh)
    ln2 = float(torch.tensor(math.log(2.0)))  # float32 rounding of ln 2
    effects = [float(line.split("\t")[3]) for line in (tmp_path / "log.tsv").read_text().splitlines()]
    assert effects and all(e == ln2 for e in effects)
    assert stats.effect_ce == pytest.approx(ln2, abs=1e-12)


def test_same_seed_same_weights(tiny_data):
    cfg = small_cfg(mix_probability=1.0)
    states = []
    for _ in range(2):
        model = build_model(cfg)
        fit(model, tiny_data, None, cfg)
        states.append(model.state_dict())
    for k in states[0]:
        assert torch.equal(states[0][k], states[1][k]), k


def test_lambda_zero_baseline_matches_plain_cross_entropy(tiny_data):
    cfg = small_cfg(shuffle_mode="off", intervention_mode="off", loss_weight_lambda=0.0)
    model = build_model(cfg)
    result = fit(model, tiny_data, None, cfg)

    ref = build_model(cfg)
    opt = torch.optim.SGD([{"params": list(ref.feature_extractor.parameters()), "lr": 0.001},
                           {"params": list(ref.classifier.parameters()), "lr": 0.01}],
                          momentum=0.9, weight_decay=5e-4)
    gen = np.random.default_rng(cfg.seed)
    ref.train()
    for epoch in range(cfg.max_epochs):
        factor = 0.5 ** sum(e <= epoch for e in cfg.lr_halving_epochs)
        opt.param_groups[0]["lr"], opt.param_groups[1]["lr"] = 0.001 * factor, 0.01 * factor
        losses = []
        for batch in balanced_batches(tiny_data, cfg.batch_size, gen):
            loss = F.cross_entropy(ref(batch.images), batch.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        assert result.epoch_stats[epoch].ce == pytest.approx(np.mean(losses), abs=1e-7)
    for k, v in model.state_dict().items():
        assert torch.allclose(v.float(), ref.state_dict()[k].float(), atol=1e-6), k


def test_fit_writes_history_and_checkpoints(tiny_data, tmp_path):
    cfg = small_cfg()
    model = build_model(cfg)
    result = fit(model, tiny_data, tiny_data, cfg, tmp_path)
    rows = read_history(tmp_path / "history.tsv")
    assert len(rows) == len(result.history) == cfg.max_epochs
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert 0 <= result.best_epoch < 3
    assert result.best_auc == max(r.auc for r in result.history)
    _, _, meta = load_checkpoint(tmp_path / "checkpoint_best.pt")
    assert meta["epoch"] == result.best_epoch
    _, _, meta = load_checkpoint(tmp_path / "checkpoint_final.pt")
    assert meta["epoch"] == 2
    log_lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert log_lines[0] == "# cfpad-trainlog v1"
    assert len(log_lines) - 2 == result.state.step
    assert {line.split("\t")[6] for line in log_lines[2:]} <= {"zero", "replace", "shuffle"}


def test_nonfinite_loss_aborts(tiny_data):
    cfg = small_cfg(max_epochs=1, lr_halving_epochs=())
    bad = type(tiny_data)(tiny_data.images.clone(), tiny_data.labels, tiny_data.domain_tags,
                          tiny_data.video_ids, tiny_data.frame_ids)
    bad.images[:] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        fit(build_model(cfg), bad, None, cfg)
    assert info.value.epoch == 0 and info.value.batch_index == 0
