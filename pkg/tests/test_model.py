import io

import numpy as np
import pytest
import torch
import torch.nn as nn

from cfpad.complexity import UnsupportedLayerError, count_flops, count_parameters
from cfpad.config import ExperimentConfig
from cfpad.model import (CheckpointError, PadModel, build_model, forward_infer, forward_train, infer_embeddings,
                         load_checkpoint, save_checkpoint)
from cfpad.types import LabeledBatch


def resnet18_macs(size: int, classes: int = 2) -> int:
    """Multiply-accumulates of ResNet-18 conv and linear layers, counted by hand."""
    s = size // 2  # stem conv, stride 2
    total = s * s * 64 * 3 * 7 * 7
    s = s // 2  # max pool
    total += 4 * s * s * 64 * 64 * 9  # stage 1: two blocks of two 3x3 convs
    c_in = 64
    for c in (128, 256, 512):
        s = (s + 1) // 2
        total += s * s * c * c_in * 9  # strided first conv
        total += 3 * s * s * c * c * 9  # remaining three 3x3 convs
        total += s * s * c * c_in  # 1x1 projection shortcut
        c_in = c
    return total + 512 * classes


def batch(b=4, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LabeledBatch(torch.randn(b, 3, size, size, generator=g), torch.tensor([0, 1] * (b // 2)),
                        torch.tensor([0, 1] * (b // 2)))


@pytest.fixture(scope="module")
def resnet():
    return build_model(ExperimentConfig())


def test_parameter_count(resnet):
    # torchvision's 1000-way model minus its head, plus a 2-way head
    expected = 11_689_512 - (512 * 1000 + 1000) + (512 * 2 + 2)
    assert count_parameters(resnet) == expected
    assert abs(expected / 1e6 - 11.18) / 11.18 < 0.02


def test_flops_match_hand_count(resnet):
    assert count_flops(resnet, 224) == resnet18_macs(224)
    assert abs(count_flops(resnet, 224) / 1e9 - 1.82) / 1.82 < 0.10
    assert count_flops(resnet, 256) == resnet18_macs(256)


def test_mechanisms_add_no_parameters():
    counts = {count_parameters(PadModel(ExperimentConfig(shuffle_mode=s, intervention_mode=i)))
              for s in ("off", "class_guided", "random") for i in ("off", "all")}
    assert len(counts) == 1


def test_toy_parameter_hand_sum(toy_cfg):
    conv1 = 3 * 8 * 3 * 3
    bn1 = 2 * 8
    conv2 = 8 * 16 * 3 * 3
    head = 16 * 2 + 2
    assert count_parameters(build_model(toy_cfg)) == conv1 + bn1 + conv2 + head == 1418


def test_unsupported_layer_is_named():
    model = nn.Sequential(nn.Conv2d(3, 4, 3), nn.GELU())
    with pytest.raises(UnsupportedLayerError, match="GELU"):
        count_flops(model, 8)


def test_train_forward_shapes(resnet):
    resnet.train()
    out = forward_train(resnet, batch(4, 64), resnet.cfg, np.random.default_rng(0))
    assert out.y.shape == (4, 2) and out.y_bar.shape == (4, 2) and out.z.shape == (4, 512)
    assert not out.y_bar.requires_grad


def test_train_forward_deterministic(toy_cfg):
    cfg = toy_cfg.replace(mix_probability=1.0)
    results = []
    for _ in range(2):
        model = build_model(cfg).train()
        results.append(forward_train(model, batch(), cfg, np.random.default_rng(9)))
    assert torch.equal(results[0].y, results[1].y)
    assert torch.equal(results[0].y_bar, results[1].y_bar)


def test_mechanisms_off_gives_equal_logits(toy_cfg):
    cfg = toy_cfg.replace(shuffle_mode="off", intervention_mode="off")
    model = build_model(cfg).train()
    out = forward_train(model, batch(), cfg, np.random.default_rng(0))
    assert torch.equal(out.y, out.y_bar)


def test_inference_pure(toy_cfg):
    model = build_model(toy_cfg).eval()
    images = batch(6).images
    a, b = forward_infer(model, images), forward_infer(model, images, batch_size=4)
    assert torch.equal(a, b)
    assert ((a >= 0) & (a <= 1)).all()
    logits = model(images).double()
    assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(6, dtype=torch.float64))
    with pytest.raises(RuntimeError):
        forward_infer(model.train(), images)


def test_mixing_is_removed_at_inference(toy_cfg):
    mixed = build_model(toy_cfg.replace(mix_probability=1.0)).eval()
    plain = build_model(toy_cfg.replace(shuffle_mode="off")).eval()
    images = batch(4).images
    assert torch.equal(forward_infer(mixed, images), forward_infer(plain, images))


def test_checkpoint_round_trip(tmp_path, toy_cfg):
    model = build_model(toy_cfg.replace(seed=4)).eval()
    save_checkpoint(tmp_path / "m.pt", model, model.cfg, epoch=3)
    loaded, cfg, meta = load_checkpoint(tmp_path / "m.pt")
    assert cfg == model.cfg and meta == {"backbone": "toy", "embedding_dim": 16, "epoch": 3}
    images = batch(4).images
    assert torch.equal(forward_infer(model, images), forward_infer(loaded, images))
    assert torch.equal(infer_embeddings(model, images), infer_embeddings(loaded, images))


def test_checkpoint_dimension_mismatch(tmp_path, toy_cfg):
    model = build_model(toy_cfg)
    save_checkpoint(tmp_path / "m.pt", model, toy_cfg)
    payload = torch.load(tmp_path / "m.pt", weights_only=True)
    payload["state_dict"]["classifier.weight"] = torch.zeros(2, 512)
    payload["embedding_dim"] = 512
    buf = io.BytesIO()
    torch.save(payload, buf)
    (tmp_path / "bad.pt").write_bytes(buf.getvalue())
    with pytest.raises(CheckpointError, match="D=512"):
        load_checkpoint(tmp_path / "bad.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")


def test_seeded_init_does_not_touch_global_rng(toy_cfg):
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    build_model(toy_cfg)
    assert torch.equal(torch.rand(1), before)
