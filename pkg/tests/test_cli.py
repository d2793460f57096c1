import csv

import pytest

from cfpad.cli import run
from cfpad.metrics import report_from_kv

SYNTH = """# cfpad-synth v1
[generator]
n_videos = 6
frames_per_video = 2
image_size = 16
seed = 3
[domain A]
channel_mean_shift = 0.05, 0, -0.05
pattern_strength = 0.3
[domain B]
channel_scale = 0.9, 1.0, 1.1
pattern_strength = 0.3
[domain C]
noise_sigma = 0.04
pattern_strength = 0.3
[domain D]
channel_mean_shift = -0.05, 0.05, 0
pattern_strength = 0.3
"""

CONFIG = """# cfpad-config v1
backbone = toy
image_size = 16
batch_size = 4
max_epochs = 2
lr_halving_epochs = 1
mix_insertion_points = stage1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.ini").write_text(SYNTH)
    (root / "toy.cfg").write_text(CONFIG)
    res = run(["synth", "--spec", str(root / "synth.ini"), "--out", str(root / "data")])
    assert res.exit_code == 0 and len(res.artifacts) == 4
    return root


def train_args(ws, out):
    args = ["train", "--config", str(ws / "toy.cfg"), "--out", str(ws / out),
            "--eval-manifest", str(ws / "data/D/manifest.tsv"), "--seed", "1"]
    for d in "ABC":
        args += ["--manifests", str(ws / f"data/{d}/manifest.tsv")]
    return args


@pytest.fixture(scope="module")
def trained(workspace):
    res = run(train_args(workspace, "run1"))
    assert res.exit_code == 0
    return workspace, res


def test_train_writes_declared_artifacts(trained):
    ws, res = trained
    names = {p.name for p in res.artifacts}
    assert {"report.txt", "history.tsv", "train_log.tsv", "checkpoint_final.pt", "config.txt",
            "training_curves.png"} <= names
    assert all(p.exists() for p in res.artifacts)
    assert report_from_kv((ws / "run1/report.txt").read_text()).threshold_policy == "eer"


def test_train_rerun_is_identical(trained):
    ws, _ = trained
    assert run(train_args(ws, "run2")).exit_code == 0
    for name in ("report.txt", "history.tsv", "train_log.tsv", "config.txt"):
        assert (ws / "run1" / name).read_bytes() == (ws / "run2" / name).read_bytes(), name


def test_eval_twice_identical_and_fixed_threshold(trained):
    ws, _ = trained
    ckpt, manifest = str(ws / "run1/checkpoint_final.pt"), str(ws / "data/D/manifest.tsv")
    for out in ("e1", "e2"):
        assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", str(ws / out)]).exit_code == 0
    assert (ws / "e1/scores.csv").read_bytes() == (ws / "e2/scores.csv").read_bytes()
    assert (ws / "e1/roc.png").exists()
    res = run(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", str(ws / "e3"), "--threshold", "0.5"])
    assert res.exit_code == 0
    report = report_from_kv((ws / "e3/report.txt").read_text())
    assert report.threshold_policy == "fixed" and report.threshold == 0.5


def test_export_embeddings(trained):
    ws, _ = trained
    out = ws / "emb/z.csv"
    res = run(["export-embeddings", "--checkpoint", str(ws / "run1/checkpoint_best.pt"),
               "--manifest", str(ws / "data/A/manifest.tsv"), "--out", str(out)])
    assert res.exit_code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# cfpad-embeddings v1"
    rows = list(csv.reader(lines[1:]))
    assert rows[0][:4] == ["video_id", "frame_id", "label", "domain_tag"]
    assert all(len(r) == 4 + 16 for r in rows)
    assert len(rows) - 1 == 12


def test_bad_config_key_exits_1(workspace, capsys):
    bad = workspace / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    args = train_args(workspace, "bad")
    args[2] = str(bad)
    assert run(args).exit_code == 1
    assert "learning_rate" in capsys.readouterr().err


def test_single_class_training_manifest_exits_1(workspace, tmp_path):
    lines = (workspace / "data/A/manifest.tsv").read_text().splitlines()
    only_bona = [ln for ln in lines[2:] if ln.split("\t")[3] == "1"]
    m = workspace / "data/A/bona_only.tsv"
    m.write_text("\n".join(lines[:2] + only_bona) + "\n")
    args = ["train", "--config", str(workspace / "toy.cfg"), "--manifests", str(m),
            "--eval-manifest", str(workspace / "data/D/manifest.tsv"), "--out", str(tmp_path)]
    assert run(args).exit_code == 1


def test_eval_dimension_mismatch_exits_1(trained, tmp_path):
    import torch

    ws, _ = trained
    payload = torch.load(ws / "run1/checkpoint_final.pt", weights_only=True)
    payload["state_dict"]["classifier.weight"] = torch.zeros(2, 512)
    torch.save(payload, tmp_path / "bad.pt")
    res = run(["eval", "--checkpoint", str(tmp_path / "bad.pt"), "--manifest", str(ws / "data/D/manifest.tsv"),
               "--out", str(tmp_path / "o")])
    assert res.exit_code == 1 and "dimension" in res.message


def test_unwritable_output_exits_2(trained, tmp_path):
    ws, _ = trained
    blocker = tmp_path / "file"
    blocker.write_text("x")
    res = run(["eval", "--checkpoint", str(ws / "run1/checkpoint_final.pt"),
               "--manifest", str(ws / "data/D/manifest.tsv"), "--out", str(blocker / "sub")])
    assert res.exit_code == 2


def write_csv(path, rows, header=True):
    text = ("video_id,frame_id,score,label\n" if header else "") + "".join(f"{r}\n" for r in rows)
    path.write_text(text)
    return str(path)


def test_score_hand_built_csv(tmp_path):
    p = write_csv(tmp_path / "s.csv", ["b1,0,0.9,1", "b2,0,0.4,1", "a1,0,0.6,0", "a2,0,0.1,0"])
    res = run(["score", p, "--threshold", "0.5"])
    assert res.exit_code == 0
    rep = report_from_kv((tmp_path / "s_report.txt").read_text())
    assert (rep.apcer, rep.bpcer, rep.hter, rep.auc) == (50.0, 50.0, 50.0, 0.75)
    assert all(a.exists() for a in res.artifacts)
    assert run(["score", p, "--threshold-policy", "eer", "--threshold", "0.5"]).exit_code == 1
    assert run(["score", p, "--threshold-policy", "fixed"]).exit_code == 1


@pytest.mark.parametrize("rows,header,fragment", [
    (["a,0,0.3,1", "b,0,0.5,1"], True, "both"),
    ([], True, "no score rows"),
    (["a,0,0.3"], True, ":2:"),
    (["a,0,0.3,1"], False, "header"),
])
def test_score_rejects_bad_files(tmp_path, capsys, rows, header, fragment):
    p = write_csv(tmp_path / "s.csv", rows, header)
    assert run(["score", p]).exit_code == 1
    assert fragment in capsys.readouterr().err


def test_complexity(capsys, tmp_path):
    res = run(["complexity", "--out", str(tmp_path)])
    assert res.exit_code == 0
    text = (tmp_path / "complexity.txt").read_text()
    rows = [ln.split() for ln in text.splitlines()[1:5]]
    params = {(r[0], r[1]): int(r[2]) for r in rows}
    assert params[("resnet18", "off")] == params[("resnet18", "CGMixStyle+CI")] == 11_177_538
    assert params[("toy", "off")] == params[("toy", "CGMixStyle+CI")] == 1418
    assert "11.18" in capsys.readouterr().out
