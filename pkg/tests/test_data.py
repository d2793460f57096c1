import warnings

import numpy as np
import pytest

from cfpad.data import (DatasetManifest, ImageDataset, ManifestEntry, ManifestError, SyntheticDomainSpec,
                        attack_pattern, balanced_indices, parse_synth_plan, read_manifest, sample_frames,
                        synth_generate, write_manifest, write_synthetic_plan)


def test_sample_frames_examples():
    assert sample_frames(100, 25) == list(range(0, 100, 4))
    assert sample_frames(25, 25) == list(range(25))
    assert sample_frames(10, 25) == list(range(10))
    with pytest.raises(ValueError):
        sample_frames(0, 5)


@pytest.mark.parametrize("count,n", [(7, 3), (250, 25), (26, 25), (1, 1), (99, 10)])
def test_sample_frames_properties(count, n):
    picks = sample_frames(count, n)
    assert picks[0] == 0 and picks[-1] < count
    assert len(picks) == min(count, n) == len(set(picks))
    assert picks == sorted(picks)


def test_balanced_batches_are_half_and_half(rng):
    labels = np.array([1] * 100 + [0] * 20)
    batches = balanced_indices(labels, 10, rng)
    for idx in batches:
        assert len(idx) == 10
        assert (labels[idx] == 1).sum() == 5
    # one pass over the larger class covers every member
    seen = np.concatenate(batches)
    assert set(seen[labels[seen] == 1]) == set(range(100))
    assert len(batches) == 20


def test_balanced_uneven_tail(rng):
    labels = np.array([0] * 23 + [1] * 9)
    batches = balanced_indices(labels, 8, rng)
    assert len(batches) == 6
    for idx in batches:
        assert (labels[idx] == 0).sum() == 4
    assert set(np.concatenate(batches)) >= set(range(23))


def test_balanced_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        balanced_indices(np.array([0, 1, 0, 1]), 5, rng)
    with pytest.raises(ValueError):
        balanced_indices(np.array([1, 1, 1]), 2, rng)


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry(f"v{i}/0.png", f"v{i}", 0, i % 2, 3) for i in range(4)]
    write_manifest(DatasetManifest("dom", entries), tmp_path / "m.tsv")
    back = read_manifest(tmp_path / "m.tsv")
    assert back.name == "dom" and back.entries == entries and back.root == tmp_path


def test_manifest_errors_have_line_numbers(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("image_path\tvideo_id\tframe_id\tlabel\tdomain_tag\na.png\tv\t0\t1\t0\nb.png\tv\t1\t2\t0\n")
    with pytest.raises(ManifestError, match=r"m\.tsv:3"):
        read_manifest(p)
    p.write_text("# cfpad-manifest v9 x\nimage_path\tvideo_id\tframe_id\tlabel\tdomain_tag\n")
    with pytest.raises(ManifestError, match="version"):
        read_manifest(p)
    p.write_text("path,label\n")
    with pytest.raises(ManifestError, match="header"):
        read_manifest(p)
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "missing.tsv")


def test_single_class_manifest_not_trainable():
    m = DatasetManifest("x", [ManifestEntry("a.png", "v", 0, 1, 0)])
    with pytest.raises(ManifestError):
        m.check_trainable()


def spec(**kw):
    base = dict(noise_sigma=0.0, pattern_strength=0.1, name="d")
    base.update(kw)
    return SyntheticDomainSpec(**base)


def test_synth_is_deterministic():
    a = synth_generate(spec(), 4, 3, np.random.default_rng(7), 16)
    b = synth_generate(spec(), 4, 3, np.random.default_rng(7), 16)
    assert a[0].entries == b[0].entries
    assert np.array_equal(a[1], b[1])


def test_strength_zero_removes_class_signal():
    with pytest.warns(UserWarning, match="pattern_strength"):
        _, grid = synth_generate(spec(pattern_strength=0.0), 40, 2, np.random.default_rng(1), 16)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, frame = synth_generate(spec(pattern_strength=0.0, attack_pattern="border_frame"), 40, 2,
                                  np.random.default_rng(1), 16)
    # which pattern an attack would carry makes no difference at strength 0
    assert np.array_equal(grid, frame)
    _, signal = synth_generate(spec(), 40, 2, np.random.default_rng(1), 16)
    assert not np.array_equal(grid, signal)


def test_channel_shift_moves_means():
    shift = (0.1, 0.0, -0.05)
    _, plain = synth_generate(spec(), 6, 2, np.random.default_rng(3), 16)
    _, moved = synth_generate(spec(channel_mean_shift=shift), 6, 2, np.random.default_rng(3), 16)
    diff = (moved.astype(float) - plain.astype(float)).mean(axis=(0, 1, 2)) / 255.0
    # clipping at 0/255 and rounding are the only sources of disagreement
    assert np.allclose(diff, shift, atol=0.01)


def test_attack_patterns_zero_mean():
    for kind in ("moire_grid", "border_frame", "flat_texture"):
        assert abs(attack_pattern(kind, 32).mean()) < 1e-12
    with pytest.raises(ValueError):
        attack_pattern("stripes", 8)


def test_labels_alternate_and_frames_follow_video_length():
    manifest, images = synth_generate(spec(), 4, 5, np.random.default_rng(0), 8, video_length=100)
    assert images.shape == (20, 8, 8, 3) and images.dtype == np.uint8
    assert [e.label for e in manifest.entries[::5]] == [1, 0, 1, 0]
    assert [e.frame_id for e in manifest.entries[:5]] == [0, 20, 40, 60, 80]


def test_synth_plan_to_loadable_dataset(tmp_path):
    text = """# cfpad-synth v1
[generator]
n_videos = 4
frames_per_video = 2
image_size = 12
seed = 5
[domain A]
channel_mean_shift = 0.05, 0, -0.05
pattern_strength = 0.2
[domain B]
attack_pattern = border_frame
session_jitter = 0.3
"""
    plan = parse_synth_plan(text)
    assert [d.name for d in plan.domains] == ["A", "B"]
    assert [d.domain_tag for d in plan.domains] == [0, 1]
    paths = write_synthetic_plan(plan, tmp_path)
    data = ImageDataset.concat([ImageDataset.from_manifest(read_manifest(p), 12) for p in paths])
    assert len(data) == 16 and data.images.shape == (16, 3, 12, 12)
    assert set(data.domain_tags.tolist()) == {0, 1}
    with pytest.raises(ValueError):
        parse_synth_plan("[generator]\nfoo = 1\n[domain A]\n")
    with pytest.raises(ValueError):
        parse_synth_plan("[generator]\nn_videos = 2\n")
