"""Datasets, manifests, balanced batching and the synthetic multi-domain generator.

Manifest file (tab-separated, UTF-8)::

    # cfpad-manifest v1 <dataset name>
    image_path	video_id	frame_id	label	domain_tag
    v000/0.png	v000	0	1	0

``image_path`` is relative to the manifest's directory. Images live at
``<dataset>/<video_id>/<frame_id>.png`` as lossless 8-bit RGB.
"""
from __future__ import annotations

import configparser
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .types import LabeledBatch

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "cfpad-manifest"
MANIFEST_VERSION = 1
MANIFEST_COLUMNS = ("image_path", "video_id", "frame_id", "label", "domain_tag")
SYNTH_FORMAT = "cfpad-synth"
SYNTH_VERSION = 1
ATTACK_PATTERNS = ("moire_grid", "flat_texture", "border_frame")


class ManifestError(ValueError):
    pass


def sample_frames(video_frame_count: int, n: int) -> list[int]:
    """``n`` evenly strided frame indices starting at frame 0.

    Index ``i`` is ``floor(i * count / n)``; when the video has fewer than
    ``n`` frames the duplicates collapse and every frame is returned once.
    """
    if video_frame_count < 1 or n < 1:
        raise ValueError("frame count and n must both be >= 1")
    picks = (np.arange(n) * video_frame_count) // n
    return sorted(set(int(i) for i in picks))


# -- manifests -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    video_id: str
    frame_id: int
    label: int
    domain_tag: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ManifestError(f"label must be 0 or 1, got {self.label!r}")
        if self.frame_id < 0:
            raise ManifestError(f"frame_id must be >= 0, got {self.frame_id!r}")


@dataclass
class DatasetManifest:
    name: str
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Optional[Path] = None

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def check_trainable(self) -> None:
        present = set(self.labels.tolist())
        if present != {0, 1}:
            raise ManifestError(f"manifest {self.name!r} needs both classes for training, has {sorted(present)}")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    lines = [f"# {MANIFEST_FORMAT} v{MANIFEST_VERSION} {manifest.name}", "\t".join(MANIFEST_COLUMNS)]
    for e in manifest.entries:
        lines.append(f"{e.image_path}\t{e.video_id}\t{e.frame_id}\t{e.label}\t{e.domain_tag}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    name = path.parent.name
    if lines and lines[0].startswith("#"):
        parts = lines[0][1:].split()
        if len(parts) < 2 or parts[0] != MANIFEST_FORMAT or parts[1] != f"v{MANIFEST_VERSION}":
            raise ManifestError(f"{path}: unsupported manifest version line {lines[0]!r}")
        if len(parts) > 2:
            name = " ".join(parts[2:])
        lines = lines[1:]
        offset = 2
    else:
        offset = 1
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}: expected header {'<TAB>'.join(MANIFEST_COLUMNS)}")
    entries = []
    for lineno, line in enumerate(lines[1:], offset + 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        try:
            if len(cols) != len(MANIFEST_COLUMNS):
                raise ValueError(f"expected {len(MANIFEST_COLUMNS)} fields, got {len(cols)}")
            entries.append(ManifestEntry(cols[0], cols[1], int(cols[2]), int(cols[3]), int(cols[4])))
        except (ValueError, ManifestError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
    keys = [(e.video_id, e.frame_id) for e in entries]
    if len(set(keys)) != len(keys):
        raise ManifestError(f"{path}: duplicate (video_id, frame_id) rows")
    return DatasetManifest(name, entries, path.parent)


# -- in-memory datasets --------------------------------------------------------

def _load_png(path: Path, size: Optional[int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def to_tensor(images_u8: np.ndarray) -> torch.Tensor:
    """[N, H, W, 3] uint8 -> [N, 3, H, W] float32 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images_u8.transpose(0, 3, 1, 2))).float().div_(255.0)


@dataclass
class ImageDataset:
    """Images held in memory alongside their manifest metadata."""

    images: torch.Tensor
    labels: np.ndarray
    domain_tags: np.ndarray
    video_ids: list[str]
    frame_ids: np.ndarray
    name: str = ""

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, image_size: Optional[int] = None) -> "ImageDataset":
        if manifest.root is None:
            raise ManifestError(f"manifest {manifest.name!r} has no root directory to load images from")
        if not manifest.entries:
            raise ManifestError(f"manifest {manifest.name!r} is empty")
        arrays = []
        for e in manifest.entries:
            p = manifest.root / e.image_path
            try:
                arrays.append(_load_png(p, image_size))
            except OSError as exc:
                raise ManifestError(f"cannot load image {p}: {exc}") from exc
        return cls(to_tensor(np.stack(arrays)), manifest.labels,
                   np.array([e.domain_tag for e in manifest.entries], dtype=np.int64),
                   [e.video_id for e in manifest.entries],
                   np.array([e.frame_id for e in manifest.entries], dtype=np.int64), manifest.name)

    @classmethod
    def concat(cls, parts: Sequence["ImageDataset"]) -> "ImageDataset":
        return cls(torch.cat([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.domain_tags for p in parts]),
                   [v for p in parts for v in p.video_ids],
                   np.concatenate([p.frame_ids for p in parts]),
                   "+".join(p.name for p in parts))

    def batch(self, index: np.ndarray) -> LabeledBatch:
        t = torch.from_numpy(np.asarray(index, dtype=np.int64))
        return LabeledBatch(self.images[t], torch.from_numpy(self.labels[index]),
                            torch.from_numpy(self.domain_tags[index]),
                            [self.video_ids[i] for i in index])


def balanced_indices(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of index batches, each exactly half bona fide and half attack.

    The larger class is visited once in random order; if its size is not a
    multiple of ``batch_size / 2`` the last batch is topped up with other
    members of that class. The smaller class is drawn with replacement (or
    permuted, when both classes are the same size).
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be an even integer >= 2, got {batch_size}")
    labels = np.asarray(labels)
    bona, attack = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if bona.size == 0 or attack.size == 0:
        raise ValueError("balanced batching needs both bona fide and attack samples")
    half = batch_size // 2
    major, minor = (bona, attack) if bona.size >= attack.size else (attack, bona)
    n_batches = math.ceil(major.size / half)
    order = rng.permutation(major)
    rem = major.size % half
    if rem:
        done = order[: major.size - rem]
        pad = half - rem
        if done.size >= pad:
            extra = rng.choice(done, pad, replace=False)
        else:
            extra = rng.choice(major, pad, replace=True)
        order = np.concatenate([order, extra])
    if minor.size == major.size and not rem:
        minor_draw = rng.permutation(minor)
    else:
        minor_draw = rng.choice(minor, n_batches * half, replace=True)
    batches = []
    for k in range(n_batches):
        idx = np.concatenate([order[k * half:(k + 1) * half], minor_draw[k * half:(k + 1) * half]])
        batches.append(idx[rng.permutation(idx.size)])
    return batches


def balanced_batches(dataset: ImageDataset, batch_size: int, rng: np.random.Generator) -> Iterator[LabeledBatch]:
    for idx in balanced_indices(dataset.labels, batch_size, rng):
        yield dataset.batch(idx)


# -- synthetic domains -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Capture-condition model for one synthetic domain.

    The colour shift/scale, per-video session jitter and noise act as the
    spurious, domain-specific style; the attack pattern is the class-causal
    signal and uses the same pattern function in every domain.
    ``session_jitter`` is the log-std of a per-video contrast factor (each video
    is one capture session); brightness jitters by a tenth of it.
    """

    channel_mean_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    channel_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.02
    attack_pattern: str = "moire_grid"
    pattern_strength: float = 0.1
    name: str = "domain"
    domain_tag: int = 0
    session_jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "channel_mean_shift", tuple(float(v) for v in self.channel_mean_shift))
        object.__setattr__(self, "channel_scale", tuple(float(v) for v in self.channel_scale))
        if len(self.channel_mean_shift) != 3 or len(self.channel_scale) != 3:
            raise ValueError("channel_mean_shift and channel_scale need three values")
        if any(s <= 0 for s in self.channel_scale):
            raise ValueError(f"channel_scale must be > 0, got {self.channel_scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.pattern_strength < 0:
            raise ValueError("pattern_strength must be >= 0")
        if self.session_jitter < 0:
            raise ValueError("session_jitter must be >= 0")
        if self.attack_pattern not in ATTACK_PATTERNS:
            raise ValueError(f"attack_pattern must be one of {', '.join(ATTACK_PATTERNS)}")


def attack_pattern(kind: str, size: int) -> np.ndarray:
    """Domain-independent [size, size] additive pattern with zero mean."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "moire_grid":
        p = np.cos(2 * np.pi * xx / 4.0) * np.cos(2 * np.pi * yy / 4.0)
    elif kind == "border_frame":
        w = max(1, size // 8)
        edge = (xx < w) | (yy < w) | (xx >= size - w) | (yy >= size - w)
        p = edge.astype(np.float64)
    elif kind == "flat_texture":
        # handled multiplicatively in _render; no additive part
        return np.zeros((size, size))
    else:
        raise ValueError(f"unknown attack pattern {kind!r}")
    return p - p.mean()


def _base_texture(rng: np.random.Generator, size: int, n_waves: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Smooth colour face stand-in: low-frequency waves; returns (texture fn params)."""
    freqs = rng.uniform(-3.0, 3.0, size=(n_waves, 2))
    phases = rng.uniform(0, 2 * np.pi, size=n_waves)
    amps = rng.uniform(0.03, 0.08, size=(n_waves, 3))
    base = rng.uniform(0.35, 0.65, size=3)
    return (freqs, phases, amps), base


def _render(params, base, size: int, offset: np.ndarray) -> np.ndarray:
    freqs, phases, amps = params
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for f, ph, a in zip(freqs, phases, amps):
        wave = np.sin(2 * np.pi * (f[0] * (xx + offset[0]) + f[1] * (yy + offset[1])) + ph)
        img += wave[..., None] * a
    return img


def synth_generate(spec: SyntheticDomainSpec, n_videos: int, frames_per_video: int,
                   rng: np.random.Generator, image_size: int = 64,
                   video_length: Optional[int] = None) -> tuple[DatasetManifest, np.ndarray]:
    """Generate one domain: a manifest with generator keys and [N, H, W, 3] uint8 images.

    Even-numbered videos are bona fide, odd-numbered ones are attacks. With
    ``video_length`` set, frame ids are the evenly sampled indices of a video
    of that length, as for real footage.
    """
    if n_videos < 2:
        raise ValueError("need at least two videos (one per class)")
    if spec.pattern_strength == 0:
        warnings.warn(f"domain {spec.name!r}: pattern_strength is 0, bona fide and attack images coincide",
                      stacklevel=2)
    frame_ids = (sample_frames(video_length, frames_per_video) if video_length
                 else list(range(frames_per_video)))
    pattern = attack_pattern(spec.attack_pattern, image_size)[..., None]
    scale = np.asarray(spec.channel_scale)
    shift = np.asarray(spec.channel_mean_shift)
    entries, images = [], []
    for v in range(n_videos):
        label = 1 if v % 2 == 0 else 0
        video_id = f"{spec.name}_v{v:03d}"
        params, base = _base_texture(rng, image_size)
        drift = rng.normal(scale=0.01, size=2)
        contrast = np.exp(spec.session_jitter * rng.standard_normal())
        brightness = 0.1 * spec.session_jitter * rng.standard_normal(3)
        for fid in frame_ids:
            img = _render(params, base, image_size, drift * fid)
            if label == 0:
                if spec.attack_pattern == "flat_texture":
                    img = img + spec.pattern_strength * (img.mean(axis=(0, 1)) - img) * 4.0
                else:
                    img = img + spec.pattern_strength * pattern
            img = img * scale + shift
            img = (img - 0.5) * contrast + 0.5 + brightness
            if spec.noise_sigma:
                img = img + rng.normal(scale=spec.noise_sigma, size=img.shape)
            images.append(np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
            entries.append(ManifestEntry(f"synth:{spec.name}/{video_id}/{fid}", video_id, fid, label,
                                         spec.domain_tag))
    return DatasetManifest(spec.name, entries), np.stack(images)


def synth_dataset(spec: SyntheticDomainSpec, n_videos: int, frames_per_video: int,
                  rng: np.random.Generator, image_size: int = 64) -> ImageDataset:
    """Generate a domain straight into memory (no files)."""
    manifest, images = synth_generate(spec, n_videos, frames_per_video, rng, image_size)
    return ImageDataset(to_tensor(images), manifest.labels,
                        np.full(len(manifest), spec.domain_tag, dtype=np.int64),
                        [e.video_id for e in manifest.entries],
                        np.array([e.frame_id for e in manifest.entries], dtype=np.int64), spec.name)


def write_synthetic_domain(spec: SyntheticDomainSpec, out_dir: str | Path, n_videos: int,
                           frames_per_video: int, rng: np.random.Generator, image_size: int = 64,
                           video_length: Optional[int] = None) -> Path:
    """Write ``out_dir/<name>/<video_id>/<frame_id>.png`` plus ``manifest.tsv``."""
    root = Path(out_dir) / spec.name
    manifest, images = synth_generate(spec, n_videos, frames_per_video, rng, image_size, video_length)
    entries = []
    for e, img in zip(manifest.entries, images):
        rel = Path(e.video_id) / f"{e.frame_id}.png"
        (root / e.video_id).mkdir(parents=True, exist_ok=True)
        Image.fromarray(img, "RGB").save(root / rel, format="PNG", optimize=False)
        entries.append(ManifestEntry(rel.as_posix(), e.video_id, e.frame_id, e.label, e.domain_tag))
    return write_manifest(DatasetManifest(spec.name, entries, root), root / "manifest.tsv")


# -- synth spec files --------------------------------------------------------------
#
#   # cfpad-synth v1
#   [generator]
#   n_videos = 12
#   frames_per_video = 5
#   image_size = 64
#   seed = 0
#   [domain A]
#   channel_mean_shift = 0.05, 0.0, -0.05
#   channel_scale = 1.0, 0.9, 1.1
#   noise_sigma = 0.02
#   attack_pattern = moire_grid
#   pattern_strength = 0.1
#
# Every [domain NAME] section becomes one dataset; tags follow section order.

@dataclass(frozen=True)
class SynthPlan:
    domains: tuple[SyntheticDomainSpec, ...]
    n_videos: int = 12
    frames_per_video: int = 5
    image_size: int = 64
    video_length: Optional[int] = None
    seed: int = 0


def _triple(text: str) -> tuple[float, float, float]:
    vals = tuple(float(t) for t in text.split(","))
    if len(vals) != 3:
        raise ValueError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def parse_synth_plan(text: str) -> SynthPlan:
    first = text.lstrip().splitlines()[0] if text.strip() else ""
    if first.startswith("#") and SYNTH_FORMAT in first and f"v{SYNTH_VERSION}" not in first.split():
        raise ValueError(f"unsupported synth spec version line {first!r}")
    cp = configparser.ConfigParser()
    cp.read_string(text)
    gen = cp["generator"] if cp.has_section("generator") else {}
    known = {"n_videos", "frames_per_video", "image_size", "video_length", "seed"}
    unknown = set(gen) - known
    if unknown:
        raise ValueError(f"unknown generator keys: {', '.join(sorted(unknown))}")
    domains = []
    for section in cp.sections():
        if not section.startswith("domain "):
            if section != "generator":
                raise ValueError(f"unknown section [{section}]")
            continue
        s = cp[section]
        allowed = {"channel_mean_shift", "channel_scale", "noise_sigma", "attack_pattern", "pattern_strength",
                   "session_jitter"}
        extra = set(s) - allowed
        if extra:
            raise ValueError(f"[{section}]: unknown keys {', '.join(sorted(extra))}")
        domains.append(SyntheticDomainSpec(
            channel_mean_shift=_triple(s.get("channel_mean_shift", "0,0,0")),
            channel_scale=_triple(s.get("channel_scale", "1,1,1")),
            noise_sigma=float(s.get("noise_sigma", "0.02")),
            attack_pattern=s.get("attack_pattern", "moire_grid").strip(),
            pattern_strength=float(s.get("pattern_strength", "0.1")),
            name=section[len("domain "):].strip(),
            domain_tag=len(domains),
            session_jitter=float(s.get("session_jitter", "0")),
        ))
    if not domains:
        raise ValueError("synth spec defines no [domain NAME] sections")
    vl = gen.get("video_length")
    return SynthPlan(tuple(domains), int(gen.get("n_videos", 12)), int(gen.get("frames_per_video", 5)),
                     int(gen.get("image_size", 64)), int(vl) if vl else None, int(gen.get("seed", 0)))


def write_synthetic_plan(plan: SynthPlan, out_dir: str | Path) -> list[Path]:
    """Write every domain of ``plan``; each domain gets its own seeded stream."""
    seeds = np.random.SeedSequence(plan.seed).spawn(len(plan.domains))
    return [write_synthetic_domain(spec, out_dir, plan.n_videos, plan.frames_per_video,
                                   np.random.default_rng(ss), plan.image_size, plan.video_length)
            for spec, ss in zip(plan.domains, seeds)]


def default_domains(pattern_strength: float = 0.04, jitter: float = 0.1,
                    unseen_jitter: float = 0.9) -> list[SyntheticDomainSpec]:
    """Four stock domains standing in for the O/C/I/M cross-dataset protocol.

    The last one ("M") is the intended held-out domain: lower contrast, more
    noise and a wider spread of capture sessions than the other three.
    """
    rows = [
        ("O", (0.06, 0.02, -0.04), (1.00, 0.95, 0.90), 0.015, jitter),
        ("C", (-0.05, 0.00, 0.05), (0.90, 1.00, 1.10), 0.020, jitter),
        ("I", (0.00, -0.06, 0.02), (1.10, 1.05, 0.95), 0.010, jitter),
        ("M", (0.08, -0.04, -0.08), (0.70, 0.75, 0.85), 0.060, unseen_jitter),
    ]
    return [SyntheticDomainSpec(shift, scale, noise, "moire_grid", pattern_strength, name, tag, j)
            for tag, (name, shift, scale, noise, j) in enumerate(rows)]
