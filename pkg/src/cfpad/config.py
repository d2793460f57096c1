"""Experiment configuration: defaults, validation, flat key/value file format.

The file format is one ``key = value`` pair per line. Blank lines and lines
starting with ``#`` are ignored, except that a first line of the form
``# cfpad-config vN`` declares the format version and must name version 1.
List values are comma-separated. Unknown keys are an error.

Any field can be overridden from the environment with ``CFPAD_<FIELD>``
(upper-cased field name), e.g. ``CFPAD_INTERVENTION_DEGREE=0.3``.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

SHUFFLE_MODES = ("class_guided", "random", "cross_domain", "off")
INTERVENTION_MODES = ("zero", "replace", "shuffle", "all", "off")
BACKBONES = ("resnet18", "toy")
STAGES = ("stage1", "stage2", "stage3", "stage4")
MIX_ACTIVATIONS = ("per_batch", "per_sample")
SHUFFLE_SCOPES = ("within_sample", "across_batch")

ENV_PREFIX = "CFPAD_"
CONFIG_FORMAT = "cfpad-config"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised when a configuration violates one or more field invariants.

    ``violations`` holds ``(field, value, reason)`` triples, one per problem.
    """

    def __init__(self, violations: list[tuple[str, Any, str]]):
        self.violations = list(violations)
        lines = [f"{name}={value!r}: {reason}" for name, value, reason in self.violations]
        super().__init__("invalid configuration: " + "; ".join(lines))

    @property
    def fields(self) -> list[str]:
        return [v[0] for v in self.violations]


@dataclass(frozen=True)
class ExperimentConfig:
    # class-guided statistics mixing
    mix_probability: float = 0.5
    beta_alpha: float = 0.1
    shuffle_mode: str = "class_guided"
    mix_insertion_points: tuple[str, ...] = ("stage1", "stage2", "stage3")
    stats_eps: float = 1e-6
    unbiased_variance: bool = False
    mix_activation: str = "per_batch"
    # counterfactual intervention
    intervention_degree: float = 0.2
    intervention_mode: str = "all"
    shuffle_scope: str = "within_sample"
    partial_shuffle: bool = False
    loss_weight_lambda: float = 2.0
    # optimisation
    lr_backbone: float = 0.001
    lr_classifier: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_epochs: int = 60
    lr_halving_epochs: tuple[int, ...] = (30, 45)
    batch_size: int = 32
    # data / model
    frames_per_video: int = 25
    image_size: int = 256
    backbone: str = "resnet18"
    pretrained_weights: str = ""
    seed: int = 0

    def __post_init__(self):
        # lists from callers are normalised to tuples so the object stays hashable
        object.__setattr__(self, "mix_insertion_points", tuple(self.mix_insertion_points))
        object.__setattr__(self, "lr_halving_epochs", tuple(self.lr_halving_epochs))
        problems = _violations(self)
        if problems:
            raise ConfigError(problems)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def mixing_enabled(self) -> bool:
        return self.shuffle_mode != "off"

    @property
    def intervention_enabled(self) -> bool:
        return self.intervention_mode != "off"


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _violations(cfg: ExperimentConfig) -> list[tuple[str, Any, str]]:
    out = []

    def check(name, ok, reason):
        if not ok:
            out.append((name, getattr(cfg, name), reason))

    def unit(name):
        v = getattr(cfg, name)
        check(name, _is_real(v) and 0.0 <= v <= 1.0, "must be a real in [0, 1]")

    def positive(name):
        v = getattr(cfg, name)
        check(name, _is_real(v) and v > 0, "must be a real > 0")

    def nonneg(name):
        v = getattr(cfg, name)
        check(name, _is_real(v) and v >= 0, "must be a real >= 0")

    def choice(name, allowed):
        check(name, getattr(cfg, name) in allowed, f"must be one of {', '.join(allowed)}")

    unit("mix_probability")
    positive("beta_alpha")
    choice("shuffle_mode", SHUFFLE_MODES)
    pts = cfg.mix_insertion_points
    check("mix_insertion_points",
          all(p in STAGES for p in pts) and len(set(pts)) == len(pts),
          f"must be distinct names from {', '.join(STAGES)}")
    positive("stats_eps")
    check("unbiased_variance", isinstance(cfg.unbiased_variance, bool), "must be a boolean")
    choice("mix_activation", MIX_ACTIVATIONS)
    unit("intervention_degree")
    choice("intervention_mode", INTERVENTION_MODES)
    choice("shuffle_scope", SHUFFLE_SCOPES)
    check("partial_shuffle", isinstance(cfg.partial_shuffle, bool), "must be a boolean")
    nonneg("loss_weight_lambda")
    positive("lr_backbone")
    positive("lr_classifier")
    check("momentum", _is_real(cfg.momentum) and 0 <= cfg.momentum < 1, "must be a real in [0, 1)")
    nonneg("weight_decay")
    check("max_epochs", _is_int(cfg.max_epochs) and cfg.max_epochs >= 1, "must be an integer >= 1")
    halving = cfg.lr_halving_epochs
    if not all(_is_int(e) and e >= 0 for e in halving):
        check("lr_halving_epochs", False, "must be non-negative integers")
    elif any(b <= a for a, b in zip(halving, halving[1:])):
        check("lr_halving_epochs", False, "must be strictly increasing")
    elif _is_int(cfg.max_epochs) and halving and halving[-1] >= cfg.max_epochs:
        check("lr_halving_epochs", False, "every halving epoch must be < max_epochs")
    check("batch_size", _is_int(cfg.batch_size) and cfg.batch_size >= 2 and cfg.batch_size % 2 == 0,
          "must be an even integer >= 2")
    check("frames_per_video", _is_int(cfg.frames_per_video) and cfg.frames_per_video >= 1,
          "must be an integer >= 1")
    check("image_size", _is_int(cfg.image_size) and cfg.image_size >= 8, "must be an integer >= 8")
    choice("backbone", BACKBONES)
    check("pretrained_weights", isinstance(cfg.pretrained_weights, str), "must be a path string")
    check("seed", _is_int(cfg.seed), "must be an integer")
    return out


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise ConfigError."""
    problems = _violations(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


# -- serialisation -----------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELDS[name].type
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind == "tuple[str, ...]":
            return tuple(t.strip() for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError([(name, text, f"cannot parse as {kind}")]) from None
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [f"# {CONFIG_FORMAT} v{CONFIG_VERSION}"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse the flat key/value format. Missing keys keep their ``base`` values."""
    values: dict[str, Any] = {}
    problems = []
    lines = text.splitlines()
    if lines and lines[0].startswith(f"# {CONFIG_FORMAT}"):
        version = lines[0].split()[-1]
        if version != f"v{CONFIG_VERSION}":
            raise ConfigError([("format_version", version, f"unsupported, expected v{CONFIG_VERSION}")])
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append((f"line {lineno}", raw, "expected 'key = value'"))
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            problems.append((key, value.strip(), "unknown key"))
            continue
        if key in values:
            problems.append((key, value.strip(), "duplicate key"))
            continue
        try:
            values[key] = _parse_value(key, value)
        except ConfigError as exc:
            problems.extend(exc.violations)
    if problems:
        raise ConfigError(problems)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    problems = []
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in _FIELDS:
            problems.append((key, value, "unknown configuration field"))
            continue
        try:
            out[name] = _parse_value(name, value)
        except ConfigError as exc:
            problems.extend(exc.violations)
    if problems:
        raise ConfigError(problems)
    return out


def load_config(path: str | Path | None = None, environ: Mapping[str, str] | None = None,
                **overrides) -> ExperimentConfig:
    """Defaults, then the config file, then CFPAD_* variables, then ``overrides``."""
    cfg = ExperimentConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    env = env_overrides(environ)
    if env:
        cfg = dataclasses.replace(cfg, **env)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(cfg))
