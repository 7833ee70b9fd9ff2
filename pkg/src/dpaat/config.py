"""Plain-text experiment configuration.

One ``section.key = value`` assignment per line; ``#`` starts a comment.
Unknown keys are rejected. Example::

    data.source = synth
    train.method = DPAAT
    train.alpha = 0.5
    train.attack.epsilon = 0.3
    eval.attacks = FGSM, 10-IFGSM, 20-IFGSM, 20-PGD, 50-PGD
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackSpec, parse_norm
from .trainers import TrainConfig, canonical_method


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _optional(conv):
    def parse(s):
        return None if s.strip().lower() in ("none", "") else conv(s)
    return parse


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _names(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _range(s):
    if s.strip().lower() in ("none", "off", ""):
        return None
    lo, hi = _floats(s)
    return (lo, hi)


def _in(lo, hi):
    def check(v):
        if not lo <= v <= hi:
            raise ValueError(f"must lie in [{lo}, {hi}], got {v}")
    return check


def _positive(v):
    if v is not None and v <= 0:
        raise ValueError(f"must be positive, got {v}")


def _nonneg(v):
    if v is not None and v < 0:
        raise ValueError(f"must be non-negative, got {v}")


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}, got {v!r}")
    return check


def _method(s):
    return canonical_method(s)


# key -> (parser, default, check)
SCHEMA = {
    "data.source": (str, "synth", None),
    "data.index": (str, "index.csv", None),
    "data.classes": (int, 3, lambda v: _in(2, 10_000)(v)),
    "data.per_class": (int, 200, _positive),
    "data.size": (int, 32, _positive),
    "data.seed": (int, 0, None),
    "data.noise": (float, 0.05, _nonneg),
    "data.split": (_floats, (0.7, 0.15, 0.15), None),
    "model.arch": (str, "smallcnn", None),
    "model.seed": (int, 0, None),
    "train.method": (_method, "DPAAT", None),
    "train.alpha": (float, 0.5, _in(0.0, 1.0)),
    "train.beta": (float, 1.0, _nonneg),
    "train.xi": (_optional(float), None, None),
    "train.delta_eps": (_optional(float), None, _nonneg),
    "train.sync_variant": (str, "jsd", _choice("jsd", "paper_literal")),
    "train.lr": (float, 3e-4, _positive),
    "train.batch_size": (int, 32, _positive),
    "train.epochs": (int, 30, _positive),
    "train.warmup_epochs": (int, 0, _nonneg),
    "train.patience": (int, 5, _positive),
    "train.seed": (int, 0, None),
    "train.eps_min": (_optional(float), None, _nonneg),
    "train.gamma_cap": (_optional(float), None, _nonneg),
    "train.regenerate": (str, "rescale", _choice("rescale", "reattack")),
    "train.attack.method": (str.upper, "PGD", _choice("FGSM", "IFGSM", "PGD")),
    "train.attack.p": (parse_norm, 2, None),
    "train.attack.epsilon": (float, 0.3, _nonneg),
    "train.attack.step": (float, 0.15, _positive),
    "train.attack.steps": (int, 7, _positive),
    "train.attack.random_start": (_optional(_bool), None, None),
    "train.attack.clamp": (_range, None, None),
    "train.attack.step_direction": (str, "sign", _choice("sign", "normalized_gradient")),
    "eval.attacks": (_names, ("FGSM", "10-IFGSM", "20-IFGSM", "20-PGD", "50-PGD"), None),
    "eval.epsilon": (float, 0.3, _nonneg),
    "eval.step": (float, 0.15, _positive),
    "eval.clamp": (_range, (0.0, 1.0), None),
    "eval.step_direction": (str, "sign", _choice("sign", "normalized_gradient")),
    "eval.batch_size": (int, 128, _positive),
    "eval.seed": (int, 0, None),
    "gradcam.count": (int, 8, _nonneg),
    "gradcam.layer": (int, -1, None),
    "output.dir": (str, "out", None),
    "output.wall_time": (_bool, False, None),
}


@dataclass
class DataSection:
    source: str = "synth"
    index: str = "index.csv"
    classes: int = 3
    per_class: int = 200
    size: int = 32
    seed: int = 0
    noise: float = 0.05
    split: tuple = (0.7, 0.15, 0.15)


@dataclass
class ExperimentConfig:
    data: DataSection
    arch: str
    model_seed: int
    train: TrainConfig
    eval_attacks: dict
    eval_batch_size: int = 128
    eval_seed: int = 0
    gradcam_count: int = 8
    gradcam_layer: int = -1
    output_dir: Path = field(default_factory=lambda: Path("out"))
    wall_time: bool = False
    values: dict = field(default_factory=dict)

    def with_method(self, method, **train_changes):
        return ExperimentConfig(
            self.data, self.arch, self.model_seed, self.train.with_(method=method, **train_changes),
            self.eval_attacks, self.eval_batch_size, self.eval_seed, self.gradcam_count,
            self.gradcam_layer, self.output_dir, self.wall_time, dict(self.values),
        )


def _assign(values, key, raw, where):
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    parse, _, check = SCHEMA[key]
    try:
        value = parse(raw.strip())
        if check is not None:
            check(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: invalid value for {key}: {exc}") from None
    values[key] = value


def parse_lines(lines, source="<config>", overrides=()):
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, raw = text.partition("=")
        if not sep or "." not in key.strip() or not key.strip():
            raise ConfigError(f"{source}:{lineno}: parse error, expected 'section.key = value', got {line.strip()!r}")
        _assign(values, key, raw, f"{source}:{lineno}")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        _assign(values, key, raw, f"--set {key.strip()}")
    return build(values)


def parse_config(path, overrides=()):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_lines(text.splitlines(), str(path), overrides)


def build(values):
    v = values

    def guard(key, fn):
        try:
            return fn()
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None

    attack = guard("train.attack", lambda: AttackSpec(
        v["train.attack.method"], p=v["train.attack.p"], epsilon=v["train.attack.epsilon"],
        step=v["train.attack.step"], steps=v["train.attack.steps"],
        random_start=v["train.attack.random_start"], clamp_range=v["train.attack.clamp"],
        step_direction=v["train.attack.step_direction"]))
    if v["train.eps_min"] is not None and v["train.eps_min"] > attack.epsilon:
        raise ConfigError(f"invalid value for train.eps_min: must not exceed train.attack.epsilon={attack.epsilon}")
    train = guard("train", lambda: TrainConfig(
        method=v["train.method"], alpha=v["train.alpha"], beta=v["train.beta"], xi=v["train.xi"],
        delta_eps=v["train.delta_eps"], sync_variant=v["train.sync_variant"], lr=v["train.lr"],
        batch_size=v["train.batch_size"], epochs=v["train.epochs"], warmup_epochs=v["train.warmup_epochs"],
        patience=v["train.patience"], seed=v["train.seed"], attack=attack, eps_min=v["train.eps_min"],
        gamma_cap=v["train.gamma_cap"], regenerate=v["train.regenerate"]))
    attacks = {}
    for name in v["eval.attacks"]:
        spec = guard("eval.attacks", lambda: AttackSpec.from_name(
            name, epsilon=v["eval.epsilon"], step=v["eval.step"], clamp_range=v["eval.clamp"]))
        if spec.method != "FGSM":
            spec = spec.with_(step_direction=v["eval.step_direction"])
        attacks[name] = spec
    if not attacks:
        raise ConfigError("invalid value for eval.attacks: at least one attack is required")
    split = v["data.split"]
    if len(split) != 3 or min(split) <= 0 or sum(split) > 1 + 1e-9 or any(math.isnan(f) for f in split):
        raise ConfigError(f"invalid value for data.split: need three positive fractions summing to <= 1, got {split}")
    data = DataSection(v["data.source"], v["data.index"], v["data.classes"], v["data.per_class"],
                       v["data.size"], v["data.seed"], v["data.noise"], split)
    return ExperimentConfig(
        data=data, arch=v["model.arch"], model_seed=v["model.seed"], train=train, eval_attacks=attacks,
        eval_batch_size=v["eval.batch_size"], eval_seed=v["eval.seed"], gradcam_count=v["gradcam.count"],
        gradcam_layer=v["gradcam.layer"], output_dir=Path(v["output.dir"]), wall_time=v["output.wall_time"],
        values=dict(v),
    )


def default_config(**overrides):
    """Defaults, optionally overridden with ``section__key=value`` style kwargs."""
    items = [f"{k.replace('__', '.')}={val}" for k, val in overrides.items()]
    return parse_lines([], "<defaults>", items)
