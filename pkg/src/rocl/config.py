"""Experiment configuration: flat ``key = value`` text with dotted keys.

Every key has a typed default in :data:`SCHEMA`; a config is the schema
defaults overlaid with a preset, a file and ``--set`` overrides. Parsing is
total over the schema and ``parse(dump(cfg)) == cfg`` for every valid config.
Numbers accept simple fractions (``1/256``) so grids can be written as in
the literature.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from . import attacks, augment
from .evaluation import LinearEvalConfig, SmoothingConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one diagnostic per field."""

    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


# kind: "int" | "float" | "bool" | "str" | "ints" | "floats" | "strs"
SCHEMA: Dict[str, Tuple[str, Any]] = {
    "command": ("str", "train"),
    "method": ("str", "rocl"),  # rocl | simclr | at | trades | finetune
    "seed": ("int", 0),
    "out": ("str", "runs/out"),
    "precision": ("str", "float32"),
    "workers": ("int", 1),
    # data
    "data.source": ("str", "toy"),  # toy | cifar10 | dir
    "data.train": ("str", ""),
    "data.test": ("str", ""),
    "data.toy.classes": ("int", 2),
    "data.toy.samples_per_class": ("int", 1200),
    "data.toy.image_size": ("int", 16),
    "data.toy.test_size": ("int", 400),
    "data.toy.seed": ("int", 0),
    "checkpoint": ("str", ""),
    "source_checkpoint": ("str", ""),
    # model
    "model.encoder_arch": ("str", "small_cnn"),
    "model.channels": ("ints", (8, 16, 32)),
    "model.widths": ("ints", (256,)),
    "model.feature_dim": ("int", 32),
    "model.projection_dim": ("int", 32),
    "model.num_classes": ("int", 2),
    # training
    "train.epochs": ("int", 10),
    "train.batch_size": ("int", 32),
    "train.base_lr": ("float", 0.05),
    "train.warmup_epochs": ("int", 1),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 1e-6),
    "train.lam": ("float", 1 / 256),
    "train.temperature": ("float", 0.5),
    "train.attack_target": ("str", "t_prime"),
    "train.regularizer_target": ("str", "t_prime"),
    "train.symmetric": ("bool", True),
    "train.adv_negatives": ("bool", True),
    "train.attack_bn_mode": ("str", "train"),
    "train.trades_beta": ("float", 6.0),
    "train.ss_weight": ("float", 0.0),
    "train.supervised_augment": ("bool", False),
    "train.debug_checks": ("bool", True),
    "attack.norm": ("str", "linf"),
    "attack.epsilon": ("float", 8 / 255),
    "attack.step_size": ("float", 2 / 255),
    "attack.steps": ("int", 7),
    "attack.random_start": ("bool", False),
    "policy.crop_scale_range": ("floats", (0.5, 1.0)),
    "policy.flip_prob": ("float", 0.5),
    "policy.jitter_prob": ("float", 0.8),
    "policy.jitter_strengths": ("floats", (0.05, 0.2, 0.2)),
    "policy.gray_prob": ("float", 0.2),
    # linear / robust linear evaluation
    "linear.epochs": ("int", 30),
    "linear.batch_size": ("int", 128),
    "linear.lr": ("float", 0.1),
    "linear.weight_decay": ("float", 5e-4),
    "linear.robust": ("bool", False),
    "linear.robust_epochs": ("int", 10),
    "linear.robust_lr": ("float", 0.02),
    "linear.attack_steps": ("int", 10),
    "linear.attack_epsilon": ("float", 8 / 255),
    "linear.attack_step_size": ("float", 2 / 255),
    # white-box suite
    "eval.steps": ("int", 20),
    "eval.suite": ("str", "scaled"),  # scaled | published | seen
    "eval.blackbox_source": ("str", "pgd"),  # pgd | instance
    # smoothing
    "smoothing.n_samples": ("int", 30),
    "smoothing.aggregation": ("str", "feature_mean"),
    "smoothing.n_values": ("ints", (1, 10, 100)),
    "smoothing.crop_scale": ("float", 0.54),
    # ablations
    "ablate.lambdas": ("floats", (1 / 16, 1 / 32, 1 / 64, 1 / 128, 1 / 256, 1 / 512)),
    "ablate.batch_sizes": ("ints", (16, 32, 64)),
}

CHOICES = {
    "command": ("train", "attack", "eval", "ablate-xy", "ablate-lambda", "ablate-batch", "report"),
    "method": ("rocl", "simclr", "at", "trades", "finetune"),
    "precision": ("float32", "float64"),
    "data.source": ("toy", "cifar10", "dir"),
    "model.encoder_arch": ("small_cnn", "mlp"),
    "train.attack_target": ("t", "t_prime"),
    "train.regularizer_target": ("t", "t_prime"),
    "train.attack_bn_mode": ("train", "eval"),
    "attack.norm": attacks.NORMS,
    "eval.suite": ("scaled", "published", "seen"),
    "eval.blackbox_source": ("pgd", "instance"),
    "smoothing.aggregation": ("feature_mean", "logit_vote"),
}

PRESETS: Dict[str, Dict[str, Any]] = {
    # desk-scale values; the schema defaults already are the toy setup
    "toy": {},
    # full published CIFAR-10 setup; not runnable on a desk CPU
    "paper-cifar10": {
        "data.source": "cifar10",
        "model.channels": (64, 128, 256), "model.feature_dim": 256, "model.projection_dim": 128,
        "model.num_classes": 10,
        "train.epochs": 1000, "train.batch_size": 512, "train.base_lr": 1.0, "train.warmup_epochs": 10,
        "attack.epsilon": 0.0314, "attack.step_size": 0.007, "attack.steps": 7,
        "policy.crop_scale_range": (0.08, 1.0), "policy.jitter_strengths": (0.1, 0.4, 0.4),
        "linear.epochs": 150, "linear.robust_epochs": 150,
        "linear.attack_epsilon": 0.0314, "linear.attack_step_size": 0.007,
        "eval.suite": "published",
    },
}


# ---------------------------------------------------------------------------
# value codec
# ---------------------------------------------------------------------------


def _num(text: str) -> float:
    text = text.strip()
    return float(Fraction(text)) if "/" in text else float(text)


def parse_value(kind: str, text: str):
    text = text.strip()
    if kind == "str":
        return text
    if kind == "int":
        v = _num(text)
        if v != int(v):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(v)
    if kind == "float":
        return _num(text)
    if kind == "bool":
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    items = [t for t in (s.strip() for s in text.split(",")) if t]
    if kind == "ints":
        return tuple(parse_value("int", t) for t in items)
    if kind == "floats":
        return tuple(_num(t) for t in items)
    if kind == "strs":
        return tuple(items)
    raise ValueError(f"unknown kind {kind!r}")


def format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind in ("ints", "floats", "strs"):
        return ", ".join(format_value(kind[:-1] if kind != "strs" else "str", v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# config object
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    values: Tuple[Tuple[str, Any], ...]

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def with_(self, **changes) -> "ExperimentConfig":
        """Override keys; use ``__`` for dots (``train__epochs=3``)."""
        return build({**self.as_dict(), **{k.replace("__", "."): v for k, v in changes.items()}})

    def dump(self) -> str:
        lines = [f"{k} = {format_value(SCHEMA[k][0], v)}" for k, v in self.values]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()

    # ---- typed views -------------------------------------------------

    def model_config(self, input_dims=(3, 16, 16), num_classes: Optional[int] = None) -> ModelConfig:
        d = self.as_dict()
        return ModelConfig(encoder_arch=d["model.encoder_arch"], channels=d["model.channels"],
                           widths=d["model.widths"], input_dims=tuple(input_dims),
                           feature_dim=d["model.feature_dim"], projection_dim=d["model.projection_dim"],
                           num_classes=num_classes or d["model.num_classes"])

    def policy(self) -> augment.AugmentPolicy:
        d = self.as_dict()
        return augment.AugmentPolicy(crop_scale_range=d["policy.crop_scale_range"], flip_prob=d["policy.flip_prob"],
                                     jitter_prob=d["policy.jitter_prob"],
                                     jitter_strengths=d["policy.jitter_strengths"], gray_prob=d["policy.gray_prob"])

    def train_attack(self) -> attacks.AttackConfig:
        d = self.as_dict()
        return attacks.AttackConfig(norm=d["attack.norm"], epsilon=d["attack.epsilon"],
                                    step_size=d["attack.step_size"], steps=d["attack.steps"],
                                    random_start=d["attack.random_start"], loss_kind="contrastive")

    def train_config(self) -> TrainConfig:
        d = self.as_dict()
        t = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("train.")}
        return TrainConfig(attack=self.train_attack(), policy=self.policy(), seed=d["seed"], workers=d["workers"], **t)

    def linear_config(self, robust: bool = False) -> LinearEvalConfig:
        d = self.as_dict()
        acfg = attacks.AttackConfig(norm="linf", epsilon=d["linear.attack_epsilon"],
                                    step_size=d["linear.attack_step_size"], steps=d["linear.attack_steps"])
        return LinearEvalConfig(epochs=d["linear.robust_epochs"] if robust else d["linear.epochs"],
                                batch_size=d["linear.batch_size"],
                                lr=d["linear.robust_lr"] if robust else d["linear.lr"],
                                weight_decay=d["linear.weight_decay"], attack=acfg, seed=d["seed"])

    def smoothing_config(self) -> SmoothingConfig:
        d = self.as_dict()
        return SmoothingConfig(n_samples=d["smoothing.n_samples"], aggregation=d["smoothing.aggregation"],
                               policy=augment.smoothing_policy(d["smoothing.crop_scale"], self.policy()))


def _validate(d: Mapping[str, Any]) -> List[str]:
    problems = []
    for key, allowed in CHOICES.items():
        if d[key] not in allowed:
            problems.append(f"{key}: {d[key]!r} is not one of {', '.join(allowed)}")
    positive = ["train.epochs", "train.batch_size", "linear.epochs", "linear.batch_size", "smoothing.n_samples",
                "data.toy.classes", "data.toy.samples_per_class", "data.toy.image_size", "workers",
                "model.feature_dim", "model.projection_dim", "model.num_classes", "linear.robust_epochs"]
    for key in positive:
        if d[key] < 1:
            problems.append(f"{key}: must be >= 1, got {d[key]}")
    for key in ["train.base_lr", "train.temperature", "linear.lr", "linear.robust_lr", "attack.step_size",
                "linear.attack_step_size", "smoothing.crop_scale"]:
        if not d[key] > 0:
            problems.append(f"{key}: must be > 0, got {d[key]}")
    for key in ["train.lam", "train.weight_decay", "attack.epsilon", "linear.attack_epsilon", "train.trades_beta",
                "train.ss_weight", "linear.weight_decay", "attack.steps", "linear.attack_steps", "eval.steps",
                "data.toy.test_size", "train.warmup_epochs"]:
        if d[key] < 0:
            problems.append(f"{key}: must be >= 0, got {d[key]}")
    if not 0 <= d["train.momentum"] < 1:
        problems.append("train.momentum: must lie in [0, 1)")
    if d["train.batch_size"] < 2:
        problems.append("train.batch_size: contrastive batches need >= 2 samples")
    if d["train.warmup_epochs"] > d["train.epochs"]:
        problems.append("train.warmup_epochs: must not exceed train.epochs")
    for key in ["policy.flip_prob", "policy.jitter_prob", "policy.gray_prob"]:
        if not 0 <= d[key] <= 1:
            problems.append(f"{key}: probability must lie in [0, 1]")
    lo_hi = d["policy.crop_scale_range"]
    if len(lo_hi) != 2 or not 0 < lo_hi[0] <= lo_hi[1] <= 1:
        problems.append("policy.crop_scale_range: need two values 0 < lo <= hi <= 1")
    if len(d["policy.jitter_strengths"]) != 3:
        problems.append("policy.jitter_strengths: need three values (hue, brightness, saturation)")
    if d["model.encoder_arch"] == "small_cnn" and d["model.channels"] and d["model.feature_dim"] != d["model.channels"][-1]:
        problems.append("model.feature_dim: must equal the last entry of model.channels for small_cnn")
    if any(n < 1 for n in d["smoothing.n_values"]):
        problems.append("smoothing.n_values: entries must be >= 1")
    if any(b < 2 for b in d["ablate.batch_sizes"]):
        problems.append("ablate.batch_sizes: entries must be >= 2")
    if any(x < 0 for x in d["ablate.lambdas"]):
        problems.append("ablate.lambdas: entries must be >= 0")
    if d["data.source"] in ("cifar10", "dir"):
        for key in ("data.train", "data.test"):
            if not d[key]:
                problems.append(f"{key}: required when data.source = {d['data.source']}")
            elif not Path(d[key]).exists():
                problems.append(f"{key}: path {d[key]!r} does not exist")
    for key in ("checkpoint", "source_checkpoint"):
        if d[key] and not Path(d[key]).exists():
            problems.append(f"{key}: path {d[key]!r} does not exist")
    return problems


def build(values: Mapping[str, Any]) -> ExperimentConfig:
    """Typed config from a (partial) mapping; raises :class:`ConfigError` listing every bad field."""
    problems = [f"{k}: unknown key" for k in values if k not in SCHEMA]
    merged = {k: default for k, (_, default) in SCHEMA.items()}
    for k, v in values.items():
        if k not in SCHEMA:
            continue
        kind = SCHEMA[k][0]
        try:
            merged[k] = parse_value(kind, v) if isinstance(v, str) and kind != "str" else _coerce(kind, v)
        except (ValueError, TypeError, ZeroDivisionError) as exc:
            problems.append(f"{k}: {exc}")
    if not problems:
        problems = _validate(merged)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(tuple(sorted(merged.items())))


def _coerce(kind: str, v):
    if kind == "int":
        if isinstance(v, bool) or int(v) != v:
            raise ValueError(f"expected an integer, got {v!r}")
        return int(v)
    if kind == "float":
        return float(v)
    if kind == "bool":
        if not isinstance(v, bool):
            raise ValueError(f"expected a boolean, got {v!r}")
        return v
    if kind == "str":
        return str(v)
    if kind in ("ints", "floats", "strs"):
        return tuple(_coerce(kind[:-1] if kind != "strs" else "str", x) for x in v)
    raise ValueError(kind)


def parse_text(text: str) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: Dict[str, str] = {}
    problems = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {no}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    if problems:
        raise ConfigError(problems)
    return out


def parse(text: str) -> ExperimentConfig:
    return build(parse_text(text))


def load(path=None, preset: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Schema defaults, then ``preset``, then the file at ``path``, then ``key=value`` overrides."""
    values: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"preset: unknown preset {preset!r} (have {', '.join(PRESETS)})"])
        values.update(PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config: file {str(p)!r} does not exist"])
        values.update(parse_text(p.read_text(encoding="utf-8")))
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"--set: expected key=value, got {item!r}"])
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return build(values)
