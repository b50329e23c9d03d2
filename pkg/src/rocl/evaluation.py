"""Evaluation protocols over frozen encoders.

Linear and robust-linear probes train only the head; white-box suites,
black-box transfer, transformation smoothing and transfer learning read the
parameters without touching them. Every protocol checks the encoder and
projector fingerprints before and after and raises on any change.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attacks, augment, losses
from . import tensor_core as tc
from .data import Dataset
from .model import (BUFFER, ENCODER, HEAD, PROJECTOR, ModelConfig, ModelParams, build_head, classify, encode,
                    init_params, run_network)
from .train import SGD, batches

EVAL_CHUNK = 200
FROZEN_TAGS = (ENCODER, PROJECTOR, BUFFER)
_HEAD_INIT, _ATTACK_STREAM, _SMOOTH_STREAM, _BLACKBOX_STREAM = 404, 505, 606, 707


class FrozenParameterError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearEvalConfig:
    epochs: int = 150
    batch_size: int = 128
    lr: float = 0.1
    milestones: Tuple[int, ...] = (30, 50, 100)  # in units of the 150-epoch reference schedule
    reference_epochs: int = 150
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    attack: attacks.AttackConfig = attacks.AttackConfig(norm="linf", epsilon=0.0314, step_size=0.007, steps=10)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    def lr_at(self, epoch: int) -> float:
        """Step decay; milestones scale with ``epochs / reference_epochs``."""
        scale = self.epochs / self.reference_epochs
        drops = sum(epoch >= round(m * scale) for m in self.milestones)
        return self.lr * self.gamma ** drops


def robust_linear_preset(**changes) -> LinearEvalConfig:
    return replace(LinearEvalConfig(lr=0.02), **changes)


def transfer_preset(**changes) -> LinearEvalConfig:
    return replace(LinearEvalConfig(epochs=100, lr=0.2, milestones=(), reference_epochs=100), **changes)


def eot_preset() -> attacks.AttackConfig:
    return attacks.AttackConfig(norm="linf", epsilon=0.0314, step_size=0.00314, steps=20)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _freeze_guard(params: ModelParams):
    before = params.fingerprint(*FROZEN_TAGS)

    def check(stage: str):
        if params.fingerprint(*FROZEN_TAGS) != before:
            raise FrozenParameterError(f"{stage} modified frozen encoder/projector parameters")

    return check


def head_config(config: ModelConfig, dataset: Dataset) -> ModelConfig:
    n = dataset.num_classes or config.num_classes
    return config if n == config.num_classes else replace(config, num_classes=n)


def fresh_head(params: ModelParams, config: ModelConfig, seed: int) -> ModelParams:
    """Copy of ``params`` with a newly initialised head sized for ``config``."""
    out = params.copy()
    new = init_params(config, augment.derive_seed(seed, _HEAD_INIT))
    for name in new.names(HEAD):
        out.tensors[name] = new.tensors[name]
        out.tags[name] = HEAD
    return out


def features(params: ModelParams, config: ModelConfig, images: np.ndarray) -> np.ndarray:
    parts = [encode(params, config, images[b:b + EVAL_CHUNK]) for b in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(parts) if parts else np.zeros((0, config.feature_dim), tc.get_dtype())


def predict(params: ModelParams, config: ModelConfig, images: np.ndarray) -> np.ndarray:
    return classify(params, config, features(params, config, images)).argmax(axis=1)


def accuracy(params: ModelParams, config: ModelConfig, images: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of correct predictions."""
    if len(labels) == 0:
        return 0.0
    return 100.0 * float((predict(params, config, images) == labels).mean())


def _head_graph():
    g = tc.Graph()
    logits = build_head(g, g.leaf("h"))
    return g, losses.cross_entropy_var(logits, g.leaf("onehot"))


def _head_step(params, opt, g, loss, h, onehot, lr):
    grads = tc.grad(g, loss, params.names(HEAD), {**params.tensors, "h": h, "onehot": onehot})
    opt.step(params, grads, lr)


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------


def linear_eval(frozen_params: ModelParams, config: ModelConfig, dataset: Dataset, cfg: LinearEvalConfig,
                test_set: Optional[Dataset] = None) -> Tuple[ModelParams, float]:
    """Train a fresh linear head on frozen eval-mode features with CE.

    Returns params carrying the new head and the accuracy on ``test_set``
    (the training set when no test set is given).
    """
    if dataset.labels is None:
        raise ValueError("linear evaluation needs labels")
    check = _freeze_guard(frozen_params)
    hc = head_config(config, dataset)
    params = fresh_head(frozen_params, hc, cfg.seed)
    h = features(params, hc, dataset.images)
    onehot = losses.one_hot(dataset.labels, hc.num_classes)
    opt = SGD(params.names(HEAD), cfg.momentum, cfg.weight_decay)
    g, loss = _head_graph()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for idx in batches(len(dataset), cfg.batch_size, cfg.seed, epoch, min_size=1):
            _head_step(params, opt, g, loss, h[idx], onehot[idx], lr)
    check("linear_eval")
    ev = test_set or dataset
    return params, accuracy(params, hc, ev.images, ev.labels)


def robust_linear_eval(frozen_params: ModelParams, config: ModelConfig, dataset: Dataset, cfg: LinearEvalConfig,
                       test_set: Optional[Dataset] = None) -> Tuple[ModelParams, float]:
    """Linear probe trained on class-wise PGD examples crafted through the frozen encoder and current head."""
    acfg = cfg.attack
    if acfg.steps == 0 and not acfg.random_start:
        return linear_eval(frozen_params, config, dataset, cfg, test_set)
    if dataset.labels is None:
        raise ValueError("robust linear evaluation needs labels")
    check = _freeze_guard(frozen_params)
    hc = head_config(config, dataset)
    params = fresh_head(frozen_params, hc, cfg.seed)
    onehot = losses.one_hot(dataset.labels, hc.num_classes)
    opt = SGD(params.names(HEAD), cfg.momentum, cfg.weight_decay)
    g, loss = _head_graph()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for step, idx in enumerate(batches(len(dataset), cfg.batch_size, cfg.seed, epoch, min_size=1)):
            seed = augment.derive_seed(cfg.seed, epoch, step, _ATTACK_STREAM)
            adv = attacks.pgd_supervised(hc, params, dataset.images[idx], dataset.labels[idx], acfg, seed)
            _head_step(params, opt, g, loss, encode(params, hc, adv), onehot[idx], lr)
    check("robust_linear_eval")
    ev = test_set or dataset
    return params, accuracy(params, hc, ev.images, ev.labels)


# ---------------------------------------------------------------------------
# robustness reports
# ---------------------------------------------------------------------------


@dataclass
class AttackRow:
    attack: str  # "linf" | "l2" | "l1" | "cw"
    epsilon: float
    steps: int
    accuracy: float


@dataclass
class RobustnessReport:
    clean_accuracy: float
    rows: List[AttackRow] = field(default_factory=list)
    model: str = "model"
    seed: int = 0
    dataset: str = ""

    HEADER = ("model", "attack_norm", "epsilon", "steps", "accuracy")

    def __post_init__(self):
        for acc in [self.clean_accuracy] + [r.accuracy for r in self.rows]:
            if not 0.0 <= acc <= 100.0:
                raise ValueError("accuracies are percentages in [0, 100]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        w.writerow([self.model, "none", "0", "0", f"{self.clean_accuracy:.2f}"])
        for r in self.rows:
            w.writerow([self.model, r.attack, f"{r.epsilon:.6g}", r.steps, f"{r.accuracy:.2f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> List["RobustnessReport"]:
        """Parse one or more reports (grouped by the model column, in order of appearance)."""
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != cls.HEADER:
            raise ValueError(f"unexpected header {header}")
        reports: Dict[str, RobustnessReport] = {}
        for model, norm, eps, steps, acc in reader:
            rep = reports.setdefault(model, cls(clean_accuracy=0.0, model=model))
            if norm == "none":
                rep.clean_accuracy = float(acc)
            else:
                rep.rows.append(AttackRow(norm, float(eps), int(steps), float(acc)))
        return list(reports.values())


def attack_label(cfg: attacks.AttackConfig) -> str:
    return "cw" if cfg.loss_kind == "cw_margin" else cfg.norm


def published_suite(steps: int = 20) -> List[attacks.AttackConfig]:
    """White-box grid at CIFAR scale: seen linf 8/255 plus the unseen budgets and a CW-margin attack."""
    grid = [("linf", 8 / 255), ("linf", 16 / 255), ("l2", 0.25), ("l2", 0.5), ("l1", 7.84), ("l1", 12.0)]
    suite = [attacks.AttackConfig(norm=n, epsilon=e, step_size=attacks.default_step_size(e, steps), steps=steps,
                                  random_start=True) for n, e in grid]
    suite.append(attacks.AttackConfig(norm="linf", epsilon=8 / 255, step_size=attacks.default_step_size(8 / 255, steps),
                                      steps=steps, random_start=True, loss_kind="cw_margin"))
    return suite


def scaled_suite(input_dims: Sequence[int], steps: int = 20, reference_dim: int = 3 * 32 * 32) -> List[attacks.AttackConfig]:
    """:func:`published_suite` with l2 budgets scaled by sqrt(d/d_ref) and l1 budgets by d/d_ref."""
    ratio = float(np.prod(input_dims)) / reference_dim
    out = []
    for a in published_suite(steps):
        eps = a.epsilon * (np.sqrt(ratio) if a.norm == "l2" and a.loss_kind != "cw_margin" else
                           ratio if a.norm == "l1" else 1.0)
        out.append(a.with_(epsilon=float(eps), step_size=attacks.default_step_size(float(eps), steps)))
    return out


def _attack_chunk(params, config, x, y, acfg, seed):
    if acfg.loss_kind == "cw_margin":
        return attacks.cw_attack(config, params, x, y, acfg, seed)
    return attacks.pgd_supervised(config, params, x, y, acfg.with_(loss_kind="cross_entropy"), seed)


def adversarial_examples(params: ModelParams, config: ModelConfig, images: np.ndarray, labels: np.ndarray,
                         acfg: attacks.AttackConfig, seed: int, workers: int = 1) -> np.ndarray:
    """White-box examples in fixed chunks, each with its own derived seed (worker-count independent)."""
    bounds = list(range(0, len(images), EVAL_CHUNK))

    def job(k):
        b = bounds[k]
        return _attack_chunk(params, config, images[b:b + EVAL_CHUNK], labels[b:b + EVAL_CHUNK], acfg,
                             augment.derive_seed(seed, k))

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(bounds))))
    else:
        parts = [job(k) for k in range(len(bounds))]
    return np.concatenate(parts) if parts else images.copy()


def evaluate_robustness(params: ModelParams, config: ModelConfig, test_set: Dataset,
                        suite: Sequence[attacks.AttackConfig], seed: int = 0, model_id: str = "model",
                        workers: int = 1) -> RobustnessReport:
    """Clean accuracy plus one row per attack in ``suite``."""
    if test_set.labels is None:
        raise ValueError("robustness evaluation needs labels")
    check = _freeze_guard(params)
    x, y = test_set.images.astype(tc.get_dtype()), test_set.labels
    report = RobustnessReport(accuracy(params, config, x, y), model=model_id, seed=seed, dataset=test_set.name)
    for i, acfg in enumerate(suite):
        adv = adversarial_examples(params, config, x, y, acfg, augment.derive_seed(seed, _ATTACK_STREAM, i), workers)
        report.rows.append(AttackRow(attack_label(acfg), acfg.epsilon, acfg.steps, accuracy(params, config, adv, y)))
    check("evaluate_robustness")
    return report


def blackbox_examples(source_params: ModelParams, source_config: ModelConfig, test_set: Dataset,
                      attack_cfg: attacks.AttackConfig, source_kind: str = "pgd", seed: int = 0,
                      temperature: float = 0.5) -> np.ndarray:
    """Adversarial examples crafted on the source model.

    ``pgd`` ascends CE through the source's linear head; ``instance`` runs the
    label-free contrastive attack through the source's projector, using each
    clean image's own embedding as positive and the rest of its chunk as negatives.
    """
    x = test_set.images.astype(tc.get_dtype())
    if source_kind == "pgd":
        return adversarial_examples(source_params, source_config, x, test_set.labels, attack_cfg,
                                    augment.derive_seed(seed, _BLACKBOX_STREAM))
    if source_kind != "instance":
        raise ValueError("source_kind must be 'pgd' or 'instance'")
    acfg = attack_cfg.with_(loss_kind="contrastive")
    parts = []
    for k, b in enumerate(range(0, len(x), EVAL_CHUNK)):
        xb = x[b:b + EVAL_CHUNK]
        z = run_network(source_params, source_config, xb, ("z",))[0]["z"]
        mask = ~np.eye(len(xb), dtype=bool)
        parts.append(attacks.instance_wise_attack(source_config, source_params, xb, z[:, None, :], z, acfg,
                                                  augment.derive_seed(seed, _BLACKBOX_STREAM, k), mask, temperature))
    return np.concatenate(parts)


def blackbox_eval(source_params: ModelParams, source_config: ModelConfig, target_params: ModelParams,
                  target_config: ModelConfig, test_set: Dataset, attack_cfg: attacks.AttackConfig,
                  source_kind: str = "pgd", seed: int = 0) -> float:
    """Accuracy of the target on examples transferred from the source."""
    checks = [_freeze_guard(source_params), _freeze_guard(target_params)]
    adv = blackbox_examples(source_params, source_config, test_set, attack_cfg, source_kind, seed)
    acc = accuracy(target_params, target_config, adv, test_set.labels)
    for c in checks:
        c("blackbox_eval")
    return acc


# ---------------------------------------------------------------------------
# transformation smoothing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothingConfig:
    n_samples: int = 30
    policy: augment.AugmentPolicy = field(default_factory=augment.smoothing_policy)
    aggregation: str = "feature_mean"  # | "logit_vote"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.aggregation not in ("feature_mean", "logit_vote"):
            raise ValueError("aggregation must be 'feature_mean' or 'logit_vote'")


def smoothed_predict(params: ModelParams, config: ModelConfig, x: np.ndarray, smoothing: SmoothingConfig,
                     seed: int = 0, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Class predictions aggregated over ``n_samples`` random transforms per image.

    Transform j of sample i is drawn from ``derive_seed(seed, index_i, j)``,
    so a sample's prediction does not depend on its batch.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    n = smoothing.n_samples
    preds = []
    per_chunk = max(1, EVAL_CHUNK // n)
    for b in range(0, len(x), per_chunk):
        xb, ib = x[b:b + per_chunk], idx[b:b + per_chunk]
        specs = [augment.sample_transform(smoothing.policy, augment.derive_seed(seed, _SMOOTH_STREAM, int(i), j),
                                          x.shape[1:]) for i in ib for j in range(n)]
        tx = augment.apply_batch(specs, np.repeat(xb, n, axis=0)).astype(tc.get_dtype())
        h = encode(params, config, tx).reshape(len(xb), n, -1)
        if smoothing.aggregation == "feature_mean":
            preds.append(classify(params, config, h.mean(axis=1)).argmax(axis=1))
        else:
            votes = classify(params, config, h.reshape(len(xb) * n, -1)).argmax(axis=1).reshape(len(xb), n)
            counts = np.stack([(votes == c).sum(axis=1) for c in range(config.num_classes)], axis=1)
            preds.append(counts.argmax(axis=1))
    out = np.concatenate(preds)
    return out[0] if single else out


def smoothed_accuracy(params, config, images, labels, smoothing: SmoothingConfig, seed: int = 0) -> float:
    if len(labels) == 0:
        return 0.0
    return 100.0 * float((smoothed_predict(params, config, images, smoothing, seed) == labels).mean())


@dataclass
class SmoothingRow:
    n: int
    clean_accuracy: float
    robust_accuracy: Optional[float]


def smoothing_curve(params: ModelParams, config: ModelConfig, test_set: Dataset, n_values: Sequence[int] = (1, 10, 100),
                    adversarial_images: Optional[np.ndarray] = None, smoothing: Optional[SmoothingConfig] = None,
                    seed: int = 0) -> List[SmoothingRow]:
    """Clean (and, given transferred examples, robust) accuracy of the smoothed classifier per n."""
    smoothing = smoothing or SmoothingConfig()
    check = _freeze_guard(params)
    rows = []
    for n in n_values:
        sc = replace(smoothing, n_samples=int(n))
        clean = smoothed_accuracy(params, config, test_set.images, test_set.labels, sc, seed)
        robust = None if adversarial_images is None else smoothed_accuracy(params, config, adversarial_images,
                                                                            test_set.labels, sc, seed)
        rows.append(SmoothingRow(int(n), clean, robust))
    check("smoothing_curve")
    return rows


def eot_smoothed_accuracy(params: ModelParams, config: ModelConfig, test_set: Dataset, smoothing: SmoothingConfig,
                          cfg: Optional[attacks.AttackConfig] = None, n_transforms: Optional[int] = None,
                          seed: int = 0) -> float:
    """Accuracy of the smoothed classifier under an EoT attack drawing from the same policy."""
    cfg = cfg or eot_preset()
    x = test_set.images.astype(tc.get_dtype())
    n_t = n_transforms or smoothing.n_samples
    parts = []
    for k, b in enumerate(range(0, len(x), EVAL_CHUNK)):
        parts.append(attacks.eot_attack(config, params, x[b:b + EVAL_CHUNK], test_set.labels[b:b + EVAL_CHUNK], cfg,
                                        n_t, smoothing.policy, augment.derive_seed(seed, _ATTACK_STREAM, k)))
    adv = np.concatenate(parts)
    return smoothed_accuracy(params, config, adv, test_set.labels, smoothing, seed)


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def transfer_eval(frozen_params: ModelParams, config: ModelConfig, train_b: Dataset, test_b: Dataset,
                  cfg: Optional[LinearEvalConfig] = None, suite: Sequence[attacks.AttackConfig] = (),
                  seed: int = 0, model_id: str = "transfer") -> Tuple[ModelParams, RobustnessReport]:
    """Linear probe on dataset B over an encoder trained on dataset A, then a robustness report on B."""
    cfg = cfg or transfer_preset()
    params, _ = linear_eval(frozen_params, config, train_b, cfg)
    report = evaluate_robustness(params, head_config(config, train_b), test_b, suite, seed, model_id)
    return params, report
