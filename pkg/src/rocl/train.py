"""Training loops: robust contrastive learning, supervised AT, TRADES, finetuning.

All loops use SGD with momentum and decoupled-from-BN weight decay, and draw
every random quantity from seeds derived as
``derive_seed(seed, epoch, sample_index, view)`` so that results do not
depend on how work is split across workers.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attacks, augment, losses
from . import tensor_core as tc
from .data import Dataset
from .model import (ENCODER, HEAD, PROJECTOR, ModelConfig, ModelParams, build_network, init_params,
                    is_bn_param, save_checkpoint, update_running_stats)

log = logging.getLogger(__name__)

VIEW_T, VIEW_T_PRIME, VIEW_ADV = 0, 1, 2
TARGETS = {"t": VIEW_T, "t_prime": VIEW_T_PRIME}
AUGMENT_CHUNK = 64
# stream identifiers mixed into derive_seed
_SHUFFLE, _ATTACK, _INIT = 101, 202, 303


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, terms: Dict[str, float]):
        self.epoch, self.step, self.terms = epoch, step, terms
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {terms}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    base_lr: float = 0.1
    warmup_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-6
    lam: float = 1 / 256
    temperature: float = 0.5
    attack: attacks.AttackConfig = attacks.AttackConfig(loss_kind="contrastive")
    attack_target: str = "t_prime"  # X
    regularizer_target: str = "t_prime"  # Y
    symmetric: bool = True  # both clean views act as anchors
    adv_negatives: bool = True  # adversarial views of other samples count as negatives
    attack_bn_mode: str = "train"
    policy: augment.AugmentPolicy = augment.AugmentPolicy()
    seed: int = 0
    workers: int = 1
    debug_checks: bool = True
    # supervised trainers
    supervised_augment: bool = False
    trades_beta: float = 6.0
    ss_weight: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.attack_target not in TARGETS or self.regularizer_target not in TARGETS:
            raise ValueError("attack/regularizer targets must be 't' or 't_prime'")
        if self.attack_bn_mode not in ("train", "eval"):
            raise ValueError("attack_bn_mode must be 'train' or 'eval'")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def published_preset() -> TrainConfig:
    """Non-optimizer hyperparameters as published for CIFAR-10 (not desk-runnable)."""
    return TrainConfig(
        epochs=1000, batch_size=512, base_lr=1.0, warmup_epochs=10, momentum=0.9, weight_decay=1e-6,
        lam=1 / 256, temperature=0.5,
        attack=attacks.AttackConfig(norm="linf", epsilon=0.0314, step_size=0.007, steps=7,
                                    random_start=False, loss_kind="contrastive"),
    )


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    rocl_loss: float
    reg_loss: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)
    checkpoint_path: Optional[str] = None

    HEADER = "epoch,total_loss,rocl_loss,reg_loss,lr,seconds"

    def to_csv(self, path, wall_time: bool = False) -> None:
        """Write the per-epoch table; ``seconds`` is left empty unless ``wall_time``."""
        lines = [self.HEADER]
        for r in self.records:
            secs = f"{r.seconds:.3f}" if wall_time else ""
            lines.append(f"{r.epoch},{r.total_loss:.6f},{r.rocl_loss:.6f},{r.reg_loss:.6f},{r.lr:.6f},{secs}")
        Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def lr_schedule(epoch_fraction: float, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr over warmup_epochs, then cosine decay to 0."""
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ValueError("epoch_fraction must lie in [0, 1]")
    t = epoch_fraction * cfg.epochs
    if cfg.warmup_epochs > 0 and t < cfg.warmup_epochs:
        return cfg.base_lr * t / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.base_lr
    progress = (t - cfg.warmup_epochs) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """SGD with momentum; weight decay skips BN scale/shift."""

    def __init__(self, names: Sequence[str], momentum: float = 0.9, weight_decay: float = 0.0):
        self.names = list(names)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name in self.names:
            w = params.tensors[name]
            g = grads[name].astype(w.dtype, copy=False)
            if self.weight_decay and not is_bn_param(name):
                g = g + self.weight_decay * w
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            w -= (lr * v).astype(w.dtype)


# ---------------------------------------------------------------------------
# augmentation helpers
# ---------------------------------------------------------------------------


def _augment_chunk(policy, seed, epoch, view, images, indices):
    specs = [augment.sample_transform(policy, augment.derive_seed(seed, epoch, int(i), view), images.shape[1:])
             for i in indices]
    return augment.apply_batch(specs, images)


def augment_views(images: np.ndarray, indices: Sequence[int], epoch: int, view: int,
                  policy: augment.AugmentPolicy, seed: int, workers: int = 1) -> np.ndarray:
    """Per-sample augmentation; identical output for any ``workers``."""
    indices = np.asarray(indices)
    bounds = list(range(0, len(indices), AUGMENT_CHUNK))
    jobs = [(images[b:b + AUGMENT_CHUNK], indices[b:b + AUGMENT_CHUNK]) for b in bounds]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: _augment_chunk(policy, seed, epoch, view, *j), jobs))
    else:
        parts = [_augment_chunk(policy, seed, epoch, view, *j) for j in jobs]
    return np.concatenate(parts).astype(tc.get_dtype())


def batches(n: int, batch_size: int, seed: int, epoch: int, min_size: int = 2):
    order = np.random.default_rng(augment.derive_seed(seed, epoch, _SHUFFLE)).permutation(n)
    for b in range(0, n, batch_size):
        idx = order[b:b + batch_size]
        if len(idx) >= min_size:
            yield idx


def _check_ball(x_adv, x0, cfg: attacks.AttackConfig):
    lo, hi = cfg.clamp_range
    if x_adv.min() < lo - 1e-6 or x_adv.max() > hi + 1e-6:
        raise AssertionError("adversarial example left the valid pixel range")
    if (attacks.ball_norm(x_adv - x0, cfg.norm) > cfg.epsilon * (1 + 1e-5) + 1e-6).any():
        raise AssertionError("adversarial example left its epsilon ball")


# ---------------------------------------------------------------------------
# RoCL
# ---------------------------------------------------------------------------


def rocl_masks(cfg: TrainConfig):
    """Positive masks / view sets for the RoCL term and the regulariser over views (t, t', adv)."""
    pos = np.zeros((3, 3), dtype=bool)
    pos[VIEW_T, [VIEW_T_PRIME, VIEW_ADV]] = True
    pos[VIEW_T_PRIME, [VIEW_T, VIEW_ADV]] = True
    anchors = [VIEW_T, VIEW_T_PRIME] if cfg.symmetric else [VIEW_T]
    reg = np.zeros((3, 3), dtype=bool)
    reg[VIEW_ADV, TARGETS[cfg.regularizer_target]] = True
    negatives = [VIEW_T, VIEW_T_PRIME, VIEW_ADV] if cfg.adv_negatives else [VIEW_T, VIEW_T_PRIME]
    return pos, anchors, reg, negatives


def build_rocl_loss(config: ModelConfig, m: int, cfg: TrainConfig):
    """Graph over x = [t(x); t'(x); t(x)^adv] (view-major, 3m rows)."""
    g = tc.Graph()
    x = g.leaf("x")
    z = build_network(g, x, config)["z"]
    z_views = z.reshape(3, m, -1).transpose(1, 0, 2)
    pos, anchors, reg, negatives = rocl_masks(cfg)
    rocl = losses.batch_nt_xent_var(z_views, m, 3, pos, cfg.temperature, anchors, negatives)
    regl = losses.batch_nt_xent_var(z_views, m, 3, reg, cfg.temperature, [VIEW_ADV], negatives)
    total = rocl + regl * cfg.lam if cfg.lam else rocl + regl * 0.0
    return g, {"total": total, "rocl": rocl, "reg": regl}


def instance_attack_batch(config: ModelConfig, params: ModelParams, tx: np.ndarray, tpx: np.ndarray,
                          cfg: TrainConfig, seed: int) -> np.ndarray:
    """Instance-wise attack on t(x) against its X-target view, other samples' clean views as negatives."""
    acfg = cfg.attack
    if acfg.steps == 0 and not acfg.random_start:
        return tx.copy()
    m = tx.shape[0]
    g = tc.Graph()
    z_node = build_network(g, g.leaf("x"), config)["z"]
    both = np.concatenate([tx, tpx])
    z = tc.forward(g, {**params.bindings(), "x": both}, [z_node], mode=cfg.attack_bn_mode)[z_node.id]
    z_t, z_tp = z[:m], z[m:]
    target = z_tp if cfg.attack_target == "t_prime" else z_t
    sample = np.concatenate([np.arange(m), np.arange(m)])
    neg_mask = sample[None, :] != np.arange(m)[:, None]
    return attacks.instance_wise_attack(config, params, tx, target[:, None, :], z, acfg, seed,
                                        negative_mask=neg_mask, temperature=cfg.temperature,
                                        mode=cfg.attack_bn_mode)


def rocl_step(params: ModelParams, config: ModelConfig, images: np.ndarray, indices: Sequence[int],
              cfg: TrainConfig, optimizer: SGD, lr: float, epoch: int, step: int = 0) -> Dict[str, float]:
    """One update of f and g on a batch of unlabeled images; mutates ``params``."""
    m = images.shape[0]
    if m < 2:
        raise ValueError("a RoCL batch needs at least two samples")
    tx = augment_views(images, indices, epoch, VIEW_T, cfg.policy, cfg.seed, cfg.workers)
    tpx = augment_views(images, indices, epoch, VIEW_T_PRIME, cfg.policy, cfg.seed, cfg.workers)
    adv = instance_attack_batch(config, params, tx, tpx, cfg,
                                augment.derive_seed(cfg.seed, epoch, step, _ATTACK))
    if cfg.debug_checks:
        _check_ball(adv, tx, cfg.attack)
    g, out = build_rocl_loss(config, m, cfg)
    wrt = params.names(ENCODER, PROJECTOR)
    try:
        ev, grads = tc.value_and_grad(g, out["total"], wrt, {**params.bindings(),
                                                              "x": np.concatenate([tx, tpx, adv])},
                                      mode="train", extra_outputs=[out["rocl"], out["reg"]])
    except tc.NonFiniteError as exc:
        raise TrainingDiverged(epoch, step, {"error": str(exc)}) from exc
    terms = {k: float(ev[v]) for k, v in out.items()}
    if not all(math.isfinite(v) for v in terms.values()):
        raise TrainingDiverged(epoch, step, terms)
    optimizer.step(params, grads, lr)
    update_running_stats(params, ev.bn_stats)
    return terms


def _run_epochs(n: int, cfg: TrainConfig, step_fn, checkpoint_dir, params, config, tag: str) -> TrainReport:
    report = TrainReport()
    steps_per_epoch = max(1, sum(1 for _ in batches(n, cfg.batch_size, cfg.seed, 0)))
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        sums = {"total": 0.0, "rocl": 0.0, "reg": 0.0}
        count = 0
        lr = 0.0
        for step, idx in enumerate(batches(n, cfg.batch_size, cfg.seed, epoch)):
            lr = lr_schedule(min(1.0, (epoch + step / steps_per_epoch) / cfg.epochs), cfg)
            try:
                terms = step_fn(idx, epoch, step, lr)
            except (tc.NonFiniteError, attacks.AttackError) as exc:
                # a diverged update usually surfaces in the next step's attack
                raise TrainingDiverged(epoch, step, {"error": str(exc)}) from exc
            for k in sums:
                sums[k] += terms.get(k, 0.0)
            count += 1
        count = max(count, 1)
        rec = EpochRecord(epoch + 1, sums["total"] / count, sums["rocl"] / count, sums["reg"] / count, lr,
                          time.perf_counter() - start)
        report.records.append(rec)
        log.info("%s epoch %d: loss %.4f (lr %.4f, %.1fs)", tag, rec.epoch, rec.total_loss, lr, rec.seconds)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"{tag}.ckpt"
            save_checkpoint(params, config, {"method": tag, "epoch": epoch + 1, "seed": cfg.seed}, path)
            report.checkpoint_path = str(path)
    return report


def train_rocl(dataset: Dataset, model_config: ModelConfig, cfg: TrainConfig,
               checkpoint_dir=None, params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainReport]:
    """Robust contrastive learning on unlabeled images."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = init_params(model_config, augment.derive_seed(cfg.seed, _INIT)) if params is None else params
    opt = SGD(params.names(ENCODER, PROJECTOR), cfg.momentum, cfg.weight_decay)

    def step_fn(idx, epoch, step, lr):
        return rocl_step(params, model_config, dataset.images[idx], idx, cfg, opt, lr, epoch, step)

    report = _run_epochs(len(dataset), cfg, step_fn, checkpoint_dir, params, model_config, "rocl")
    return params, report


# ---------------------------------------------------------------------------
# supervised baselines
# ---------------------------------------------------------------------------


def _labeled_batch(dataset: Dataset, idx, epoch: int, cfg: TrainConfig) -> np.ndarray:
    x = dataset.images[idx]
    if cfg.supervised_augment:
        x = augment_views(x, idx, epoch, VIEW_T, cfg.policy, cfg.seed, cfg.workers)
    return x.astype(tc.get_dtype())


def _supervised_graph(config: ModelConfig, with_clean: bool, ss: bool, m: int, cfg: TrainConfig):
    g = tc.Graph()
    x = g.leaf("x")
    net = build_network(g, x, config)
    onehot = g.leaf("onehot")
    out = {}
    if with_clean:
        # rows [0, m) clean, [m, 2m) adversarial
        clean_logits, adv_logits = net["logits"][:m], net["logits"][m:2 * m]
        ce = losses.cross_entropy_var(clean_logits, onehot)
        kl = losses.kl_divergence_var(clean_logits, adv_logits)
        out.update(total=ce + kl * cfg.trades_beta if cfg.trades_beta else ce + kl * 0.0, ce=ce, kl=kl)
    else:
        adv_logits = net["logits"][:m]
        ce = losses.cross_entropy_var(adv_logits, onehot)
        out.update(total=ce, ce=ce)
        if ss:
            z = net["z"][m:3 * m]
            mask = ~np.eye(2, dtype=bool)
            ssl = losses.batch_nt_xent_var(z.reshape(2, m, -1).transpose(1, 0, 2), m, 2, mask, cfg.temperature)
            out.update(total=ce + ssl * cfg.ss_weight, ss=ssl)
    return g, out


def _supervised_loop(dataset: Dataset, model_config: ModelConfig, cfg: TrainConfig, params: ModelParams,
                     trainable, mode: str, checkpoint_dir=None) -> Tuple[ModelParams, TrainReport]:
    if dataset.labels is None:
        raise ValueError("supervised training needs labels")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    opt = SGD(trainable, cfg.momentum, cfg.weight_decay)
    acfg = cfg.attack

    def step_fn(idx, epoch, step, lr):
        y = dataset.labels[idx]
        x = _labeled_batch(dataset, idx, epoch, cfg)
        m = len(idx)
        seed = augment.derive_seed(cfg.seed, epoch, step, _ATTACK)
        if mode == "trades":
            clean_logits = _logits(params, model_config, x, cfg.attack_bn_mode)
            grad_fn = attacks.classifier_objective(model_config, params, y, "kl", mode=cfg.attack_bn_mode,
                                                   clean_logits=clean_logits)
            start = x + 0.001 * np.random.default_rng(seed).standard_normal(x.shape).astype(x.dtype)
            start = attacks.project_ball(start, x, acfg.epsilon, acfg.norm, acfg.clamp_range)
            adv = attacks.run_pgd(x, grad_fn, acfg.with_(random_start=False), seed, x_init=start) \
                if acfg.steps else x.copy()
            batch = np.concatenate([x, adv])
        else:
            adv = attacks.pgd_supervised(model_config, params, x, y, acfg.with_(loss_kind="cross_entropy"), seed,
                                         mode=cfg.attack_bn_mode) if (acfg.steps or acfg.random_start) else x
            batch = adv
            if mode == "finetune" and cfg.ss_weight:
                v0 = augment_views(dataset.images[idx], idx, epoch, VIEW_T, cfg.policy, cfg.seed, cfg.workers)
                v1 = augment_views(dataset.images[idx], idx, epoch, VIEW_T_PRIME, cfg.policy, cfg.seed, cfg.workers)
                batch = np.concatenate([adv, v0, v1])
        if cfg.debug_checks:
            _check_ball(adv, x, acfg)
        g, out = _supervised_graph(model_config, mode == "trades", mode == "finetune" and bool(cfg.ss_weight), m, cfg)
        onehot = losses.one_hot(y, model_config.num_classes)
        try:
            ev, grads = tc.value_and_grad(g, out["total"], trainable,
                                          {**params.bindings(), "x": batch, "onehot": onehot}, mode="train")
        except tc.NonFiniteError as exc:
            raise TrainingDiverged(epoch, step, {"error": str(exc)}) from exc
        total = float(ev[out["total"]])
        if not math.isfinite(total):
            raise TrainingDiverged(epoch, step, {"total": total})
        opt.step(params, grads, lr)
        update_running_stats(params, ev.bn_stats)
        reg = float(ev[out["kl"]]) if "kl" in out else (float(ev[out["ss"]]) if "ss" in out else 0.0)
        return {"total": total, "rocl": 0.0, "reg": reg}

    report = _run_epochs(len(dataset), cfg, step_fn, checkpoint_dir, params, model_config, mode)
    return params, report


def _logits(params, config, x, mode):
    g = tc.Graph()
    logits = build_network(g, g.leaf("x"), config)["logits"]
    return tc.forward(g, {**params.bindings(), "x": x}, [logits], mode=mode)[logits.id]


def train_at(dataset_labeled: Dataset, model_config: ModelConfig, cfg: TrainConfig,
             checkpoint_dir=None, params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainReport]:
    """Supervised adversarial training: minimise CE on PGD examples (steps=0 gives standard training)."""
    params = init_params(model_config, augment.derive_seed(cfg.seed, _INIT)) if params is None else params
    return _supervised_loop(dataset_labeled, model_config, cfg, params, params.names(ENCODER, HEAD), "at",
                            checkpoint_dir)


def train_trades(dataset_labeled: Dataset, model_config: ModelConfig, cfg: TrainConfig, beta: Optional[float] = None,
                 checkpoint_dir=None, params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainReport]:
    """CE(clean) + beta * KL(clean || adv), the inner attack ascending the KL term."""
    if beta is not None:
        cfg = replace(cfg, trades_beta=float(beta))
    params = init_params(model_config, augment.derive_seed(cfg.seed, _INIT)) if params is None else params
    return _supervised_loop(dataset_labeled, model_config, cfg, params, params.names(ENCODER, HEAD), "trades",
                            checkpoint_dir)


def finetune_rocl_at_ss(pretrained_params: ModelParams, dataset_labeled: Dataset, model_config: ModelConfig,
                        cfg: TrainConfig, checkpoint_dir=None) -> Tuple[ModelParams, TrainReport]:
    """Adversarial finetuning of a RoCL model, optionally adding the contrastive loss on clean views.

    Every parameter group (encoder, projector, head) is trainable.
    """
    params = pretrained_params.copy()
    trainable = params.names(ENCODER, HEAD) + (params.names(PROJECTOR) if cfg.ss_weight else [])
    return _supervised_loop(dataset_labeled, model_config, cfg, params, trainable, "finetune", checkpoint_dir)
