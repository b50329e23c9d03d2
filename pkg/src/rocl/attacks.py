"""Norm-ball projections and gradient attacks (PGD, instance-wise, CW-margin, EoT).

All attacks share one loop: an optional uniform random start inside the ball,
then ``steps`` iterations of ``x <- proj(x + step_size * direction(grad))``
where the projection is onto the epsilon ball around the clean input followed
by a clamp to the valid pixel range. Every attack is a deterministic function
of its inputs and ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import augment
from . import losses
from . import tensor_core as tc
from .model import ModelConfig, ModelParams, build_network

NORMS = ("linf", "l2", "l1")
LOSS_KINDS = ("cross_entropy", "cw_margin", "kl") + losses.ATTACK_KINDS


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.0314
    step_size: float = 0.007
    steps: int = 7
    random_start: bool = False
    loss_kind: str = "cross_entropy"
    clamp_range: Tuple[float, float] = (0.0, 1.0)
    step_rule: str = "sign"  # "sign" | "steepest"
    kappa: float = 0.0  # CW confidence margin

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.step_rule not in ("sign", "steepest"):
            raise ValueError("step_rule must be 'sign' or 'steepest'")

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


def default_step_size(epsilon: float, steps: int) -> float:
    """2.5 * eps / K, used where no step size is prescribed."""
    return 2.5 * epsilon / max(steps, 1)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(1, -1) if a.ndim == 1 else a.reshape(a.shape[0], -1)


def project_l1(delta: np.ndarray, eps: float) -> np.ndarray:
    """Euclidean projection of each row of ``delta`` onto the l1 ball of radius eps.

    Sort-based simplex projection (Duchi et al., 2008).
    """
    v = _rows(delta).astype(np.float64)
    a = np.abs(v)
    inside = a.sum(axis=1) <= eps
    if eps == 0:
        return np.zeros_like(delta)
    u = -np.sort(-a, axis=1)
    css = np.cumsum(u, axis=1)
    j = np.arange(1, v.shape[1] + 1)
    cond = u - (css - eps) / j > 0
    rho = v.shape[1] - np.argmax(cond[:, ::-1], axis=1)  # last index where cond holds
    theta = (css[np.arange(v.shape[0]), rho - 1] - eps) / rho
    w = np.sign(v) * np.maximum(a - theta[:, None], 0.0)
    w[inside] = v[inside]
    return w.reshape(delta.shape).astype(delta.dtype)


def project_ball(x: np.ndarray, x0: np.ndarray, eps: float, norm: str,
                 clamp_range: Optional[Tuple[float, float]] = (0.0, 1.0)) -> np.ndarray:
    """Nearest point to ``x`` within the ``norm`` ball of radius eps around ``x0``, then clamped.

    Arrays with more than one axis are treated as a batch along axis 0. The
    radius is shrunk by the worst-case rounding of the final cast so that the
    returned array satisfies the constraint exactly in its own dtype.
    """
    x = np.asarray(x)
    x0 = np.asarray(x0)
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x0.shape}")
    out_dtype = np.result_type(x.dtype, np.float32)
    x0d = x0.astype(np.float64)
    delta = x.astype(np.float64) - x0d
    d = delta[0].size if delta.ndim > 1 else delta.size
    unit = float(np.finfo(out_dtype).eps)  # covers |x| <= 2 with round-to-nearest
    if norm == "linf":
        delta = np.clip(delta, -eps, eps)
    elif norm == "l2":
        r = max(eps - unit * np.sqrt(d), 0.0)
        flat = _rows(delta)
        n = np.linalg.norm(flat, axis=1, keepdims=True)
        scale = np.where(n > r, r / np.maximum(n, 1e-300), 1.0)
        delta = (flat * scale).reshape(delta.shape)
    elif norm == "l1":
        delta = project_l1(delta, max(eps - unit * d, 0.0))
    else:
        raise ValueError(f"unknown norm {norm!r}")
    out = x0d + delta
    if clamp_range is not None:
        out = np.clip(out, *clamp_range)
    return out.astype(out_dtype)


def ball_norm(delta: np.ndarray, norm: str) -> np.ndarray:
    """Per-sample norm of ``delta`` (batch along axis 0)."""
    flat = _rows(np.asarray(delta, dtype=np.float64))
    if norm == "linf":
        return np.abs(flat).max(axis=1)
    if norm == "l2":
        return np.linalg.norm(flat, axis=1)
    return np.abs(flat).sum(axis=1)


def random_in_ball(shape, eps: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the ``norm`` ball, one per row."""
    n = shape[0]
    d = int(np.prod(shape[1:]))
    if norm == "linf":
        return rng.uniform(-eps, eps, size=shape)
    if norm == "l2":
        g = rng.standard_normal((n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = eps * rng.random(n) ** (1.0 / d)
        return (g * r[:, None]).reshape(shape)
    # l1: exponential spacings give a uniform point of the simplex interior
    e = rng.exponential(size=(n, d + 1))
    pts = e[:, :d] / e.sum(axis=1, keepdims=True)
    signs = rng.choice([-1.0, 1.0], size=(n, d))
    return (eps * pts * signs).reshape(shape)


def _direction(g: np.ndarray, norm: str, rule: str) -> np.ndarray:
    if rule == "sign" or norm == "linf":
        return np.sign(g)
    flat = _rows(g)
    if norm == "l2":
        n = np.linalg.norm(flat, axis=1, keepdims=True)
        return (flat / np.maximum(n, 1e-12)).reshape(g.shape)
    # l1 steepest ascent: all mass on the largest-magnitude coordinate
    out = np.zeros_like(flat)
    idx = np.argmax(np.abs(flat), axis=1)
    out[np.arange(flat.shape[0]), idx] = np.sign(flat[np.arange(flat.shape[0]), idx])
    return out.reshape(g.shape)


def run_pgd(x0: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray], cfg: AttackConfig,
            seed: int = 0, x_init: Optional[np.ndarray] = None) -> np.ndarray:
    """Projected sign-gradient ascent on whatever ``grad_fn`` differentiates.

    ``x_init`` overrides the starting point (it is projected into the ball).
    """
    x0 = np.asarray(x0, dtype=tc.get_dtype())
    rng = np.random.default_rng(seed)
    x = x0.copy()
    if x_init is not None:
        x = project_ball(np.asarray(x_init, dtype=x0.dtype), x0, cfg.epsilon, cfg.norm, cfg.clamp_range)
    elif cfg.random_start and cfg.epsilon > 0:
        noise = random_in_ball(x0.shape, cfg.epsilon, cfg.norm, rng).astype(x0.dtype)
        x = project_ball(x0 + noise, x0, cfg.epsilon, cfg.norm, cfg.clamp_range)
    for _ in range(cfg.steps):
        g = np.asarray(grad_fn(x))
        if not np.isfinite(g).all():
            raise AttackError("attack gradient is not finite")
        step = cfg.step_size * _direction(g, cfg.norm, cfg.step_rule)
        x = project_ball(x + step.astype(x.dtype), x0, cfg.epsilon, cfg.norm, cfg.clamp_range)
    return x


# ---------------------------------------------------------------------------
# model-backed objectives
# ---------------------------------------------------------------------------


def classifier_objective(config: ModelConfig, params: ModelParams, y, loss_kind: str = "cross_entropy",
                         kappa: float = 0.0, mode: str = "eval", clean_logits: Optional[np.ndarray] = None):
    """Return ``grad_fn(x)``: input gradient of the loss an attacker ascends.

    cross_entropy ascends CE, cw_margin descends the CW margin, kl ascends
    KL(softmax(clean_logits) || softmax(logits(x))).
    """
    g = tc.Graph()
    x = g.leaf("x")
    logits = build_network(g, x, config)["logits"]
    bindings = dict(params.bindings())
    if loss_kind == "cross_entropy":
        loss = losses.cross_entropy_var(logits, g.leaf("onehot"))
        bindings["onehot"] = losses.one_hot(y, config.num_classes)
    elif loss_kind == "cw_margin":
        loss = -losses.cw_margin_var(logits, g.leaf("onehot"), kappa)
        bindings["onehot"] = losses.one_hot(y, config.num_classes)
    elif loss_kind == "kl":
        if clean_logits is None:
            raise ValueError("kl objective needs clean_logits")
        loss = losses.kl_divergence_var(g.leaf("clean"), logits)
        bindings["clean"] = clean_logits
    else:
        raise ValueError(f"{loss_kind!r} is not a classifier loss")

    def grad_fn(xv):
        return tc.grad(g, loss, ["x"], {**bindings, "x": xv}, mode=mode)["x"]

    grad_fn.graph, grad_fn.loss, grad_fn.bindings = g, loss, bindings
    return grad_fn


def pgd_supervised(config: ModelConfig, params: ModelParams, x: np.ndarray, y, cfg: AttackConfig,
                   seed: int = 0, mode: str = "eval") -> np.ndarray:
    """Class-wise PGD through encoder + linear head."""
    if cfg.loss_kind not in ("cross_entropy", "cw_margin"):
        raise ValueError("pgd_supervised uses the cross_entropy or cw_margin loss")
    grad_fn = classifier_objective(config, params, y, cfg.loss_kind, cfg.kappa, mode)
    return run_pgd(x, grad_fn, cfg, seed)


def cw_attack(config: ModelConfig, params: ModelParams, x: np.ndarray, y, cfg: AttackConfig,
              seed: int = 0, mode: str = "eval") -> np.ndarray:
    """PGD on the CW margin loss max(z_y - max_{c!=y} z_c, -kappa)."""
    return pgd_supervised(config, params, x, y, cfg.with_(loss_kind="cw_margin"), seed, mode)


def instance_objective(config: ModelConfig, params: ModelParams, positives_z: np.ndarray,
                       negatives_z: Optional[np.ndarray], kind: str = "contrastive",
                       negative_mask: Optional[np.ndarray] = None, temperature: float = 0.5,
                       mode: str = "eval"):
    """``grad_fn(x)`` for the label-free attack distance through g(f(x))."""
    g = tc.Graph()
    x = g.leaf("x")
    z = build_network(g, x, config)["z"]
    ctx = losses.AttackContext(negatives=negatives_z, negative_mask=negative_mask, temperature=temperature)
    loss = losses.attack_distance_var(kind, z, positives_z, ctx)
    bindings = params.bindings()

    def grad_fn(xv):
        return tc.grad(g, loss, ["x"], {**bindings, "x": xv}, mode=mode)["x"]

    grad_fn.graph, grad_fn.loss, grad_fn.bindings = g, loss, bindings
    return grad_fn


def instance_wise_attack(config: ModelConfig, params: ModelParams, t_x: np.ndarray, positives_z: np.ndarray,
                         negatives_z: Optional[np.ndarray], cfg: AttackConfig, seed: int = 0,
                         negative_mask: Optional[np.ndarray] = None, temperature: float = 0.5,
                         mode: str = "eval") -> np.ndarray:
    """Perturb transformed inputs ``t_x`` [m,C,H,W] to confuse their instance identity.

    ``positives_z`` [m, P, d] are fixed clean embeddings of each sample's
    positive views, ``negatives_z`` [N, d] a fixed pool of other-instance
    embeddings (``negative_mask`` [m, N] selects per sample). Only the
    attacked input is re-embedded at each step.
    """
    kind = cfg.loss_kind if cfg.loss_kind in losses.ATTACK_KINDS else "contrastive"
    if kind == "contrastive" and (negatives_z is None or len(negatives_z) == 0):
        raise ValueError("the contrastive instance-wise attack needs negatives")
    grad_fn = instance_objective(config, params, positives_z, negatives_z, kind, negative_mask, temperature, mode)
    return run_pgd(t_x, grad_fn, cfg, seed)


# ---------------------------------------------------------------------------
# expectation over transformation
# ---------------------------------------------------------------------------


def sample_eot_specs(policy: augment.AugmentPolicy, seed: int, step: int, m: int, n: int,
                     image_dims) -> list:
    return [[augment.sample_transform(policy, augment.derive_seed(seed, step, i, j), image_dims)
             for j in range(n)] for i in range(m)]


def eot_gradient(config: ModelConfig, params: ModelParams, x: np.ndarray, y, specs: Sequence[Sequence],
                 loss_kind: str = "cross_entropy", mode: str = "eval", grad_fn=None) -> np.ndarray:
    """Input gradient averaged over transforms; ``specs[i]`` lists sample i's transforms."""
    x = np.asarray(x)
    m = x.shape[0]
    n = len(specs[0])
    if any(len(s) != n for s in specs):
        raise ValueError("every sample needs the same number of transforms")
    flat_specs = [s for row in specs for s in row]
    src = np.repeat(x, n, axis=0)
    tx = augment.apply_batch(flat_specs, src).astype(tc.get_dtype())
    if grad_fn is None:
        grad_fn = classifier_objective(config, params, np.repeat(np.asarray(y), n), loss_kind, mode=mode)
    g_t = grad_fn(tx)
    g_x = augment.transform_vjp(flat_specs, src, g_t)
    return g_x.reshape((m, n) + x.shape[1:]).mean(axis=1)


def eot_attack(config: ModelConfig, params: ModelParams, x: np.ndarray, y, cfg: AttackConfig,
               n_transforms: int, policy: augment.AugmentPolicy, seed: int = 0,
               mode: str = "eval") -> np.ndarray:
    """PGD whose every step averages gradients over fresh transforms of the iterate."""
    if n_transforms < 1:
        raise ValueError("n_transforms must be >= 1")
    x = np.asarray(x)
    m = x.shape[0]
    y_rep = np.repeat(np.asarray(y), n_transforms)
    grad_fn = classifier_objective(config, params, y_rep, cfg.loss_kind
                                   if cfg.loss_kind in ("cross_entropy", "cw_margin") else "cross_entropy",
                                   cfg.kappa, mode)
    counter = {"step": 0}

    def averaged(xv):
        specs = sample_eot_specs(policy, seed, counter["step"], m, n_transforms, x.shape[1:])
        counter["step"] += 1
        return eot_gradient(config, params, xv, y, specs, grad_fn=grad_fn)

    return run_pgd(x, averaged, cfg, seed)
