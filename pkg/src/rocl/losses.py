"""Scalar objectives built from tensor_core primitives.

Every loss exists in two forms: a ``*_var`` builder that appends nodes to a
graph (used inside training and attacks so gradients flow), and a plain
numpy function that evaluates it once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor_core as tc

# additive mask for excluded logits; large enough that exp() underflows to 0
MASK_BIAS = -1e9

ATTACK_KINDS = ("mse", "cosine", "manhattan", "contrastive")


def log_sum_exp(x: tc.Var, axis: int = -1) -> tc.Var:
    """Stable log(sum(exp(x))) along ``axis`` (axis is dropped)."""
    m = x.max(axis=axis, keepdims=True)
    return (m + (x - m).exp().sum(axis=axis, keepdims=True).log()).sum(axis=axis)


def log_softmax(x: tc.Var, axis: int = -1) -> tc.Var:
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


# ---------------------------------------------------------------------------
# contrastive
# ---------------------------------------------------------------------------


@dataclass
class ContrastiveBatch:
    anchor: np.ndarray
    positives: Sequence[np.ndarray]
    negatives: Sequence[np.ndarray]
    temperature: float = 0.5

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=float).reshape(-1)
        d = self.anchor.shape[0]
        if len(self.positives) < 1:
            raise ValueError("at least one positive is required")
        if len(self.negatives) < 1:
            raise ValueError("the negative set is empty")
        self.positives = np.stack([np.asarray(p, dtype=float).reshape(-1) for p in self.positives])
        self.negatives = np.stack([np.asarray(n, dtype=float).reshape(-1) for n in self.negatives])
        if self.positives.shape[1] != d or self.negatives.shape[1] != d:
            raise ValueError("all vectors must share the anchor's dimension")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def nt_xent_var(anchor: tc.Var, positives: tc.Var, negatives: tc.Var, tau: float) -> tc.Var:
    """-log( sum_pos e^{sim/tau} / (sum_pos e^{sim/tau} + sum_neg e^{sim/tau}) ).

    anchor [d], positives [P, d], negatives [N, d]; sim is cosine similarity.
    """
    g = anchor.graph
    a = g.l2_normalize(anchor.reshape(1, -1))
    sp = (a @ g.l2_normalize(positives).T) / tau
    sn = (a @ g.l2_normalize(negatives).T) / tau
    loss = log_sum_exp(g.concat([sp, sn], axis=1), axis=1) - log_sum_exp(sp, axis=1)
    return loss.sum()


def _check_nonzero(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if np.any(np.linalg.norm(np.asarray(arr, dtype=float), axis=-1) == 0):
            raise ValueError("cosine similarity is undefined for zero-norm vectors")


def nt_xent(cb: ContrastiveBatch) -> float:
    _check_nonzero(cb.anchor, cb.positives, cb.negatives)
    g = tc.Graph()
    loss = nt_xent_var(g.leaf("a"), g.leaf("p"), g.leaf("n"), cb.temperature)
    out = tc.forward(g, {"a": cb.anchor, "p": cb.positives, "n": cb.negatives}, [loss])
    return float(out[loss.id])


def contrastive_masks(m: int, positive_mask: np.ndarray, anchor_views: Optional[Sequence[int]] = None,
                      negative_views: Optional[Sequence[int]] = None):
    """Biases and anchor weights for the view-major layout (row = view * m + sample).

    Returns (positive_bias, denominator_bias, anchor_weight), the biases being
    0 where an entry participates and MASK_BIAS where it does not.
    """
    positive_mask = np.asarray(positive_mask, dtype=bool)
    V = positive_mask.shape[0]
    if positive_mask.shape != (V, V):
        raise ValueError("positive_mask must be [V, V]")
    if np.any(np.diag(positive_mask)):
        raise ValueError("a view cannot be its own positive")
    if anchor_views is None:
        anchor_views = [v for v in range(V) if positive_mask[v].any()]
    if negative_views is None:
        negative_views = list(range(V))
    if any(not positive_mask[v].any() for v in anchor_views):
        raise ValueError("every anchor view needs at least one positive view")
    view = np.repeat(np.arange(V), m)
    sample = np.tile(np.arange(m), V)
    same = sample[:, None] == sample[None, :]
    pos = same & positive_mask[view[:, None], view[None, :]]
    neg = ~same & np.isin(view, negative_views)[None, :]
    is_anchor = np.isin(view, anchor_views)
    if not neg[is_anchor].any(axis=1).all():
        raise ValueError("some anchor has no negatives (need at least 2 samples)")
    pos_bias = np.where(pos, 0.0, MASK_BIAS)
    den_bias = np.where(pos | neg, 0.0, MASK_BIAS)
    weight = is_anchor / is_anchor.sum()
    return pos_bias, den_bias, weight


def batch_nt_xent_var(z_views: tc.Var, m: int, V: int, positive_mask: np.ndarray, tau: float,
                      anchor_views: Optional[Sequence[int]] = None,
                      negative_views: Optional[Sequence[int]] = None) -> tc.Var:
    """Mean contrastive loss over anchors; ``z_views`` is [m, V, d].

    Each anchor's positives are the views of its own sample marked in
    ``positive_mask[anchor_view]``; its negatives are the ``negative_views``
    (default: all) of every other sample. The anchor never appears in its own
    denominator.
    """
    g = z_views.graph
    pos_bias, den_bias, weight = contrastive_masks(m, positive_mask, anchor_views, negative_views)
    flat = z_views.transpose(1, 0, 2).reshape(V * m, -1)
    zn = g.l2_normalize(flat)
    sims = (zn @ zn.T) / tau
    per_row = log_sum_exp(sims + den_bias, axis=1) - log_sum_exp(sims + pos_bias, axis=1)
    return (per_row * weight).sum()


def batch_nt_xent(z_views: np.ndarray, positive_mask: Optional[np.ndarray] = None, tau: float = 0.5,
                  anchor_views: Optional[Sequence[int]] = None,
                  negative_views: Optional[Sequence[int]] = None) -> float:
    """Numeric :func:`batch_nt_xent_var`; default mask makes all other views positives."""
    z_views = np.asarray(z_views)
    if z_views.ndim != 3:
        raise ValueError("z_views must be [m, V, d]")
    m, V, _ = z_views.shape
    if m < 2:
        raise ValueError("batch_nt_xent needs m >= 2 so that negatives exist")
    if V < 2:
        raise ValueError("at least two views per sample are required")
    if positive_mask is None:
        positive_mask = ~np.eye(V, dtype=bool)
    _check_nonzero(z_views)
    g = tc.Graph()
    loss = batch_nt_xent_var(g.leaf("z"), m, V, positive_mask, tau, anchor_views, negative_views)
    return float(tc.forward(g, {"z": z_views}, [loss])[loss.id])


# ---------------------------------------------------------------------------
# supervised
# ---------------------------------------------------------------------------


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy_var(logits: tc.Var, onehot: tc.Var) -> tc.Var:
    """Mean softmax cross-entropy, log-sum-exp stabilised."""
    return (log_sum_exp(logits, axis=1) - (logits * onehot).sum(axis=1)).mean()


def kl_divergence_var(logits_p: tc.Var, logits_q: tc.Var) -> tc.Var:
    """Batch mean of KL(softmax(p) || softmax(q))."""
    lp = log_softmax(logits_p, axis=1)
    lq = log_softmax(logits_q, axis=1)
    return (lp.exp() * (lp - lq)).sum(axis=1).mean()


def cw_margin_var(logits: tc.Var, onehot: tc.Var, kappa: float = 0.0) -> tc.Var:
    """Batch mean of max(logit_y - max_{c != y} logit_c, -kappa). Attacks descend it."""
    g = logits.graph
    true = (logits * onehot).sum(axis=1, keepdims=True)
    other = (logits + onehot * MASK_BIAS).max(axis=1, keepdims=True)
    margin = true - other
    floor = margin * 0.0 - kappa
    return g.concat([margin, floor], axis=1).max(axis=1).mean()


def _eval_supervised(builder, logits, other):
    g = tc.Graph()
    out = builder(g.leaf("a"), g.leaf("b"))
    return float(tc.forward(g, {"a": logits, "b": other}, [out])[out.id])


def cross_entropy(logits, labels) -> float:
    logits = np.asarray(logits)
    return _eval_supervised(cross_entropy_var, logits, one_hot(labels, logits.shape[1]))


def kl_divergence(logits_p, logits_q) -> float:
    logits_p, logits_q = np.asarray(logits_p), np.asarray(logits_q)
    if logits_p.shape != logits_q.shape:
        raise ValueError("logit arrays must share a shape")
    return _eval_supervised(kl_divergence_var, logits_p, logits_q)


def cw_margin(logits, labels, kappa: float = 0.0) -> float:
    logits = np.asarray(logits)
    return _eval_supervised(lambda a, b: cw_margin_var(a, b, kappa), logits, one_hot(labels, logits.shape[1]))


# ---------------------------------------------------------------------------
# attack distances
# ---------------------------------------------------------------------------


@dataclass
class AttackContext:
    """Fixed quantities an instance-wise attack compares against.

    ``negatives`` is a shared pool [N, d]; ``negative_mask`` [m, N] selects
    which pool entries count as negatives for each attacked sample.
    """

    negatives: Optional[np.ndarray] = None
    negative_mask: Optional[np.ndarray] = None
    temperature: float = 0.5


def attack_distance_var(kind: str, z: tc.Var, z_ref: np.ndarray, context: Optional[AttackContext] = None) -> tc.Var:
    """Per-sample distance between ``z`` [m, d] and references ``z_ref`` [m, P, d], averaged over m.

    The attack ascends this value: mse and manhattan grow with distance,
    cosine is the negated similarity, contrastive is the NT-Xent loss.
    """
    g = z.graph
    z_ref = np.asarray(z_ref)
    if z_ref.ndim == 2:
        z_ref = z_ref[:, None, :]
    m, P, d = z_ref.shape
    if kind == "mse":
        diff = z.reshape(m, 1, d) - z_ref
        return (diff * diff).mean()
    if kind == "manhattan":
        diff = z.reshape(m, 1, d) - z_ref
        return (diff.relu() + (-diff).relu()).mean()
    refn = z_ref / np.linalg.norm(z_ref, axis=-1, keepdims=True)
    zn = g.l2_normalize(z).reshape(m, 1, d)
    cos = (zn * refn).sum(axis=2)  # [m, P]
    if kind == "cosine":
        return -cos.mean()
    if kind != "contrastive":
        raise ValueError(f"unknown attack distance {kind!r}; expected one of {ATTACK_KINDS}")
    if context is None or context.negatives is None or len(context.negatives) == 0:
        raise ValueError("contrastive attack distance needs a non-empty negative set")
    neg = np.asarray(context.negatives)
    negn = (neg / np.linalg.norm(neg, axis=-1, keepdims=True)).T
    mask = np.ones((m, neg.shape[0]), bool) if context.negative_mask is None else np.asarray(context.negative_mask)
    if not mask.any(axis=1).all():
        raise ValueError("every attacked sample needs at least one negative")
    tau = context.temperature
    sp = cos / tau
    sn = (g.l2_normalize(z) @ negn) / tau + np.where(mask, 0.0, MASK_BIAS)
    return (log_sum_exp(g.concat([sp, sn], axis=1), axis=1) - log_sum_exp(sp, axis=1)).mean()


def attack_distance(kind: str, z, z_ref, context: Optional[AttackContext] = None) -> float:
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None]
        z_ref = np.asarray(z_ref, dtype=float)[None]
    g = tc.Graph()
    out = attack_distance_var(kind, g.leaf("z"), np.asarray(z_ref, dtype=float), context)
    return float(tc.forward(g, {"z": z}, [out])[out.id])
