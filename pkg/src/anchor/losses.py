"""Training objectives.

Contrastive losses take unit-norm projections ``z`` of shape ``[N, P]`` and an
integer label vector. The positive set of anchor ``i`` is every other row with
the same label (across both views); anchors with no positives are skipped.

The hard-positive weights are part of the differentiated graph, so the
backward rule includes their dependence on the similarities.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from anchor import autodiff as ad

log = logging.getLogger(__name__)

NORM_TOL = 1e-5


@dataclass
class LossConfig:
    tau: float = 0.1
    lam: float = 1.0
    beta_start: float = 0.5
    beta_end: float = 2.0
    total_epochs: int = 30
    margin: float | None = None  # None or <= -1 disables the negative margin
    reduction: str = "mean"  # "mean" over valid anchors, or "sum"

    def __post_init__(self):
        if self.tau <= 0 or self.beta_start <= 0 or self.beta_end <= 0:
            raise ValueError("tau, beta_start and beta_end must be strictly positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.margin is not None and not -1.0 <= self.margin <= 1.0:
            raise ValueError("margin must lie in [-1, 1]")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    @property
    def margin_active(self):
        return self.margin is not None and self.margin > -1.0


@dataclass
class ContrastiveBatch:
    """Projections of the augmented and adversarial views, stacked."""

    z: ad.Tensor
    labels: np.ndarray
    views: np.ndarray = field(default=None)

    @classmethod
    def from_views(cls, z_aug, z_adv, labels):
        labels = np.asarray(labels)
        z = ad.concat([z_aug, z_adv])
        views = np.repeat(np.array(["aug", "adv"]), len(labels))
        return cls(z, np.concatenate([labels, labels]), views)


def beta_schedule(t, cfg):
    """Hardness coefficient for epoch ``t``: geometric interpolation from
    ``beta_start`` (t = 0) to ``beta_end`` (t = total_epochs)."""
    if not 0 <= t <= cfg.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.total_epochs}]")
    if t == 0:
        return float(cfg.beta_start)
    return float(cfg.beta_start * (cfg.beta_end / cfg.beta_start) ** (t / cfg.total_epochs))


def _check_unit_rows(z):
    norms = np.sqrt((np.asarray(z, dtype=np.float64) ** 2).sum(axis=1))
    if not np.all(np.abs(norms - 1.0) <= NORM_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"contrastive loss needs unit-norm rows (worst deviation {worst:.3g})")


def _masks(labels):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ad.ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    n = len(labels)
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    off_diag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    return off_diag, pos


def _masked_softmax(logits, mask):
    """Row-wise log-sum-exp and softmax restricted to ``mask``; empty rows give 0."""
    masked = np.where(mask, logits, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(masked - top), 0.0)
    s = e.sum(axis=1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    lse = (top + np.log(safe))[:, 0]
    return lse, e / safe


def _reduce_scale(valid, reduction):
    count = int(valid.sum())
    if count == 0:
        log.warning("contrastive loss: no anchor has a positive; returning 0")
        return 0.0
    return 1.0 / count if reduction == "mean" else 1.0


def hard_positive_weights(z, labels, beta):
    """Weights ``w[i, p]`` for every anchor-positive pair (zero elsewhere).

    ``raw = exp(beta * (1 - z_i . z_p))`` normalized so the weights of each
    anchor average to 1 over its positives. Less similar positives weigh more.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    zv = z.values if isinstance(z, ad.Tensor) else np.asarray(z)
    _, pos = _masks(labels)
    sims = zv @ zv.T
    pi = _positive_distribution(sims, pos, beta)
    return pi * pos.sum(axis=1, keepdims=True)


def _positive_distribution(sims, pos, beta):
    # exp(beta * (1 - s)) up to a per-row constant, normalized over positives
    _, pi = _masked_softmax(-beta * sims, pos)
    return pi


def scl_loss(z, labels, tau, reduction="mean"):
    """Supervised contrastive loss with uniform positive weights."""
    _check_unit_rows(z.values)
    off_diag, pos = _masks(labels)
    gram = ad.pairwise_dot(z)
    S = gram.values
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    c = _reduce_scale(valid, reduction)

    logits = S / S.dtype.type(tau)
    lse, soft = _masked_softmax(logits, off_diag)
    safe_n = np.maximum(n_pos, 1)
    pos_mean = np.where(pos, logits, 0.0).sum(axis=1) / safe_n
    per_anchor = np.where(valid, lse - pos_mean, 0.0)
    value = per_anchor.sum() * c

    def vjp(g):
        G = soft - pos / safe_n[:, None]
        G = np.where(valid[:, None], G, 0.0) * (g * c / tau)
        return (G.astype(S.dtype),)

    return ad.custom("scl", np.asarray(value, dtype=S.dtype), [gram], vjp)


def anchor_loss(z, labels, beta, cfg):
    """Hard-positive-weighted supervised contrastive loss with optional
    negative margin.

    Negatives whose similarity to the anchor falls below ``cfg.margin`` are
    dropped from the denominator; positives are always kept. With ``beta = 0``
    and the margin disabled this equals :func:`scl_loss`.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    _check_unit_rows(z.values)
    off_diag, pos = _masks(labels)
    gram = ad.pairwise_dot(z)
    S = gram.values
    tau = cfg.tau
    valid = pos.sum(axis=1) > 0
    c = _reduce_scale(valid, cfg.reduction)

    denom_mask = off_diag
    if cfg.margin_active:
        denom_mask = off_diag & (pos | (S >= cfg.margin))
    logits = S / S.dtype.type(tau)
    lse, soft = _masked_softmax(logits, denom_mask)
    pi = _positive_distribution(S, pos, beta)
    # sum_p (w_ip / |P(i)|) * log-ratio, with w_ip / |P(i)| = pi_ip
    pos_term = (pi * np.where(pos, logits, 0.0)).sum(axis=1)
    per_anchor = np.where(valid, lse - pos_term, 0.0)
    value = per_anchor.sum() * c

    def vjp(g):
        s_bar = (pi * np.where(pos, S, 0.0)).sum(axis=1, keepdims=True)
        G = soft - pi + beta * pi * (np.where(pos, S, 0.0) - s_bar)
        G = np.where(valid[:, None], G, 0.0) * (g * c / tau)
        return (G.astype(S.dtype),)

    return ad.custom("anchor", np.asarray(value, dtype=S.dtype), [gram], vjp)


def ce_adv_loss(logits, labels):
    """Mean softmax cross-entropy (log argument floored at 1e-12)."""
    return ad.mean(ad.softmax_cross_entropy(logits, labels))


def combined_loss(z, z_labels, logits, labels, beta, cfg):
    """``anchor_loss + lam * ce_adv_loss``; returns ``(total, parts)``.

    ``z``/``z_labels`` are the stacked augmented + adversarial projections,
    ``logits``/``labels`` the classifier output on the adversarial view.
    """
    contrastive = anchor_loss(z, z_labels, beta, cfg)
    ce = ce_adv_loss(logits, labels)
    total = ad.add(contrastive, ad.scale(ce, cfg.lam))
    return total, {"scl": contrastive.item(), "ce": ce.item()}
