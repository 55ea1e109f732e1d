"""FGSM and l-inf PGD.

An attack objective is any callable ``objective(x: Tensor, y) -> scalar
Tensor`` that the attack ascends. Objectives may also expose
``per_sample(x: ndarray, y) -> ndarray`` so that random restarts can keep the
worst case per sample; without it restarts are compared on the batch total.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from anchor import autodiff as ad
from anchor import losses
from anchor.config import dtype
from anchor.models import classify, encode, inputs_only, project

log = logging.getLogger(__name__)


class AttackError(FloatingPointError):
    pass


@dataclass
class AttackConfig:
    eps: float = 0.031
    alpha: float = 0.003
    steps: int = 20
    objective: str = "ce"
    random_start: bool = False
    clip: tuple | None = (0.0, 1.0)
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.steps > 0 and self.alpha <= 0:
            raise ValueError("alpha must be positive when steps > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.objective not in ("ce", "combined"):
            raise ValueError(f"unknown attack objective {self.objective!r}")
        if self.clip is not None:
            self.clip = (float(self.clip[0]), float(self.clip[1]))


def train_attack(**kw):
    """PGD-10, eps 0.031, step 0.007 on the combined training loss."""
    return AttackConfig(**{"eps": 0.031, "alpha": 0.007, "steps": 10, "objective": "combined", **kw})


def apt_attack(**kw):
    return AttackConfig(**{"eps": 0.031, "alpha": 0.007, "steps": 10, "objective": "ce", **kw})


def eval_attack(**kw):
    """PGD-20, eps 0.031, step 0.003 on cross-entropy."""
    return AttackConfig(**{"eps": 0.031, "alpha": 0.003, "steps": 20, "objective": "ce", **kw})


@dataclass
class AttackReport:
    x_adv: np.ndarray
    objective_trace: list = field(default_factory=list)
    max_deviation: float = 0.0


# ---------------------------------------------------------------- objectives

class CEObjective:
    """Mean cross-entropy of the full classifier (projection head unused)."""

    def __init__(self, bundle):
        self.bundle = bundle

    def __call__(self, x, y):
        return losses.ce_adv_loss(classify(self.bundle, encode(self.bundle, x)), y)

    def per_sample(self, x, y):
        with ad.no_grad():
            logits = classify(self.bundle, encode(self.bundle, ad.Tensor(x)))
            return ad.softmax_cross_entropy(logits, y).values


class CombinedObjective:
    """Contrastive + weighted cross-entropy training loss on the perturbed batch.

    ``z_aug`` holds the (constant) projections of the augmented view; the
    perturbed view's projections are stacked after it. The contrastive term
    couples the batch, so there is no per-sample split.
    """

    def __init__(self, bundle, loss_cfg, beta, z_aug=None):
        self.bundle = bundle
        self.cfg = loss_cfg
        self.beta = beta
        self.z_aug = z_aug
        self._fallback = CEObjective(bundle)

    def __call__(self, x, y):
        y = np.asarray(y)
        labels = y if self.z_aug is None else np.concatenate([y, y])
        if len(labels) < 2 or not (labels[:, None] == labels[None, :]).sum() > len(labels):
            log.warning("combined objective: no positive pairs in batch; using cross-entropy")
            return self._fallback(x, y)
        emb = encode(self.bundle, x)
        z_adv = project(self.bundle, emb)
        z = z_adv if self.z_aug is None else ad.concat([self.z_aug, z_adv])
        total, _ = losses.combined_loss(z, labels, classify(self.bundle, emb), y, self.beta, self.cfg)
        return total


class LinearObjective:
    """``sum_i w . x_i`` for a fixed weight image ``w``; handy for checking
    the attack arithmetic."""

    def __init__(self, w):
        self.w = np.asarray(w)

    def __call__(self, x, y=None):
        w = np.broadcast_to(self.w, x.shape)
        return ad.sum(ad.mul(x, ad.Tensor(w)))

    def per_sample(self, x, y=None):
        prod = np.asarray(x) * np.broadcast_to(self.w, np.shape(x))
        return prod.reshape(len(prod), -1).sum(axis=1)


def attack_objective(kind, bundle, loss_cfg=None, beta=0.0, z_aug=None):
    if kind == "ce":
        return CEObjective(bundle)
    if kind == "combined":
        return CombinedObjective(bundle, loss_cfg or losses.LossConfig(), beta, z_aug)
    raise ValueError(f"unknown attack objective {kind!r}")


# ---------------------------------------------------------------- attacks

def _input_grad(bundle, loss_fn, x_adv, y, step):
    with inputs_only(bundle):
        xt = ad.Tensor(x_adv, requires_grad=True)
        obj = loss_fn(xt, y)
        if obj.requires_grad:
            ad.backward(obj)
    g = xt.grad if xt.grad is not None else np.zeros_like(x_adv)
    if not np.all(np.isfinite(g)):
        raise AttackError(f"non-finite input gradient at attack step {step}")
    return g, obj.item()


def _project(x_adv, x, eps, clip):
    e = x.dtype.type(eps)
    out = np.clip(x_adv, x - e, x + e)
    if clip is not None:
        out = np.clip(out, x.dtype.type(clip[0]), x.dtype.type(clip[1]))
    return out


def _value(bundle, loss_fn, x, y):
    with inputs_only(bundle), ad.no_grad():
        return loss_fn(ad.Tensor(x), y).item()


def _single_run(bundle, x, y, loss_fn, cfg, start, trace):
    x_adv = start
    values = []
    a = x.dtype.type(cfg.alpha)
    for t in range(cfg.steps):
        g, v = _input_grad(bundle, loss_fn, x_adv, y, t)
        values.append(v)
        x_adv = _project(x_adv + a * np.sign(g).astype(x.dtype), x, cfg.eps, cfg.clip)
    if trace:
        values.append(_value(bundle, loss_fn, x_adv, y))
    return x_adv, values


def pgd_attack(bundle, x, y, loss_fn, cfg, rng=None, trace=False):
    """Sign-gradient ascent with projection onto the eps-ball then the clip
    range after every step.

    With ``trace=True`` the report also carries the objective at the final
    iterate (``objective_trace`` then has ``steps + 1`` entries).
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=dtype()))
    if cfg.clip is not None and x.size and (x.min() < cfg.clip[0] or x.max() > cfg.clip[1]):
        raise ValueError("attack input lies outside the clip range")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    per_sample = getattr(loss_fn, "per_sample", None)

    best = best_score = None
    best_trace = []
    for r in range(cfg.restarts):
        start = x
        if cfg.random_start and cfg.eps > 0:
            noise = rng.uniform(-cfg.eps, cfg.eps, size=x.shape).astype(x.dtype)
            start = _project(x + noise, x, cfg.eps, cfg.clip)
        x_adv, values = _single_run(bundle, x, y, loss_fn, cfg, start, trace)
        if cfg.restarts == 1:
            best, best_trace = x_adv, values
            break
        if per_sample is not None:
            score = per_sample(x_adv, y)
            if best is None:
                best, best_score = x_adv.copy(), score
            else:
                better = score > best_score
                best[better] = x_adv[better]
                best_score = np.where(better, score, best_score)
        else:
            score = _value(bundle, loss_fn, x_adv, y)
            if best is None or score > best_score:
                best, best_score = x_adv, score
        best_trace.append(values)

    dev = float(np.max(np.abs(best.astype(np.float64) - x))) if x.size else 0.0
    return AttackReport(best, best_trace, dev)


def fgsm_attack(bundle, x, y, loss_fn, eps, clip=(0.0, 1.0)):
    """One step ``x + eps * sign(grad)``, projected and clipped."""
    x = np.ascontiguousarray(np.asarray(x, dtype=dtype()))
    if eps == 0:
        return x.copy()
    g, _ = _input_grad(bundle, loss_fn, x, y, 0)
    return _project(x + x.dtype.type(eps) * np.sign(g).astype(x.dtype), x, eps, clip)
