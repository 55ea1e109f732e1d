"""Verification suites run by ``anchor gradcheck`` and ``anchor oracle-check``.

Both require double precision and return a ``{case: error}`` mapping.
"""
import numpy as np

from anchor import attacks, losses, oracles
from anchor import autodiff as ad
from anchor.config import precision
from anchor.gradcheck import finite_diff_check
from anchor.models import (
    ClassifierSpec,
    EncoderSpec,
    ModelBundle,
    ModelSpec,
    ProjectionHeadSpec,
    encode,
    project,
)

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-9


def _away_from_zero(rng, shape, gap=0.05):
    # keeps relu/log arguments clear of kinks and poles under a 1e-3 step
    v = rng.normal(size=shape)
    return np.where(v >= 0, v + gap, v - gap)


def _unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _tiny_bundle(seed, classes=3, classifier="linear"):
    spec = ModelSpec(EncoderSpec(3, 3, (3, 4), 1, 6), ProjectionHeadSpec(4, 3),
                     ClassifierSpec(classifier, classes, 4))
    return ModelBundle.build(spec, seed=seed)


def _weighted(out, r):
    """Reduce any op output to a scalar with fixed random weights."""
    if out.values.ndim == 0:
        return out
    return ad.sum(ad.mul(out, ad.Tensor(r.reshape(out.shape))))


def _kink_free_point(seed, rng, margin=0.005, tries=500):
    """A tiny model and input batch whose relu inputs all stay at least
    ``margin`` away from zero, so a 1e-3 difference step never straddles a
    kink, and whose projections are all non-degenerate."""
    for k in range(tries):
        bundle = _tiny_bundle(seed * 1000 + k)
        x = rng.uniform(0.1, 0.9, size=(4, 3, 2, 2))
        with ad.no_grad(), ad.relu_margin_probe() as probe:
            z_aug = project(bundle, encode(bundle, ad.Tensor(x[::-1].copy())))
            z = project(bundle, encode(bundle, ad.Tensor(x)))
        norms = np.linalg.norm(np.concatenate([z_aug.values, z.values]), axis=1)
        if probe["min"] >= margin and np.allclose(norms, 1.0):
            return bundle, x, z_aug
    raise RuntimeError(f"no kink-free draw in {tries} tries")


def _margin_clear_point(rng, labels, margin, band=0.02, tries=1000):
    """Raw projections whose negative-pair similarities all sit at least
    ``band`` from the margin, where the masked denominator is discontinuous."""
    neg = labels[:, None] != labels[None, :]
    for _ in range(tries):
        z = rng.normal(size=(len(labels), 4))
        u = z / np.linalg.norm(z, axis=1, keepdims=True)
        if np.all(np.abs((u @ u.T)[neg] - margin) >= band):
            return z
    raise RuntimeError(f"no margin-clear draw in {tries} tries")


def gradient_cases(seed):
    """``{name: (f, x)}`` covering every op kind and every loss."""
    rng = np.random.default_rng(seed)
    T = ad.Tensor
    cases = {}

    def add_case(name, op, x, *, out_shape=None):
        probe = op(T(x))
        r = rng.normal(size=probe.shape)
        cases[name] = (lambda t, op=op, r=r: _weighted(op(t), r), x)

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    add_case("add", lambda t: ad.add(t, T(b)), a)
    add_case("sub", lambda t: ad.sub(T(b), t), a)
    add_case("scalar-mul", lambda t: ad.scale(t, -1.7), a)
    add_case("mul", lambda t: ad.mul(t, T(b)), a)
    m = rng.normal(size=(4, 5))
    add_case("matmul/left", lambda t: ad.matmul(t, T(m)), a)
    add_case("matmul/right", lambda t: ad.matmul(T(a), t), m)
    add_case("bias-add/2d", lambda t: ad.bias_add(T(a), t), rng.normal(size=4))
    img = rng.normal(size=(2, 3, 5, 5))
    add_case("bias-add/4d", lambda t: ad.bias_add(T(img), t), rng.normal(size=3))
    w = rng.normal(size=(4, 3, 3, 3))
    add_case("conv2d/input", lambda t: ad.conv2d(t, T(w)), img)
    add_case("conv2d/weight", lambda t: ad.conv2d(T(img), t), w)
    add_case("relu", ad.relu, _away_from_zero(rng, (3, 4)))
    add_case("global-avg-pool", ad.global_avg_pool, img)
    add_case("flatten", ad.flatten, img)
    add_case("concat", lambda t: ad.concat([t, T(b)]), a)
    add_case("l2-normalize-rows", ad.l2_normalize_rows, rng.normal(size=(4, 5)))
    add_case("pairwise-dot", ad.pairwise_dot, rng.normal(size=(4, 3)))
    add_case("log-sum-exp", ad.logsumexp, rng.normal(size=(3, 5)))
    labels = rng.integers(0, 5, size=3)
    add_case("softmax-cross-entropy", lambda t: ad.softmax_cross_entropy(t, labels), rng.normal(size=(3, 5)))
    add_case("elementwise-log", ad.log, np.abs(rng.normal(size=(3, 4))) + 0.5)
    add_case("elementwise-exp", ad.exp, rng.normal(size=(3, 4)))
    add_case("sum", ad.sum, a)
    add_case("mean", ad.mean, a)

    # losses, differentiated w.r.t. raw (pre-normalisation) projections
    y6 = np.array([0, 0, 1, 1, 2, 0])
    z6 = rng.normal(size=(6, 4))
    cfg = losses.LossConfig(tau=0.5)
    cfg_margin = losses.LossConfig(tau=0.5, margin=0.0)
    cases["loss/scl"] = (lambda t: losses.scl_loss(ad.l2_normalize_rows(t), y6, 0.5), z6)
    cases["loss/anchor"] = (lambda t: losses.anchor_loss(ad.l2_normalize_rows(t), y6, 1.3, cfg), z6)
    zm = _margin_clear_point(rng, y6, cfg_margin.margin)
    cases["loss/anchor-margin"] = (lambda t: losses.anchor_loss(ad.l2_normalize_rows(t), y6, 0.7, cfg_margin),
                                   zm)
    cases["loss/anchor-tau0.1"] = (lambda t: losses.anchor_loss(ad.l2_normalize_rows(t), y6, 2.0,
                                                                losses.LossConfig(tau=0.1)), z6)
    logits = rng.normal(size=(6, 3))
    cases["loss/ce_adv"] = (lambda t: losses.ce_adv_loss(t, y6[:6] % 3), logits)
    cases["loss/combined/z"] = (
        lambda t: losses.combined_loss(ad.l2_normalize_rows(t), y6, T(logits), y6 % 3, 1.1, cfg)[0], z6)
    cases["loss/combined/logits"] = (
        lambda t: losses.combined_loss(ad.l2_normalize_rows(T(z6)), y6, t, y6 % 3, 1.1, cfg)[0], logits)

    # end to end: the training loss w.r.t. a model parameter, and the attack
    # objective w.r.t. the input at fixed parameters
    bundle, x, z_aug = _kink_free_point(seed, rng)
    yb = np.array([0, 1, 0, 2])

    def with_param(name):
        def f(t):
            saved = bundle.params[name]
            bundle.params[name] = t
            try:
                return attacks.CombinedObjective(bundle, cfg, 1.1, z_aug)(T(x), yb)
            finally:
                bundle.params[name] = saved
        return f

    for name in ("encoder.stem.weight", "projection.1.weight", "classifier.out.weight"):
        cases[f"model/combined/{name}"] = (with_param(name), bundle.params[name].values.copy())
    cases["attack/combined-objective/input"] = (
        lambda t: attacks.CombinedObjective(bundle, cfg, 1.1, z_aug)(t, yb), x)
    cases["attack/ce-objective/input"] = (lambda t: attacks.CEObjective(bundle)(t, yb), x)
    return cases


def gradient_suite(seeds=(0, 1, 2), step=1e-3):
    """Max relative finite-difference error per case, across ``seeds``."""
    worst = {}
    with precision("f64"):
        for seed in seeds:
            for name, (f, x) in gradient_cases(seed).items():
                err = finite_diff_check(f, x, step)
                worst[name] = max(err, worst.get(name, 0.0))
    return worst


def oracle_suite(batches=100, seed=0):
    """Max absolute difference between each loss and its loop oracle over
    random batches (N in [4, 16], C in [2, 4])."""
    rng = np.random.default_rng(seed)
    worst = {"scl": 0.0, "anchor": 0.0, "ce_adv": 0.0}
    with precision("f64"):
        for _ in range(batches):
            n = int(rng.integers(4, 17))
            c = int(rng.integers(2, 5))
            y = rng.integers(0, c, size=n)
            z = _unit_rows(rng, n, int(rng.integers(2, 9)))
            tau = float(rng.uniform(0.05, 1.0))
            beta = float(rng.uniform(0.0, 4.0))
            margin = float(rng.uniform(-0.5, 0.5)) if rng.random() < 0.5 else -1.0
            reduction = "mean" if rng.random() < 0.5 else "sum"
            cfg = losses.LossConfig(tau=tau, margin=margin, reduction=reduction)

            got = losses.scl_loss(ad.Tensor(z), y, tau, reduction).item()
            worst["scl"] = max(worst["scl"], abs(got - oracles.scl_oracle(z, y, tau, reduction)))
            got = losses.anchor_loss(ad.Tensor(z), y, beta, cfg).item()
            want = oracles.anchor_oracle(z, y, beta, tau, margin, reduction)
            worst["anchor"] = max(worst["anchor"], abs(got - want))
            logits = rng.normal(scale=3.0, size=(n, c))
            got = losses.ce_adv_loss(ad.Tensor(logits), y).item()
            worst["ce_adv"] = max(worst["ce_adv"], abs(got - oracles.ce_oracle(logits, y)))
    return worst
