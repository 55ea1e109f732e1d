"""Two-phase training (contrastive adversarial pretraining, then adversarial
partial training of a fresh classifier), the clean-CE baseline, and
evaluation.

All functions take the resolved flat config from :mod:`anchor.settings`.
"""
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from anchor import autodiff as ad
from anchor import losses, settings
from anchor.attacks import AttackConfig, CEObjective, attack_objective, pgd_attack
from anchor.config import dtype
from anchor.data import AugmentConfig, TinyImageStyle, augment_batch, generate_dataset, load_dataset
from anchor.models import (
    SGD,
    ClassifierSpec,
    EncoderSpec,
    ModelBundle,
    ModelSpec,
    ProjectionHeadSpec,
    classify,
    encode,
    inputs_only,
    project,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    phase: str
    epoch: int
    loss_total: float
    loss_scl: float | None
    loss_ce: float
    beta_t: float | None
    clean_acc: float | None = None
    robust_acc: float | None = None
    wall_ms: float | None = None


class MetricsWriter:
    """Append-only JSON Lines writer (nothing is written when ``path`` is None)."""

    def __init__(self, path=None):
        self.path = path
        self.records = []

    def write(self, record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")


# ---------------------------------------------------------------- config helpers

def attack_config(cfg, which):
    p = f"attack.{which}."
    return AttackConfig(eps=cfg[p + "eps"], alpha=cfg[p + "alpha"], steps=cfg[p + "steps"],
                        objective=cfg[p + "objective"], random_start=cfg[p + "random_start"],
                        restarts=cfg[p + "restarts"], seed=cfg["train.seed"])


def loss_config(cfg):
    return losses.LossConfig(tau=cfg["loss.tau"], lam=cfg["loss.lambda"],
                             beta_start=cfg["loss.beta_start"], beta_end=cfg["loss.beta_end"],
                             total_epochs=max(1, cfg["pretrain.epochs"]),
                             margin=cfg["loss.margin"], reduction=cfg["loss.reduction"])


def augment_config(cfg):
    return AugmentConfig(cfg["augment.padding"], cfg["augment.flip_prob"], cfg["augment.jitter"])


def model_spec(cfg, in_channels, class_count, classifier="linear", init="random"):
    enc = EncoderSpec(in_channels, cfg["model.stem_width"], tuple(cfg["model.widths"]),
                      cfg["model.convs_per_block"], cfg["model.embed_dim"])
    proj = ProjectionHeadSpec(cfg["model.proj_hidden"], cfg["model.proj_dim"])
    return ModelSpec(enc, proj, ClassifierSpec(classifier, class_count, cfg["model.cls_hidden"], init))


def load_data(cfg):
    """Train and test splits: from files if configured, else generated."""
    if cfg["data.train_path"]:
        train = load_dataset(cfg["data.train_path"])
        test = load_dataset(cfg["data.test_path"]) if cfg["data.test_path"] else None
        return train, test
    style = TinyImageStyle(cfg["data.contrast"], cfg["data.color_cast"], cfg["data.texture_swap"])
    common = dict(kind=cfg["data.kind"], class_count=cfg["data.classes"], noise=cfg["data.noise"],
                  seed=cfg["data.seed"], style=style)
    train = generate_dataset(n=cfg["data.n_train"], split="train", **common)
    test = generate_dataset(n=cfg["data.n_test"], split="test", **common)
    return train, test


def _batches(n, batch_size, seed, epoch):
    order = np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch_mean(values):
    return math.fsum(values) / len(values)


def _clock():
    return time.perf_counter()


def _wall(cfg, start):
    return round((_clock() - start) * 1000.0, 3) if cfg["metrics.wall_time"] else None


def _guard(fn, phase, epoch, step, seed):
    try:
        return fn()
    except (FloatingPointError, ad.NonFiniteError) as exc:
        ad.reset_tape()
        raise TrainingError(f"{phase}: non-finite value at epoch {epoch}, step {step} "
                            f"(master seed {seed}): {exc}") from exc


# ---------------------------------------------------------------- evaluation

def evaluate(bundle, dataset, attack_cfg, workers=1, batch_size=250, strong_restarts=0):
    """Clean and PGD robust accuracy of encoder + classifier.

    The projection head is never touched (checked via ``bundle.counters``).
    Batches are attacked independently and merged in index order.
    """
    before = bundle.counters["project"]
    x = dataset.inputs.astype(dtype())
    y = dataset.labels
    spans = [(i, min(i + batch_size, len(y))) for i in range(0, len(y), batch_size)]
    objective = CEObjective(bundle)

    def run(span, cfg):
        lo, hi = span
        xb, yb = x[lo:hi], y[lo:hi]
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, lo]))
        with ad.no_grad():
            clean = np.argmax(classify(bundle, encode(bundle, ad.Tensor(xb))).values, axis=1)
        adv = pgd_attack(bundle, xb, yb, objective, cfg, rng=rng).x_adv
        with ad.no_grad():
            robust = np.argmax(classify(bundle, encode(bundle, ad.Tensor(adv))).values, axis=1)
        return int((clean == yb).sum()), int((robust == yb).sum())

    def sweep(cfg):
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(lambda s: run(s, cfg), spans))
        return [run(s, cfg) for s in spans]

    with inputs_only(bundle):
        counts = sweep(attack_cfg)
        strong = None
        if strong_restarts and strong_restarts > 1 and attack_cfg.eps > 0:
            strong_cfg = AttackConfig(**{**asdict(attack_cfg), "random_start": True,
                                         "restarts": strong_restarts})
            strong = sweep(strong_cfg)
    if bundle.counters["project"] != before:
        raise AssertionError("projection head was used during evaluation")
    n = len(y)
    out = {"clean_acc": sum(c for c, _ in counts) / n, "robust_acc": sum(r for _, r in counts) / n}
    if strong is not None:
        out["robust_acc_restarts"] = sum(r for _, r in strong) / n
    return out


def _maybe_eval(cfg, bundle, test, epoch, last):
    every = cfg["eval.every"]
    if test is None or not (last or (every and (epoch + 1) % every == 0)):
        return None, None
    res = evaluate(bundle, test, attack_config(cfg, "eval"), workers=cfg["eval.workers"])
    return res["clean_acc"], res["robust_acc"]


# ---------------------------------------------------------------- phases

def pretrain(cfg, train, test=None, metrics=None, bundle=None):
    """Phase 1: combined contrastive + adversarial cross-entropy training of
    encoder, projection head and linear classifier."""
    seed = cfg["train.seed"]
    if cfg["train.batch_size"] < 2:
        raise ValueError("pretraining needs batch size >= 2")
    metrics = metrics or MetricsWriter()
    loss_cfg = loss_config(cfg)
    atk = attack_config(cfg, "train")
    aug_cfg = augment_config(cfg)
    if bundle is None:
        bundle = ModelBundle.build(model_spec(cfg, train.inputs.shape[1], train.class_count), seed=seed)
    opt = SGD(bundle, cfg["pretrain.lr"], cfg["pretrain.momentum"])
    x_all = train.inputs.astype(dtype())
    epochs = cfg["pretrain.epochs"]

    for epoch in range(epochs):
        start = _clock()
        beta = losses.beta_schedule(epoch, loss_cfg)
        totals, scls, ces = [], [], []
        for b, idx in enumerate(_batches(len(train), cfg["train.batch_size"], seed, epoch)):
            x, y = x_all[idx], train.labels[idx]
            x_aug = augment_batch(x, aug_cfg, seed, epoch, b)

            def step():
                with ad.no_grad():
                    z_aug = project(bundle, encode(bundle, ad.Tensor(x_aug)))
                objective = attack_objective(atk.objective, bundle, loss_cfg, beta, z_aug)
                rng = np.random.default_rng(np.random.SeedSequence([seed, 3, epoch, b]))
                report = pgd_attack(bundle, x, y, objective, atk, rng=rng)
                if report.max_deviation > atk.eps + 1e-6:
                    raise AssertionError(f"adversarial batch left the eps-ball at epoch {epoch}, batch {b}")
                emb_aug = encode(bundle, ad.Tensor(x_aug))
                emb_adv = encode(bundle, ad.Tensor(report.x_adv))
                z = ad.concat([project(bundle, emb_aug), project(bundle, emb_adv)])
                total, parts = losses.combined_loss(z, np.concatenate([y, y]), classify(bundle, emb_adv),
                                                    y, beta, loss_cfg)
                ad.backward(total)
                opt.step()
                opt.zero_grad()
                return total.item(), parts

            total, parts = _guard(step, "pretrain", epoch, b, seed)
            totals.append(total)
            scls.append(parts["scl"])
            ces.append(parts["ce"])
        clean, robust = _maybe_eval(cfg, bundle, test, epoch, epoch == epochs - 1)
        metrics.write(MetricsRecord("pretrain", epoch, _epoch_mean(totals), _epoch_mean(scls),
                                    _epoch_mean(ces), beta, clean, robust, _wall(cfg, start)))
    return bundle


def adversarial_partial_train(cfg, train, bundle, test=None, metrics=None):
    """Phase 2: freeze encoder and projection head, replace the classifier
    with a zero-initialised MLP and train it on PGD examples."""
    seed = cfg["train.seed"]
    metrics = metrics or MetricsWriter()
    bundle.set_frozen("encoder", True)
    bundle.set_frozen("projection", True)
    bundle.reinit_classifier(ClassifierSpec("mlp", train.class_count, cfg["model.cls_hidden"], "zero"), seed=seed)
    bundle.set_frozen("classifier", False)
    frozen_before = {**bundle.snapshot("encoder"), **bundle.snapshot("projection")}
    atk = attack_config(cfg, "apt")
    objective = CEObjective(bundle)
    opt = SGD(bundle, cfg["apt.lr"], cfg["apt.momentum"])
    x_all = train.inputs.astype(dtype())
    epochs = cfg["apt.epochs"]

    for epoch in range(epochs):
        start = _clock()
        ces = []
        for b, idx in enumerate(_batches(len(train), cfg["train.batch_size"], seed, 1000 + epoch)):
            x, y = x_all[idx], train.labels[idx]

            def step():
                rng = np.random.default_rng(np.random.SeedSequence([seed, 4, epoch, b]))
                report = pgd_attack(bundle, x, y, objective, atk, rng=rng)
                if report.max_deviation > atk.eps + 1e-6:
                    raise AssertionError(f"adversarial batch left the eps-ball at epoch {epoch}, batch {b}")
                ce = losses.ce_adv_loss(classify(bundle, encode(bundle, ad.Tensor(report.x_adv))), y)
                ad.backward(ce)
                opt.step()
                opt.zero_grad()
                return ce.item()

            ces.append(_guard(step, "apt", epoch, b, seed))
        after = {**bundle.snapshot("encoder"), **bundle.snapshot("projection")}
        for name, before in frozen_before.items():
            if not np.array_equal(before, after[name]):
                raise AssertionError(f"frozen parameter {name} changed during APT epoch {epoch}")
        clean, robust = _maybe_eval(cfg, bundle, test, epoch, epoch == epochs - 1)
        mean_ce = _epoch_mean(ces)
        metrics.write(MetricsRecord("apt", epoch, mean_ce, None, mean_ce, None, clean, robust, _wall(cfg, start)))
    return bundle


def baseline_ce_train(cfg, train, test=None, metrics=None):
    """Comparison arm: same encoder + linear classifier, clean cross-entropy,
    no augmentation and no attack."""
    seed = cfg["train.seed"]
    metrics = metrics or MetricsWriter()
    bundle = ModelBundle.build(model_spec(cfg, train.inputs.shape[1], train.class_count), seed=seed)
    bundle.set_frozen("projection", True)
    opt = SGD(bundle, cfg["baseline.lr"], cfg["baseline.momentum"])
    x_all = train.inputs.astype(dtype())
    epochs = cfg["baseline.epochs"]
    for epoch in range(epochs):
        start = _clock()
        ces = []
        for b, idx in enumerate(_batches(len(train), cfg["train.batch_size"], seed, 2000 + epoch)):
            x, y = x_all[idx], train.labels[idx]

            def step():
                ce = losses.ce_adv_loss(classify(bundle, encode(bundle, ad.Tensor(x))), y)
                ad.backward(ce)
                opt.step()
                opt.zero_grad()
                return ce.item()

            ces.append(_guard(step, "baseline", epoch, b, seed))
        clean, robust = _maybe_eval(cfg, bundle, test, epoch, epoch == epochs - 1)
        mean_ce = _epoch_mean(ces)
        metrics.write(MetricsRecord("baseline", epoch, mean_ce, None, mean_ce, None, clean, robust,
                                    _wall(cfg, start)))
    return bundle


# ---------------------------------------------------------------- run directories

def prepare_run(cfg, out_dir):
    """Create the run directory, write the config snapshot and manifest."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run-config.json"), "w") as fh:
        fh.write(settings.canonical(cfg))
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    manifest = {
        "run_id": settings.run_id(cfg),
        "config": "run-config.json",
        "metrics": "metrics.jsonl",
        "checkpoints": [],
    }
    write_manifest(out_dir, manifest)
    return manifest, MetricsWriter(metrics_path)


def write_manifest(out_dir, manifest):
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def finish_checkpoint(out_dir, manifest, bundle, name):
    path = os.path.join(out_dir, name)
    save_checkpoint(bundle, path)
    manifest["checkpoints"].append(name)
    write_manifest(out_dir, manifest)
    return path


def run_experiment(cfg, out_dir):
    """Pretrain, APT and the clean-CE baseline into one run directory.

    Writes ``metrics.jsonl`` (all phases), three checkpoints and
    ``results.json`` with clean/robust accuracy of every checkpoint.
    """
    train, test = load_data(cfg)
    manifest, writer = prepare_run(cfg, out_dir)
    eval_cfg = attack_config(cfg, "eval")
    strong = cfg["eval.strong_restarts"]
    results = {}

    bundle = pretrain(cfg, train, test, writer)
    finish_checkpoint(out_dir, manifest, bundle, "pretrain.ckpt")
    results["pretrain"] = evaluate(bundle, test, eval_cfg, cfg["eval.workers"], strong_restarts=strong)

    bundle = adversarial_partial_train(cfg, train, bundle, test, writer)
    finish_checkpoint(out_dir, manifest, bundle, "apt.ckpt")
    results["apt"] = evaluate(bundle, test, eval_cfg, cfg["eval.workers"], strong_restarts=strong)

    base = baseline_ce_train(cfg, train, test, writer)
    finish_checkpoint(out_dir, manifest, base, "baseline.ckpt")
    results["baseline"] = evaluate(base, test, eval_cfg, cfg["eval.workers"], strong_restarts=strong)

    with open(os.path.join(out_dir, "results.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return results
