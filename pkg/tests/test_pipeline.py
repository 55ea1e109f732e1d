import json
import math

import numpy as np
import pytest
from conftest import tiny_cfg

from anchor import autodiff as ad
from anchor import losses, pipeline
from anchor.attacks import AttackConfig
from anchor.models import ClassifierSpec, ModelBundle, classify, encode


@pytest.fixture(scope="module")
def data():
    return pipeline.load_data(tiny_cfg())


@pytest.fixture(scope="module")
def pretrained(data):
    cfg = tiny_cfg()
    writer = pipeline.MetricsWriter()
    bundle = pipeline.pretrain(cfg, data[0], data[1], writer)
    return cfg, bundle, writer.records


def test_pretrain_smoke(pretrained):
    cfg, _, records = pretrained
    assert [r.phase for r in records] == ["pretrain", "pretrain"]
    for r in records:
        assert all(math.isfinite(v) for v in (r.loss_total, r.loss_scl, r.loss_ce))
    assert records[-1].clean_acc is not None and records[0].clean_acc is None


def test_logged_beta_matches_schedule(pretrained):
    cfg, _, records = pretrained
    lc = pipeline.loss_config(cfg)
    assert [r.beta_t for r in records] == [losses.beta_schedule(r.epoch, lc) for r in records]


def test_apt_freezes_and_zero_inits(pretrained, data):
    cfg, bundle, _ = pretrained
    work = _copy(bundle)
    frozen = {**work.snapshot("encoder"), **work.snapshot("projection")}
    work.reinit_classifier(ClassifierSpec("mlp", 3, cfg["model.cls_hidden"], "zero"))
    x, y = data[0].inputs[:32], data[0].labels[:32]
    with ad.no_grad():
        logits = classify(work, encode(work, ad.Tensor(x)))
    assert np.all(logits.values == 0)
    assert losses.ce_adv_loss(logits, y).item() == pytest.approx(math.log(3), rel=1e-6)

    writer = pipeline.MetricsWriter()
    out = pipeline.adversarial_partial_train(cfg, data[0], work, data[1], writer)
    assert out.spec.classifier.kind == "mlp"
    for k, v in {**out.snapshot("encoder"), **out.snapshot("projection")}.items():
        assert np.array_equal(v, frozen[k]), k
    assert writer.records[0].phase == "apt" and writer.records[0].loss_scl is None


def _copy(bundle):
    from anchor.models import dumps_checkpoint, loads_checkpoint

    return loads_checkpoint(dumps_checkpoint(bundle))


def test_eval_identity_attack_and_projection_unused(pretrained, data):
    _, bundle, _ = pretrained
    before = bundle.counters["project"]
    res = pipeline.evaluate(bundle, data[1], AttackConfig(eps=0.0, steps=5))
    assert res["robust_acc"] == res["clean_acc"]
    assert bundle.counters["project"] == before


def test_eval_workers_agree(pretrained, data):
    _, bundle, _ = pretrained
    cfg = AttackConfig(eps=0.031, alpha=0.01, steps=3)
    one = pipeline.evaluate(bundle, data[1], cfg, workers=1, batch_size=16)
    two = pipeline.evaluate(bundle, data[1], cfg, workers=3, batch_size=16)
    assert one == two
    assert one["robust_acc"] <= one["clean_acc"]


def test_constant_predictor_accuracy(data):
    cfg = tiny_cfg()
    bundle = ModelBundle.build(pipeline.model_spec(cfg, 3, 3, "mlp", "zero"))
    res = pipeline.evaluate(bundle, data[1], AttackConfig(eps=0.0))
    assert res["clean_acc"] == np.mean(data[1].labels == 0)


def test_baseline_schema_matches(pretrained, data):
    cfg, _, records = pretrained
    writer = pipeline.MetricsWriter()
    pipeline.baseline_ce_train(cfg, data[0], data[1], writer)
    from dataclasses import asdict

    assert asdict(writer.records[0]).keys() == asdict(records[0]).keys()
    assert writer.records[0].phase == "baseline"


def test_run_is_deterministic(tmp_path):
    cfg = tiny_cfg(**{"pretrain.epochs": 1})
    for name in ("a", "b"):
        pipeline.run_experiment(cfg, tmp_path / name)
    for f in ("metrics.jsonl", "pretrain.ckpt", "apt.ckpt", "baseline.ckpt", "results.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    keys = [(r["phase"], r["epoch"]) for r in map(json.loads, lines)]
    assert keys == [("pretrain", 0), ("apt", 0), ("baseline", 0)]
    assert json.loads((tmp_path / "a" / "run-config.json").read_text()) == cfg


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_reported_with_context(data):
    cfg = tiny_cfg(**{"baseline.lr": 1e30})
    with pytest.raises(pipeline.TrainingError, match=r"epoch 0, step \d+ \(master seed 0\)"):
        pipeline.baseline_ce_train(cfg, data[0])
