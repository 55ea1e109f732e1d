"""Flat dotted-key run configuration: defaults < config file < flags."""
import hashlib
import json

DEFAULTS = {
    "data.kind": "tiny-images",
    "data.classes": 3,
    "data.n_train": 2000,
    "data.n_test": 500,
    "data.noise": 0.1,
    "data.seed": 0,
    "data.contrast": 0.2,
    "data.color_cast": 0.03,
    "data.texture_swap": 0.1,
    "data.train_path": "",
    "data.test_path": "",
    "model.stem_width": 16,
    "model.widths": [16, 32],
    "model.convs_per_block": 1,
    "model.embed_dim": 64,
    "model.proj_hidden": 64,
    "model.proj_dim": 16,
    "model.cls_hidden": 64,
    "train.seed": 0,
    "train.batch_size": 64,
    "pretrain.epochs": 30,
    "pretrain.lr": 0.01,
    "pretrain.momentum": 0.9,
    "apt.epochs": 20,
    "apt.lr": 0.01,
    "apt.momentum": 0.9,
    "baseline.epochs": 30,
    "baseline.lr": 0.01,
    "baseline.momentum": 0.9,
    "attack.train.eps": 0.031,
    "attack.train.alpha": 0.007,
    "attack.train.steps": 10,
    "attack.train.objective": "combined",
    "attack.train.random_start": False,
    "attack.train.restarts": 1,
    "attack.apt.eps": 0.031,
    "attack.apt.alpha": 0.007,
    "attack.apt.steps": 10,
    "attack.apt.objective": "ce",
    "attack.apt.random_start": False,
    "attack.apt.restarts": 1,
    "attack.eval.eps": 0.031,
    "attack.eval.alpha": 0.003,
    "attack.eval.steps": 20,
    "attack.eval.objective": "ce",
    "attack.eval.random_start": False,
    "attack.eval.restarts": 1,
    "eval.strong_restarts": 3,
    "eval.every": 0,
    "eval.workers": 1,
    "loss.tau": 0.1,
    "loss.lambda": 1.0,
    "loss.beta_start": 0.5,
    "loss.beta_end": 2.0,
    "loss.margin": -1.0,
    "loss.reduction": "mean",
    "augment.padding": 1,
    "augment.flip_prob": 0.5,
    "augment.jitter": 0.05,
    "metrics.wall_time": False,
}


class ConfigError(ValueError):
    """Bad configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _coerce(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected an integer, got {value!r}") from None
        if as_float != int(as_float):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(as_float)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                value = json.loads(value) if value.strip().startswith("[") else [int(v) for v in value.split(",")]
            except ValueError:
                raise ConfigError(key, f"expected a list of integers, got {value!r}") from None
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, f"expected a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def resolve(file_cfg=None, overrides=None):
    """Merge defaults, a config-file dict and flag overrides, validating keys."""
    cfg = dict(DEFAULTS)
    for layer in (file_cfg or {}, overrides or {}):
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown configuration key")
            cfg[key] = _coerce(key, value, DEFAULTS[key])
    return cfg


def load_file(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"malformed JSON in {path!r}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("--config", "config file must hold a JSON object of dotted keys")
    return data


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def run_id(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:12]
