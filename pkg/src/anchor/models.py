"""Encoder, projection head and classifier heads, plus SGD and checkpoints.

The encoder keeps the low-resolution stem: a single 3x3 stride-1 convolution
with no pooling in front of the first block. Every later convolution is also
3x3 stride 1, so feature maps keep the input resolution until the global
average pool.
"""
import io
import json
from dataclasses import dataclass, field

import numpy as np

from anchor import autodiff as ad
from anchor.config import dtype

COMPONENTS = ("encoder", "projection", "classifier")


@dataclass
class EncoderSpec:
    in_channels: int = 3
    stem_width: int = 16
    widths: tuple = (16, 32)
    convs_per_block: int = 1
    embed_dim: int = 64


@dataclass
class ProjectionHeadSpec:
    hidden: int = 64
    out: int = 16


@dataclass
class ClassifierSpec:
    kind: str = "linear"
    class_count: int = 3
    hidden: int = 64
    init: str = "random"

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.init not in ("random", "zero"):
            raise ValueError(f"unknown classifier init {self.init!r}")


@dataclass
class ModelSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    projection: ProjectionHeadSpec = field(default_factory=ProjectionHeadSpec)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _param(values, name):
    return ad.Tensor(np.array(values), requires_grad=True, name=name)


def encoder_layers(spec):
    """Layer plan as ``(kind, name, in, out)`` tuples, in forward order."""
    plan = [("conv", "encoder.stem", spec.in_channels, spec.stem_width), ("relu", None, None, None)]
    width = spec.stem_width
    for b, out in enumerate(spec.widths):
        for k in range(spec.convs_per_block):
            plan.append(("conv", f"encoder.block{b}.{k}", width, out))
            plan.append(("relu", None, None, None))
            width = out
    plan.append(("gap", None, None, None))
    plan.append(("linear", "encoder.embed", width, spec.embed_dim))
    return plan


def check_encoder_structure(plan):
    """The stem is a 3x3 stride-1 conv and nothing pools before the blocks."""
    if plan[0][0] != "conv" or plan[0][1] != "encoder.stem":
        raise AssertionError("encoder must start with the 3x3 stride-1 stem convolution")
    first_block = next(i for i, layer in enumerate(plan) if layer[1] and ".block" in layer[1])
    if any(kind in ("gap", "pool") for kind, *_ in plan[:first_block]):
        raise AssertionError("no pooling may precede the first block")


def _init_encoder(spec, rng, zero=False):
    params = {}
    for kind, name, fan_in, fan_out in encoder_layers(spec):
        if kind == "conv":
            w = np.zeros((fan_out, fan_in, 3, 3)) if zero else _he(rng, (fan_out, fan_in, 3, 3), fan_in * 9)
            params[f"{name}.weight"] = w
            params[f"{name}.bias"] = np.zeros(fan_out)
        elif kind == "linear":
            params[f"{name}.weight"] = np.zeros((fan_in, fan_out)) if zero else _he(rng, (fan_in, fan_out), fan_in)
            params[f"{name}.bias"] = np.zeros(fan_out)
    return params


def _init_projection(spec, embed_dim, rng):
    return {
        "projection.0.weight": _he(rng, (embed_dim, spec.hidden), embed_dim),
        "projection.0.bias": np.zeros(spec.hidden),
        "projection.1.weight": _he(rng, (spec.hidden, spec.out), spec.hidden),
        "projection.1.bias": np.zeros(spec.out),
    }


def _init_classifier(spec, embed_dim, rng):
    # zero init clears the output layer only; an all-zero MLP would never
    # move its hidden layer
    C = spec.class_count
    zero = spec.init == "zero"
    if spec.kind == "linear":
        return {
            "classifier.out.weight": np.zeros((embed_dim, C)) if zero else _he(rng, (embed_dim, C), embed_dim),
            "classifier.out.bias": np.zeros(C),
        }
    return {
        "classifier.hidden.weight": _he(rng, (embed_dim, spec.hidden), embed_dim),
        "classifier.hidden.bias": np.zeros(spec.hidden),
        "classifier.out.weight": np.zeros((spec.hidden, C)) if zero else _he(rng, (spec.hidden, C), spec.hidden),
        "classifier.out.bias": np.zeros(C),
    }


class ModelBundle:
    """Parameters of the three components plus their freeze flags."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = {name: _param(v, name) for name, v in params.items()}
        self.frozen = {c: False for c in COMPONENTS}
        self.counters = {"project": 0}
        check_encoder_structure(encoder_layers(spec.encoder))
        if spec.projection.out >= spec.encoder.embed_dim:
            raise ValueError("projection output must be narrower than the embedding")

    @classmethod
    def build(cls, spec=None, seed=0, zero_encoder=False):
        spec = spec or ModelSpec()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        params = _init_encoder(spec.encoder, rng, zero=zero_encoder)
        params.update(_init_projection(spec.projection, spec.encoder.embed_dim, rng))
        params.update(_init_classifier(spec.classifier, spec.encoder.embed_dim, rng))
        return cls(spec, params)

    def component(self, name):
        if name not in COMPONENTS:
            raise KeyError(f"unknown component {name!r}; expected one of {COMPONENTS}")
        return {k: p for k, p in self.params.items() if k.startswith(name + ".")}

    def parameters(self, trainable_only=False):
        return [p for k, p in self.params.items()
                if not (trainable_only and self.frozen[k.split(".", 1)[0]])]

    def set_frozen(self, component, flag):
        params = self.component(component)
        self.frozen[component] = bool(flag)
        for p in params.values():
            p.requires_grad = not flag
            if flag:
                p.grad = None

    def reinit_classifier(self, spec, seed=0):
        for k in list(self.component("classifier")):
            del self.params[k]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        fresh = _init_classifier(spec, self.spec.encoder.embed_dim, rng)
        self.params.update({k: _param(v, k) for k, v in fresh.items()})
        self.spec.classifier = spec
        self.set_frozen("classifier", self.frozen["classifier"])

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self, component=None):
        items = self.params.items() if component is None else self.component(component).items()
        return {k: p.values.copy() for k, p in items}

    def __getitem__(self, name):
        return self.params[name]


class inputs_only:
    """Context manager: parameters stop recording gradients, so a backward
    pass only reaches the inputs (used while crafting attacks)."""

    def __init__(self, bundle):
        self.bundle = bundle

    def __enter__(self):
        if self.bundle is None:
            return
        self._saved = {k: p.requires_grad for k, p in self.bundle.params.items()}
        for p in self.bundle.params.values():
            p.requires_grad = False

    def __exit__(self, *exc):
        if self.bundle is None:
            return
        for k, flag in self._saved.items():
            self.bundle.params[k].requires_grad = flag


def _linear(x, params, name):
    return ad.bias_add(ad.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def encode(bundle, x):
    """Embeddings ``[B, D]`` for images ``[B, C, H, W]``."""
    spec = bundle.spec.encoder
    x = ad.as_tensor(x)
    if x.values.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ad.ShapeError(f"encode: expected [B, {spec.in_channels}, H, W], got {x.shape}")
    p = bundle.params
    h = x
    for kind, name, _, _ in encoder_layers(spec):
        if kind == "conv":
            h = ad.bias_add(ad.conv2d(h, p[f"{name}.weight"]), p[f"{name}.bias"])
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "gap":
            h = ad.global_avg_pool(h)
        elif kind == "linear":
            h = _linear(h, p, name)
    return h


def project(bundle, embeddings):
    """Unit-norm projections ``[B, P]``; used only by the contrastive loss."""
    bundle.counters["project"] += 1
    p = bundle.params
    h = ad.relu(_linear(embeddings, p, "projection.0"))
    return ad.l2_normalize_rows(_linear(h, p, "projection.1"))


def classify(bundle, embeddings):
    """Raw logits ``[B, C]``."""
    p = bundle.params
    if embeddings.values.ndim != 2 or embeddings.shape[1] != bundle.spec.encoder.embed_dim:
        raise ad.ShapeError(f"classify: expected [B, {bundle.spec.encoder.embed_dim}], got {embeddings.shape}")
    if bundle.spec.classifier.kind == "mlp":
        embeddings = ad.relu(_linear(embeddings, p, "classifier.hidden"))
    return _linear(embeddings, p, "classifier.out")


def logits_fn(bundle):
    return lambda x: classify(bundle, encode(bundle, x))


def predict(bundle, x, batch_size=256):
    """Argmax class (ties go to the lowest index)."""
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            logits = classify(bundle, encode(bundle, ad.Tensor(x[i:i + batch_size]))).values
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- optimizer

class SGD:
    """SGD with heavy-ball momentum; frozen components are never touched."""

    def __init__(self, bundle, lr, momentum=0.9):
        self.bundle = bundle
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self):
        lr = dtype()(self.lr)
        mu = dtype()(self.momentum)
        for name, p in self.bundle.params.items():
            if self.bundle.frozen[name.split(".", 1)[0]] or p.grad is None:
                continue
            v = self.velocity.get(name)
            v = p.grad.copy() if v is None else mu * v + p.grad
            self.velocity[name] = v
            p.values = p.values - lr * v

    def zero_grad(self):
        self.bundle.zero_grad()


# ---------------------------------------------------------------- checkpoints

def dumps_checkpoint(bundle):
    manifest = []
    blobs = []
    offset = 0
    for name, p in bundle.params.items():
        raw = np.ascontiguousarray(p.values, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    buf = io.BytesIO()
    buf.write(json.dumps(manifest).encode() + b"\n")
    for raw in blobs:
        buf.write(raw)
    return buf.getvalue()


def spec_from_params(shapes):
    """Rebuild a :class:`ModelSpec` from parameter names and shapes."""
    stem = shapes["encoder.stem.weight"]
    blocks = {}
    for name, shape in shapes.items():
        if name.startswith("encoder.block") and name.endswith(".weight"):
            b, k = name[len("encoder.block"):].split(".")[:2]
            blocks.setdefault(int(b), {})[int(k)] = shape
    widths = tuple(blocks[b][0][0] for b in sorted(blocks))
    per_block = len(blocks[0]) if blocks else 1
    embed = shapes["encoder.embed.weight"]
    enc = EncoderSpec(in_channels=stem[1], stem_width=stem[0], widths=widths,
                      convs_per_block=per_block, embed_dim=embed[1])
    proj = ProjectionHeadSpec(hidden=shapes["projection.0.weight"][1], out=shapes["projection.1.weight"][1])
    out = shapes["classifier.out.weight"]
    if "classifier.hidden.weight" in shapes:
        cls = ClassifierSpec("mlp", out[1], hidden=shapes["classifier.hidden.weight"][1])
    else:
        cls = ClassifierSpec("linear", out[1])
    return ModelSpec(enc, proj, cls)


def loads_checkpoint(raw):
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError("checkpoint has no manifest line")
    manifest = json.loads(head)
    params = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 4 * count
        if end > len(body):
            raise ValueError(f"checkpoint truncated while reading {entry['name']}")
        params[entry["name"]] = np.frombuffer(body, dtype="<f4", count=count,
                                              offset=entry["offset"]).reshape(shape)
    spec = spec_from_params({k: v.shape for k, v in params.items()})
    return ModelBundle(spec, params)


def save_checkpoint(bundle, path):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(bundle))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
