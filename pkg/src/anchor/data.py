"""Synthetic desk-scale datasets, the container file format, and augmentation.

``tiny-images`` are 3x8x8 images built from a per-class template: a periodic
grey-level texture (high contrast) plus a small per-class colour cast (low
contrast, below the attack radius). Optionally a fraction of samples carry
another class's texture while keeping their own colour cast, which makes the
colour cast the only feature that is right on every clean sample but also the
one a small l-inf perturbation can erase.
"""
import io
import json
import math
from dataclasses import dataclass

import numpy as np

KINDS = ("tiny-images", "blobs")
SPLITS = {"train": 0, "test": 1}


@dataclass
class Dataset:
    inputs: np.ndarray  # [N, C_in, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 in [0, class_count)
    class_count: int
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4 or len(self.inputs) != len(self.labels):
            raise ValueError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label out of range")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("input values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.inputs.shape[1:]


@dataclass
class TinyImageStyle:
    contrast: float = 0.2
    color_cast: float = 0.03
    texture_swap: float = 0.0


def _textures(class_count, rng):
    yy, xx = np.mgrid[0:8, 0:8]
    fixed = [
        np.where(yy % 2 == 0, 1.0, -1.0),
        np.where(xx % 2 == 0, 1.0, -1.0),
        np.where((yy + xx) % 2 == 0, 1.0, -1.0),
    ]
    out = fixed[:class_count]
    while len(out) < class_count:
        tile = rng.choice([-1.0, 1.0], size=(4, 4))
        cand = np.tile(tile, (2, 2))
        if all(np.abs(cand - t).sum() > 0 and np.abs(cand + t).sum() > 0 for t in out):
            out.append(cand)
    return np.stack(out)


def _color_casts(class_count, amplitude):
    # evenly spaced directions in the plane orthogonal to grey
    u = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
    v = np.array([1.0, 1.0, -2.0]) / math.sqrt(6)
    angles = 2 * np.pi * np.arange(class_count) / class_count
    return amplitude * (np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v)


def tiny_image_templates(class_count, seed, style=None):
    """Class templates, ``[C, 3, 8, 8]``, plus their texture/colour parts."""
    style = style or TinyImageStyle()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    textures = _textures(class_count, rng)
    casts = _color_casts(class_count, style.color_cast)
    templates = 0.5 + style.contrast * textures[:, None] + casts[:, :, None, None]
    return templates, textures, casts


def _blob_means(class_count, dim, rng):
    for _ in range(1000):
        codes = rng.choice([-1.0, 1.0], size=(class_count, dim))
        ham = (codes[:, None] != codes[None]).sum(-1) + dim * np.eye(class_count)
        if ham.min() >= dim // 4:
            return 0.5 + 0.15 * codes
    raise ValueError("could not place well separated blob means")


def bayes_accuracy_bound(templates, noise):
    """Union-bound lower estimate of nearest-template accuracy under
    isotropic Gaussian noise of std ``noise``."""
    flat = templates.reshape(len(templates), -1)
    d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
    if noise == 0:
        return 1.0 if np.all(d[~np.eye(len(flat), dtype=bool)] > 0) else 0.0
    err = 0.0
    k = len(flat)
    for i in range(k):
        for j in range(k):
            if i != j:
                err += 0.5 * math.erfc(d[i, j] / (2 * noise) / math.sqrt(2))
    return max(0.0, 1.0 - err / k)


def generate_dataset(kind, class_count, n, noise, seed, split="train", style=None, dim=16):
    """Deterministic synthetic dataset.

    Templates depend on ``seed`` only; samples come from a separate stream per
    split, so train and test never share draws.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if class_count < 2 or n < class_count:
        raise ValueError(f"need class_count >= 2 and n >= class_count (got {class_count}, {n})")
    if noise < 0:
        raise ValueError("noise must be non-negative")

    style = style or TinyImageStyle()
    if kind == "tiny-images":
        templates, textures, casts = tiny_image_templates(class_count, seed, style)
    else:
        means = _blob_means(class_count, dim, np.random.default_rng(np.random.SeedSequence([seed, 98])))
        templates = means.reshape(class_count, 1, 1, dim)
    if bayes_accuracy_bound(templates, noise) < 0.99:
        raise ValueError(f"noise {noise} too large: templates no longer 99% separable")

    rng = np.random.default_rng(np.random.SeedSequence([seed, SPLITS[split]]))
    labels = rng.permutation(np.arange(n) % class_count)
    if kind == "tiny-images" and style.texture_swap > 0:
        swap = rng.random(n) < style.texture_swap
        other = (labels + rng.integers(1, class_count, size=n)) % class_count
        tex_ids = np.where(swap, other, labels)
        clean = 0.5 + style.contrast * textures[tex_ids][:, None] + casts[labels][:, :, None, None]
    else:
        clean = templates[labels]
    x = clean + noise * rng.standard_normal(clean.shape) if noise > 0 else clean
    x = np.clip(x, 0.0, 1.0)
    return Dataset(x.astype(np.float32), labels, class_count, split, seed)


# ---------------------------------------------------------------- file format

def dumps_dataset(ds):
    header = {
        "shape": list(ds.inputs.shape),
        "class_count": int(ds.class_count),
        "dtype": "f32le",
        "split": ds.split,
        "seed": int(ds.seed),
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(ds.inputs.astype("<f4").tobytes())
    buf.write(ds.labels.astype("<i4").tobytes())
    return buf.getvalue()


def loads_dataset(raw):
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError("dataset file has no header line")
    header = json.loads(head)
    if header.get("dtype") != "f32le":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    n = shape[0]
    if len(body) != 4 * count + 4 * n:
        raise ValueError(f"dataset blob has {len(body)} bytes, header implies {4 * (count + n)}")
    inputs = np.frombuffer(body, dtype="<f4", count=count).reshape(shape)
    labels = np.frombuffer(body, dtype="<i4", count=n, offset=4 * count)
    return Dataset(inputs.astype(np.float32), labels.astype(np.int64),
                   header["class_count"], header["split"], header["seed"])


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    padding: int = 1
    flip_prob: float = 0.5
    jitter: float = 0.05  # per-channel additive shift drawn from [-jitter, jitter]

    def __post_init__(self):
        if self.padding < 0 or not 0 <= self.flip_prob <= 1 or not 0 <= self.jitter <= 1:
            raise ValueError("invalid augmentation config")


def sample_rng(seed, epoch, batch, index):
    """Counter-based generator for one sample's augmentation."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch, index]))


def augment(x, cfg, rng):
    """Random pad-and-crop, horizontal flip, then per-channel additive jitter.

    ``x`` is one image ``[C, H, W]`` with values in [0, 1].
    """
    x = np.asarray(x)
    C, H, W = x.shape
    out = x
    p = cfg.padding
    if p > 0:
        padded = np.zeros((C, H + 2 * p, W + 2 * p), dtype=x.dtype)
        padded[:, p:p + H, p:p + W] = x
        dy, dx = rng.integers(0, 2 * p + 1, size=2)
        out = padded[:, dy:dy + H, dx:dx + W]
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    if cfg.jitter > 0:
        shift = rng.uniform(-cfg.jitter, cfg.jitter, size=C).astype(x.dtype)
        out = np.clip(out + shift[:, None, None], 0, 1)
    return np.ascontiguousarray(out, dtype=x.dtype)


def augment_batch(xs, cfg, seed, epoch, batch):
    return np.stack([augment(x, cfg, sample_rng(seed, epoch, batch, i)) for i, x in enumerate(xs)])
