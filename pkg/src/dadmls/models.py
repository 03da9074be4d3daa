"""Feature extractor, classifier and timestep-conditioned noise predictor."""

from __future__ import annotations

import copy
import functools
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

SOURCE = "source"
TARGET = "target"
TRANSITIONAL = "transitional"


@dataclass(frozen=True)
class DomainTag:
    kind: str
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (SOURCE, TARGET, TRANSITIONAL):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if (self.kind == TRANSITIONAL) != (self.k is not None):
            raise ValueError("only transitional tags carry a step index")

    def __str__(self) -> str:
        return f"transitional({self.k})" if self.kind == TRANSITIONAL else self.kind

    @classmethod
    def parse(cls, text: str) -> DomainTag:
        if text.startswith("transitional(") and text.endswith(")"):
            return cls(TRANSITIONAL, int(text[len("transitional("):-1]))
        return cls(text)


SOURCE_TAG = DomainTag(SOURCE)
TARGET_TAG = DomainTag(TARGET)


def transitional(k: int) -> DomainTag:
    return DomainTag(TRANSITIONAL, int(k))


@dataclass
class FeatureBatch:
    """Features with provenance; labels exist exactly for source-derived rows."""

    features: Tensor
    labels: Optional[np.ndarray]
    domain_tag: DomainTag

    def __post_init__(self):
        self.features = nx.as_tensor(self.features)
        if self.features.data.ndim != 2:
            raise ValueError("features must be 2-D")
        has_labels = self.labels is not None
        if has_labels != (self.domain_tag.kind != TARGET):
            raise ValueError(f"{self.domain_tag} batch must {'not ' if has_labels else ''}carry labels")
        if has_labels:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("one label per row required")

    def __len__(self) -> int:
        return self.features.shape[0]

    def detach(self) -> FeatureBatch:
        return FeatureBatch(self.features.detach(), self.labels, self.domain_tag)

    def take(self, rows: np.ndarray) -> FeatureBatch:
        labels = None if self.labels is None else self.labels[rows]
        return FeatureBatch(Tensor(self.features.data[rows]), labels, self.domain_tag)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: Rng):
        bound = 1.0 / math.sqrt(n_in)
        self.W = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, (n_out,)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.W, self.b)


class Mlp:
    """Stack of affine layers; ``acts[i]`` says whether layer i is followed by leaky ReLU."""

    slope = 0.01

    def __init__(self, widths: list[int], rng: Rng, final_act: bool = False):
        if len(widths) < 2:
            raise ValueError("need input and output widths")
        self.layers = [Linear(a, b, rng.child(i)) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.acts = [True] * (len(self.layers) - 1) + [final_act]
        self.frozen = False

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        x = nx.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"{type(self).__name__}: expected width {self.in_dim}, got shape {x.shape}")
        for layer, act in zip(self.layers, self.acts):
            x = layer(x)
            if act:
                x = nx.leaky_relu(x, self.slope)
        return x

    __call__ = forward

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.W", layer.W), (f"layers.{i}.b", layer.b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]


class FeatureExtractor(Mlp):
    """Shallow block mapping raw inputs to the features the adaptation runs on."""

    def __init__(self, input_dim: int, feature_dim: int, rng: Rng, hidden: int = 64, depth: int = 2):
        super().__init__([input_dim] + [hidden] * depth + [feature_dim], rng)


class Classifier(Mlp):
    def __init__(self, feature_dim: int, n_classes: int, rng: Rng, hidden: int = 64, depth: int = 2):
        super().__init__([feature_dim] + [hidden] * depth + [n_classes], rng)


def split_extractor(fe: FeatureExtractor, clf: Classifier, n_layers: int) -> tuple[Mlp, Mlp]:
    """Cut the pipeline after ``n_layers`` extractor layers.

    Returns a frozen head and a trainable classification model made of the
    remaining extractor layers followed by the classifier.
    """
    if not 1 <= n_layers <= len(fe.layers):
        raise ValueError(f"split point {n_layers} outside [1, {len(fe.layers)}]")
    head = copy.deepcopy(fe)
    head.layers, head.acts = head.layers[:n_layers], head.acts[:n_layers]
    head.freeze()
    tail = copy.deepcopy(clf)
    fe_copy = copy.deepcopy(fe)
    tail.layers = fe_copy.layers[n_layers:] + tail.layers
    tail.acts = fe_copy.acts[n_layers:] + tail.acts
    for p in tail.parameters():
        p.requires_grad = True
    tail.frozen = False
    return head, tail


def timestep_embedding(ks, width: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape ``(len(ks), width)``."""
    if width < 2 or width % 2:
        raise ValueError("embedding width must be a positive even number")
    ks = np.atleast_1d(np.asarray(ks, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = ks[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(nx.default_dtype())


@functools.lru_cache(maxsize=4096)
def _embedding_row(k: int, width: int) -> np.ndarray:
    row = timestep_embedding([k], width)[0]
    row.flags.writeable = False
    return row


class NoisePredictor(Mlp):
    """Predicts injected noise from ``[features, embed(k)]``."""

    def __init__(self, feature_dim: int, K: int, rng: Rng, hidden: int = 128, depth: int = 3,
                 embed_dim: int = 32):
        super().__init__([feature_dim + embed_dim] + [hidden] * depth + [feature_dim], rng)
        self.feature_dim = feature_dim
        self.K = K
        self.embed_dim = embed_dim

    def __call__(self, f_k: Tensor, k) -> Tensor:
        f_k = nx.as_tensor(f_k)
        if f_k.data.ndim != 2 or f_k.shape[1] != self.feature_dim:
            raise ValueError(f"NoisePredictor: expected width {self.feature_dim}, got shape {f_k.shape}")
        ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (f_k.shape[0],))
        if ks.size and (ks.min() < 1 or ks.max() > self.K):
            raise ValueError(f"step outside [1, {self.K}]")
        if ks.size and ks[0] == ks[-1] and (ks == ks[0]).all():
            emb = np.broadcast_to(_embedding_row(int(ks[0]), self.embed_dim), (len(ks), self.embed_dim))
        else:
            emb = timestep_embedding(ks, self.embed_dim)
        return self.forward(nx.concat([f_k, Tensor(emb)], axis=1))


def feature_extract(fe: Mlp, x, tag: DomainTag = SOURCE_TAG, labels=None) -> FeatureBatch:
    x = nx.as_tensor(x)
    return FeatureBatch(fe(x), labels, tag)


def classify(c: Mlp, f) -> Tensor:
    feats = f.features if isinstance(f, FeatureBatch) else f
    return c(feats)


def noise_predict(model: NoisePredictor, f_k, k) -> Tensor:
    return model(f_k, k)


def snapshot(model: Mlp) -> Mlp:
    """Deep, frozen, independent copy."""
    return copy.deepcopy(model).freeze()


# --- checkpoint container -----------------------------------------------------

MAGIC = b"DADMLSCK"
VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write a named parameter table as little-endian float64."""
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(buf):
                raise ValueError("truncated")
            params[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    return params


def prefixed(prefix: str, model: Mlp) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in model.state_dict().items()}


def section(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    out = {k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")}
    if not out:
        raise KeyError(f"checkpoint has no section {prefix!r}")
    return out
