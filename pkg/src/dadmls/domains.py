"""Seeded synthetic source/target domain pairs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    domain_name: str
    generator_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or len(self.points) < 1:
            raise ValueError("need a non-empty 2-D point array")
        if self.labels.shape != (len(self.points),):
            raise ValueError("one label per point required")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.generator_params.get("n_classes", self.labels.max() + 1))

    def subset(self, rows) -> LabeledDataset:
        return LabeledDataset(self.points[rows], self.labels[rows], self.domain_name, dict(self.generator_params))


def _balanced_labels(n: int, C: int) -> np.ndarray:
    return np.arange(n) % C


def gen_two_moons(n: int, noise_std: float = 0.08, seed: int = 0) -> LabeledDataset:
    """Two interleaved unit half-circles centred on the origin.

    Class 0 is the upper arc centred at ``(-0.5, -0.25)``, class 1 the lower
    arc centred at ``(0.5, 0.25)``.
    """
    if n < 2:
        raise ValueError("two moons needs n >= 2")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = Rng(seed).child("two_moons")
    labels = _balanced_labels(n, 2)
    t = rng.uniform(0.0, math.pi, n)
    pts = np.empty((n, 2))
    up = labels == 0
    pts[up, 0] = np.cos(t[up]) - 0.5
    pts[up, 1] = np.sin(t[up]) - 0.25
    pts[~up, 0] = 1.0 - np.cos(t[~up]) - 0.5
    pts[~up, 1] = 0.25 - np.sin(t[~up])
    if noise_std > 0:
        pts = pts + noise_std * rng.normal((n, 2))
    return LabeledDataset(pts, labels, "two_moons",
                          {"generator": "two_moons", "n": n, "noise_std": noise_std, "seed": seed, "n_classes": 2})


def moon_centres() -> np.ndarray:
    return np.array([[-0.5, -0.25], [0.5, 0.25]])


def rotation_matrix(deg: float) -> np.ndarray:
    th = math.radians(deg)
    return np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])


def apply_shift(d: LabeledDataset, rotation_deg: float = 0.0, translation=None, scale: float = 1.0,
                name: str | None = None) -> LabeledDataset:
    """``x -> scale * R(rotation) x + translation``; labels untouched.

    Rotation acts in the first two coordinates.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    dim = d.input_dim
    R = np.eye(dim)
    if rotation_deg:
        if dim < 2:
            raise ValueError("rotation needs at least two coordinates")
        R[:2, :2] = rotation_matrix(rotation_deg)
    t = np.zeros(dim) if translation is None else np.asarray(translation, dtype=np.float64)
    if t.shape != (dim,):
        raise ValueError(f"translation must have length {dim}")
    pts = scale * d.points @ R.T + t
    params = dict(d.generator_params, rotation_deg=rotation_deg, translation=t.tolist(), scale=scale)
    return LabeledDataset(pts, d.labels.copy(), name or d.domain_name, params)


def invert_shift(d: LabeledDataset, rotation_deg: float = 0.0, translation=None, scale: float = 1.0) -> LabeledDataset:
    dim = d.input_dim
    R = np.eye(dim)
    if rotation_deg:
        R[:2, :2] = rotation_matrix(rotation_deg)
    t = np.zeros(dim) if translation is None else np.asarray(translation, dtype=np.float64)
    pts = ((d.points - t) @ R) / scale
    return LabeledDataset(pts, d.labels.copy(), d.domain_name, dict(d.generator_params))


def class_directions(C: int, dim: int) -> np.ndarray:
    """Fixed unit shift direction per class: evenly spaced angles in the first plane."""
    ang = 2 * math.pi * np.arange(C) / C + math.pi / 4
    out = np.zeros((C, dim))
    out[:, 0], out[:, 1] = np.cos(ang), np.sin(ang)
    return out


def mixture_means(C: int, dim: int = 2, radius: float = 3.0) -> np.ndarray:
    ang = 2 * math.pi * np.arange(C) / C
    out = np.zeros((C, dim))
    out[:, 0], out[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    return out


def gen_gaussian_mixture_pair(C: int, n: int, mean_shift: float, seed: int = 0, dim: int = 2,
                              std: float = 1.0, radius: float = 3.0) -> tuple[LabeledDataset, LabeledDataset]:
    """Unit-variance class clusters; the target moves class c by ``mean_shift`` along its direction."""
    if C < 2:
        raise ValueError("need at least two classes")
    if n < 1:
        raise ValueError("need n >= 1")
    rng = Rng(seed).child("gaussian_mixture")
    means = mixture_means(C, dim, radius)
    shifted = means + mean_shift * class_directions(C, dim)
    params = {"generator": "gaussian_mixture", "n": n, "C": C, "mean_shift": mean_shift, "seed": seed,
              "std": std, "n_classes": C}
    out = []
    for name, mu, stream in (("source", means, "source"), ("target", shifted, "target")):
        labels = _balanced_labels(n, C)
        pts = mu[labels] + std * rng.child(stream).normal((n, dim))
        out.append(LabeledDataset(pts, labels, name, dict(params)))
    return out[0], out[1]


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine map fitted on one domain, reused for the other."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, points: np.ndarray) -> Standardizer:
        std = points.std(axis=0)
        return cls(points.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, d: LabeledDataset) -> LabeledDataset:
        return LabeledDataset((d.points - self.mean) / self.std, d.labels, d.domain_name, dict(d.generator_params))


def train_test_split(d: LabeledDataset, test_fraction: float, rng: Rng) -> tuple[LabeledDataset, LabeledDataset]:
    perm = rng.permutation(len(d))
    n_test = int(round(test_fraction * len(d)))
    return d.subset(np.sort(perm[n_test:])), d.subset(np.sort(perm[:n_test]))


def to_csv(datasets: list[LabeledDataset]) -> str:
    buf = io.StringIO()
    dim = datasets[0].input_dim
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(dim)] + ["label", "domain"])
    for d in datasets:
        if d.input_dim != dim:
            raise ValueError("datasets differ in input width")
        for p, y in zip(d.points, d.labels):
            w.writerow([repr(float(v)) for v in p] + [int(y), d.domain_name])
    return buf.getvalue()


def save_csv(path, datasets: list[LabeledDataset]) -> None:
    Path(path).write_text(to_csv(datasets), encoding="utf-8")


def load_csv(path) -> dict[str, LabeledDataset]:
    """Read back a delimited export, one dataset per domain column value."""
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["label", "domain"] or not all(h == f"x{i}" for i, h in enumerate(header[:-2])):
        raise ValueError(f"{path}: unexpected header {header}")
    groups: dict[str, tuple[list, list]] = {}
    for r in body:
        pts, lab = groups.setdefault(r[-1], ([], []))
        pts.append([float(v) for v in r[:-2]])
        lab.append(int(r[-2]))
    return {name: LabeledDataset(np.array(p), np.array(y), name) for name, (p, y) in groups.items()}
