"""Domain-adaptive diffusion: noise source features k steps, denoise k steps toward the target."""

from __future__ import annotations

import contextlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .diffusion import VarianceSchedule, diffuse_k_steps, reverse_loss, reverse_one_step
from .metrics import MmdConfig, median_bandwidth, rbf_mmd2
from .models import SOURCE, TARGET, FeatureBatch, NoisePredictor, transitional
from .numerics import OptSettings, PolySgd, Rng, Tensor


@dataclass
class DadModule:
    """Noise predictor plus schedule.

    Diffusion runs in a standardized coordinate frame: ``z = (f - center) / scale``,
    with ``center``/``scale`` fitted once on pooled source and target features.
    ``truncate_reverse_grad`` limits backprop to the last n reverse steps
    (``None`` keeps the whole chain).
    """

    f_theta: NoisePredictor
    sched: VarianceSchedule
    center: np.ndarray
    scale: np.ndarray
    truncate_reverse_grad: Optional[int] = None
    frozen: bool = False

    @classmethod
    def create(cls, feature_dim: int, sched: VarianceSchedule, rng: Rng, hidden: int = 128, depth: int = 3,
               embed_dim: int = 32, truncate_reverse_grad: Optional[int] = None) -> DadModule:
        net = NoisePredictor(feature_dim, sched.K, rng, hidden=hidden, depth=depth, embed_dim=embed_dim)
        return cls(net, sched, np.zeros(feature_dim), np.ones(feature_dim), truncate_reverse_grad)

    @property
    def K(self) -> int:
        return self.sched.K

    def fit_frame(self, *feature_sets) -> None:
        pooled = np.concatenate([np.asarray(getattr(f, "features", f).data) for f in feature_sets])
        std = pooled.std(axis=0)
        self.center = pooled.mean(axis=0)
        self.scale = np.where(std > 1e-8, std, 1.0)

    def to_frame(self, f: Tensor) -> Tensor:
        return (f - self.center) * (1.0 / self.scale)

    def from_frame(self, z: Tensor) -> Tensor:
        return z * self.scale + self.center

    def parameters(self) -> list[Tensor]:
        return self.f_theta.parameters()

    def checksum(self) -> str:
        return self.f_theta.checksum()

    def freeze(self) -> DadModule:
        self.frozen = True
        self.f_theta.freeze()
        return self

    def unfreeze(self) -> DadModule:
        self.frozen = False
        self.f_theta.frozen = False
        for p in self.f_theta.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.f_theta.state_dict()
        state["frame.center"] = np.asarray(self.center, dtype=np.float64).copy()
        state["frame.scale"] = np.asarray(self.scale, dtype=np.float64).copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.f_theta.load_state_dict(state)
        self.center = state["frame.center"].copy()
        self.scale = state["frame.scale"].copy()


def simulate_transitional(dad: DadModule, f_s: FeatureBatch, k: int, rng: Rng) -> FeatureBatch:
    """Transitional features at step k; labels are carried over from ``f_s``.

    ``k = 0`` returns the source batch itself. Noise is drawn from ``rng``: one
    draw for the diffusion leg, then one per reverse step above step 1.
    """
    if f_s.domain_tag.kind != SOURCE:
        raise ValueError(f"simulate_transitional expects source features, got {f_s.domain_tag}")
    if not 0 <= k <= dad.K:
        raise ValueError(f"k={k} outside [0, {dad.K}]")
    if k == 0:
        return f_s
    shape = f_s.features.shape
    trunc = dad.truncate_reverse_grad
    frozen_ctx = nx.no_grad() if dad.frozen else contextlib.nullcontext()
    with frozen_ctx:
        z = diffuse_k_steps(dad.to_frame(f_s.features), k, dad.sched, Tensor(rng.normal(shape)))
        for step in range(k, 0, -1):
            noise = Tensor(rng.normal(shape)) if step > 1 else Tensor(np.zeros(shape))
            if trunc is not None and step > trunc:
                with nx.no_grad():
                    z = reverse_one_step(z, step, dad.sched, dad.f_theta, noise)
                continue
            z = reverse_one_step(z, step, dad.sched, dad.f_theta, noise)
        out = dad.from_frame(z)
    return FeatureBatch(out, f_s.labels.copy(), transitional(k))


def target_reverse_loss(dad: DadModule, f_t: FeatureBatch, rng: Rng) -> Tensor:
    """Noise-prediction loss on target features, in the module's frame."""
    if f_t.domain_tag.kind != TARGET:
        raise ValueError(f"expected target features, got {f_t.domain_tag}")
    return reverse_loss(dad.to_frame(f_t.features), dad.f_theta, dad.sched, rng)


def pretrain_target_reverse(dad: DadModule, target_features: Iterable[FeatureBatch], steps: int,
                            opt: OptSettings, rng: Rng, optimizer: PolySgd | None = None) -> list[float]:
    """Fit the reverse operator to target features; returns the per-step loss."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if dad.frozen:
        raise ValueError("cannot train a frozen DAD module")
    optimizer = optimizer or PolySgd(dad.parameters(), opt, steps)
    it = iter(target_features)
    trace = []
    for _ in range(steps):
        optimizer.zero_grad()
        loss = target_reverse_loss(dad, next(it), rng)
        loss.backward()
        optimizer.step()
        trace.append(loss.item())
    return trace


def dad_distance_profile(dad: DadModule, f_s: FeatureBatch, f_t: FeatureBatch, ks: Sequence[int], rng: Rng,
                         cfg: MmdConfig | None = None) -> list[tuple[int, float]]:
    """MMD^2 between simulated step-k features and the target, for each k.

    The kernel bandwidth is fixed for the whole profile (median heuristic on
    pooled source and target) so the values are comparable across k.
    """
    if not ks:
        raise ValueError("need at least one step")
    if any(not 0 <= k <= dad.K for k in ks):
        raise ValueError(f"steps must lie in [0, {dad.K}]")
    xs, xt = f_s.features.data, f_t.features.data
    cfg = cfg or MmdConfig(median_bandwidth(xs, xt))
    out = []
    with nx.no_grad():
        for k in ks:
            sim = simulate_transitional(dad, f_s, k, rng.child(int(k)))
            out.append((int(k), rbf_mmd2(sim.features.data, xt, cfg)))
    return out


def profile_steps(K: int, n_points: int = 20) -> list[int]:
    """``0, K/n, 2K/n, ..., K`` rounded to integers without duplicates."""
    if K == 0:
        return [0]
    raw = np.rint(np.linspace(0, K, n_points + 1)).astype(int)
    return sorted(set(int(k) for k in raw))
