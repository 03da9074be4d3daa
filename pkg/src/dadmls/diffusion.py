"""Variance schedule, forward diffusion and the learned reverse step."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Union

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

if TYPE_CHECKING:
    from .models import FeatureBatch

# Anything mapping (features, per-row timesteps) -> predicted noise.
Predictor = Callable[[Tensor, np.ndarray], Tensor]
FeaturesLike = Union["FeatureBatch", Tensor, np.ndarray]


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step variances ``beta`` with ``alpha = 1 - beta`` and running products.

    Arrays are indexed from 0, so step ``k`` lives at position ``k - 1``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def K(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas) -> VarianceSchedule:
        beta = np.asarray(betas, dtype=np.float64).copy()
        if beta.ndim != 1 or len(beta) == 0:
            raise ValueError("need at least one step")
        if np.any(beta < 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in [0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (beta, alpha, alpha_bar):
            arr.flags.writeable = False
        return cls(beta, alpha, alpha_bar)

    def check_step(self, k: int) -> int:
        k = int(k)
        if not 1 <= k <= self.K:
            raise ValueError(f"step {k} outside [1, {self.K}]")
        return k

    def beta_at(self, k: int) -> float:
        return float(self.beta[self.check_step(k) - 1])

    def alpha_at(self, k: int) -> float:
        return float(self.alpha[self.check_step(k) - 1])

    def alpha_bar_at(self, k: int) -> float:
        return float(self.alpha_bar[self.check_step(k) - 1])


def make_linear_schedule(K: int, beta_1: float = 1e-4, beta_K: float = 0.02) -> VarianceSchedule:
    if K < 1:
        raise ValueError("K must be at least 1")
    if not 0 < beta_1 <= beta_K < 1:
        raise ValueError("need 0 < beta_1 <= beta_K < 1")
    if K == 1:
        return VarianceSchedule.from_betas([beta_1])
    return VarianceSchedule.from_betas(np.linspace(beta_1, beta_K, K))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")


def diffuse_one_step(f_prev, k: int, sched: VarianceSchedule, noise) -> Tensor:
    """One forward step: ``sqrt(1 - beta_k) f + sqrt(beta_k) noise``."""
    f_prev, noise = nx.as_tensor(f_prev), nx.as_tensor(noise)
    _same_shape(f_prev, noise, "diffuse_one_step")
    b = sched.beta_at(k)
    return f_prev * math.sqrt(1.0 - b) + noise * math.sqrt(b)


def diffuse_k_steps(f0, k: int, sched: VarianceSchedule, noise) -> Tensor:
    """Closed-form k-step marginal: ``sqrt(abar_k) f0 + sqrt(1 - abar_k) noise``."""
    f0, noise = nx.as_tensor(f0), nx.as_tensor(noise)
    _same_shape(f0, noise, "diffuse_k_steps")
    ab = sched.alpha_bar_at(k)
    return f0 * math.sqrt(ab) + noise * math.sqrt(1.0 - ab)


def _timesteps(k, n: int, sched: VarianceSchedule) -> np.ndarray:
    ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
    if ks.size and (ks.min() < 1 or ks.max() > sched.K):
        raise ValueError(f"step outside [1, {sched.K}]")
    return ks


def reverse_mean(f_k, k: int, sched: VarianceSchedule, f_theta: Predictor) -> Tensor:
    """Predicted mean of the reverse step from noise prediction ``f_theta``."""
    f_k = nx.as_tensor(f_k)
    sched.check_step(k)
    eps = f_theta(f_k, _timesteps(k, f_k.shape[0], sched))
    _same_shape(f_k, eps, "reverse_mean")
    a, b, ab = sched.alpha_at(k), sched.beta_at(k), sched.alpha_bar_at(k)
    coef = b / math.sqrt(1.0 - ab) if b > 0 else 0.0
    return (f_k - eps * coef) * (1.0 / math.sqrt(a))


def reverse_one_step(f_k, k: int, sched: VarianceSchedule, f_theta: Predictor, noise) -> Tensor:
    """Sample from the reverse step with variance ``beta_k``; no noise at ``k = 1``."""
    f_k, noise = nx.as_tensor(f_k), nx.as_tensor(noise)
    _same_shape(f_k, noise, "reverse_one_step")
    mu = reverse_mean(f_k, k, sched, f_theta)
    if k == 1:
        return mu
    return mu + noise * math.sqrt(sched.beta_at(k))


def _features_of(batch: FeaturesLike) -> Tensor:
    feats = getattr(batch, "features", batch)
    return nx.as_tensor(feats)


def reverse_loss(batch: FeaturesLike, f_theta: Predictor, sched: VarianceSchedule, rng: Rng,
                 *, return_draws: bool = False):
    """Noise-prediction objective averaged over rows and feature width.

    Each row gets its own uniformly drawn step and standard-normal noise.
    With ``return_draws`` the drawn ``(ks, eps)`` are returned alongside.
    """
    f0 = _features_of(batch)
    if f0.data.ndim != 2 or f0.shape[0] == 0:
        raise ValueError("reverse_loss: empty batch")
    n, d = f0.shape
    ks = rng.integers(1, sched.K + 1, size=n)
    eps = rng.normal((n, d))
    ab = sched.alpha_bar[ks - 1][:, None]
    f_k = f0 * np.sqrt(ab) + nx.Tensor(eps) * np.sqrt(1.0 - ab)
    pred = f_theta(f_k, ks)
    _same_shape(pred, f_k, "reverse_loss")
    loss = nx.mse(pred, eps)
    if return_draws:
        return loss, ks, eps
    return loss
