"""Self-contained property suites behind the ``grad-check`` and ``selftest`` verbs."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dad import DadModule, simulate_transitional
from .diffusion import diffuse_k_steps, diffuse_one_step, make_linear_schedule, reverse_loss
from .models import SOURCE_TAG, Classifier, FeatureBatch, FeatureExtractor, NoisePredictor
from .numerics import Rng, Tensor


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.4g} (threshold {self.threshold:.4g}){' ' + self.detail if self.detail else ''}"


GRAD_TOL = 1e-4


# --- gradient fidelity --------------------------------------------------------------


def _param(rng: Rng, shape, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.normal(shape), requires_grad=True)


def _away_from_zero(rng: Rng, shape, margin: float = 0.05) -> Tensor:
    # keeps leaky_relu inputs off the kink so central differences stay smooth
    x = rng.normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)
    return Tensor(x, requires_grad=True)


def _op_cases(rng: Rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b = _param(rng, (4, 3)), _param(rng, (4, 3))
    row = _param(rng, (1, 3))
    w, bias = _param(rng, (3, 5)), _param(rng, (5,))
    x = _param(rng, (4, 3))
    z = _away_from_zero(rng.child("relu"), (4, 3))
    logits = _param(rng, (6, 4))
    labels = rng.integers(0, 4, size=6)
    target = rng.normal((4, 3))
    weights = rng.normal((4, 3))

    def weighted(t: Tensor) -> Tensor:
        # a fixed random projection makes every output entry matter
        return nx.sum(t * weights)

    return {
        "add": (lambda: weighted(a + b), [a, b]),
        "add_broadcast": (lambda: weighted(a + row), [a, row]),
        "sub": (lambda: weighted(a - b), [a, b]),
        "mul": (lambda: weighted(a * b), [a, b]),
        "mul_broadcast": (lambda: weighted(a * row), [a, row]),
        "neg_div": (lambda: weighted(-a / 3.0), [a]),
        "matmul": (lambda: nx.sum(nx.matmul(x, w) * rng.child("mm").normal((4, 5))), [x, w]),
        "linear": (lambda: nx.sum(nx.linear(x, w, bias) * rng.child("lin").normal((4, 5))), [x, w, bias]),
        "leaky_relu": (lambda: weighted(nx.leaky_relu(z)), [z]),
        "square": (lambda: weighted(nx.square(a)), [a]),
        "sum_axis0": (lambda: nx.sum(nx.sum(a, axis=0) * rng.child("s0").normal((3,))), [a]),
        "sum_axis1": (lambda: nx.sum(nx.sum(a, axis=1) * rng.child("s1").normal((4,))), [a]),
        "mean": (lambda: nx.mean(a * b), [a, b]),
        "concat": (lambda: nx.sum(nx.concat([a, x], axis=1) * rng.child("cat").normal((4, 6))), [a, x]),
        "mse": (lambda: nx.mse(a, Tensor(target)), [a]),
        "softmax_cross_entropy": (lambda: nx.softmax_cross_entropy(logits, labels), [logits]),
    }


def _model_cases(rng: Rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    fe = FeatureExtractor(2, 4, rng.child("fe"), hidden=6, depth=2)
    clf = Classifier(4, 3, rng.child("clf"), hidden=5, depth=2)
    x = Tensor(rng.normal((7, 2)))
    y = rng.integers(0, 3, size=7)

    net = NoisePredictor(4, 5, rng.child("np"), hidden=6, depth=2, embed_dim=4)
    sched = make_linear_schedule(5, 0.01, 0.2)
    f0 = rng.normal((6, 4))
    draws = rng.child("draws")

    def noise_loss() -> Tensor:
        # fresh identical draws on every evaluation so the objective is a fixed function
        return reverse_loss(f0, net, sched, draws.child(1))

    dad = DadModule(NoisePredictor(4, 3, rng.child("dad"), hidden=6, depth=2, embed_dim=4),
                    make_linear_schedule(3, 0.05, 0.2), np.zeros(4), np.ones(4))
    clf_snap = Classifier(4, 2, rng.child("snap"), hidden=5, depth=1).freeze()
    fs = FeatureBatch(Tensor(rng.normal((5, 4))), rng.integers(0, 2, size=5), SOURCE_TAG)

    def chain_loss() -> Tensor:
        sim = simulate_transitional(dad, fs, 3, draws.child(2))
        return nx.softmax_cross_entropy(clf_snap(sim.features), sim.labels)

    return {
        "model:extractor+classifier": (lambda: nx.softmax_cross_entropy(clf(fe(x)), y),
                                       fe.parameters() + clf.parameters()),
        "model:noise_predictor": (noise_loss, net.parameters()),
        "model:dad_chain": (chain_loss, dad.parameters()),
    }


def gradient_suite(seeds: Iterable[int] = range(10), max_entries: int = 200) -> list[CheckResult]:
    """Worst relative error per op/model across ``seeds``, in float64."""
    previous = nx.default_dtype()
    nx.set_default_dtype(np.float64)
    try:
        worst: dict[str, float] = {}
        for seed in seeds:
            rng = Rng(seed).child("gradcheck")
            cases = {**_op_cases(rng.child("ops")), **_model_cases(rng.child("models"))}
            for name, (fn, params) in cases.items():
                err = nx.grad_check(fn, params, max_entries=max_entries, rng=rng.child(name))
                worst[name] = max(worst.get(name, 0.0), err)
    finally:
        nx.set_default_dtype(previous)
    return [CheckResult(f"grad {name}", err < GRAD_TOL, err, GRAD_TOL) for name, err in worst.items()]


# --- diffusion properties -------------------------------------------------------------


def _within(diff: float, se: float, n_sigma: float = 3.0) -> tuple[bool, float]:
    z = abs(diff) / se if se > 0 else (0.0 if diff == 0 else math.inf)
    return z <= n_sigma, z


def diffusion_suite(K: int = 50, beta_1: float = 1e-4, beta_K: float = 0.02, trials: int = 10_000,
                    seed: int = 0) -> list[CheckResult]:
    sched = make_linear_schedule(K, beta_1, beta_K)
    out = []

    # (a) exact identities
    exact = (np.array_equal(sched.alpha, 1.0 - sched.beta)
             and np.array_equal(sched.alpha_bar, np.cumprod(sched.alpha))
             and sched.beta[0] == beta_1 and sched.beta[-1] == beta_K
             and bool(np.all(np.diff(sched.beta) >= 0)))
    out.append(CheckResult("schedule identities", exact, 0.0 if exact else 1.0, 0.0))

    # (b) closed form vs iterated chain
    rng = Rng(seed).child("diffusion_mc")
    f0 = np.array([[1.5, -0.75]])
    for k in sorted({1, min(10, K), K}):
        r = rng.child(k)
        closed = diffuse_k_steps(np.repeat(f0, trials, 0), k, sched, r.child("closed").normal((trials, 2))).data
        it = np.repeat(f0, trials, 0)
        steps = r.child("iter")
        for j in range(1, k + 1):
            it = diffuse_one_step(it, j, sched, steps.normal((trials, 2))).data
        var = 1.0 - sched.alpha_bar_at(k)
        worst_z, ok = 0.0, True
        for c in range(2):
            m_ok, z_m = _within(closed[:, c].mean() - it[:, c].mean(), math.sqrt(2 * var / trials))
            v_ok, z_v = _within(closed[:, c].var(ddof=1) - it[:, c].var(ddof=1),
                                math.sqrt(2 * 2 * var**2 / (trials - 1)))
            ok &= m_ok and v_ok
            worst_z = max(worst_z, z_m, z_v)
        out.append(CheckResult(f"closed form vs iterated, k={k}", ok, worst_z, 3.0, "(z-score)"))

    # (c) a predictor that recovers the injected noise exactly
    batch = rng.child("stub").normal((256, 4))

    def exact_eps(f_k: Tensor, ks: np.ndarray) -> Tensor:
        ab = sched.alpha_bar[ks - 1][:, None]
        return Tensor((f_k.data - np.sqrt(ab) * batch) / np.sqrt(1.0 - ab))

    stub = reverse_loss(batch, exact_eps, sched, rng.child("stub_loss")).item()
    out.append(CheckResult("exact-noise predictor loss", stub < 1e-12, stub, 1e-12))

    # (d) zero predictor: loss is the mean of squared standard normals
    n, d = 2048, 4
    zero = reverse_loss(rng.child("zero").normal((n, d)), lambda f, ks: Tensor(np.zeros(f.shape)), sched,
                        rng.child("zero_loss")).item()
    ok, z = _within(zero - 1.0, math.sqrt(2.0 / (n * d)))
    out.append(CheckResult("zero predictor loss near 1", ok, z, 3.0, f"(z-score, loss={zero:.4f})"))
    return out
