"""Mutual learning between the classifier and the DAD module, plus the experiment runners."""

from __future__ import annotations

import json
import time
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .config import ExperimentConfig, as_dict
from .dad import (
    DadModule,
    dad_distance_profile,
    pretrain_target_reverse,
    profile_steps,
    simulate_transitional,
    target_reverse_loss,
)
from .diffusion import make_linear_schedule
from .domains import (
    LabeledDataset,
    Standardizer,
    apply_shift,
    gen_gaussian_mixture_pair,
    gen_two_moons,
    train_test_split,
)
from .metrics import MmdConfig, accuracy, median_bandwidth, rbf_mmd2
from .models import (
    SOURCE,
    SOURCE_TAG,
    TARGET_TAG,
    TRANSITIONAL,
    Classifier,
    FeatureBatch,
    FeatureExtractor,
    Mlp,
    snapshot,
    split_extractor,
)
from .numerics import OptSettings, PolySgd, Rng, Tensor


class InvariantViolation(RuntimeError):
    """A frozen model or an out-of-phase parameter set changed."""


# --- replay buffer --------------------------------------------------------------


class ReplayBuffer:
    """Bounded reservoir of batches per distribution index (0 = source)."""

    def __init__(self, capacity: int, rng: Rng):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.stores: dict[int, list[FeatureBatch]] = {}
        self.counts: dict[int, int] = {}

    def insert(self, i: int, batch: FeatureBatch) -> None:
        tag = batch.domain_tag
        expected_ok = tag.kind == SOURCE if i == 0 else (tag.kind == TRANSITIONAL and tag.k == i)
        if not expected_ok:
            raise ValueError(f"store {i} cannot hold a {tag} batch")
        batch = batch.detach()
        store = self.stores.setdefault(i, [])
        self.counts[i] = self.counts.get(i, 0) + 1
        if len(store) < self.capacity:
            store.append(batch)
            return
        j = int(self.rng.integers(0, self.counts[i]))
        if j < self.capacity:
            store[j] = batch

    def indices(self, below: Optional[int] = None) -> list[int]:
        return sorted(i for i in self.stores if below is None or i < below)

    def sample(self, i: int, rng: Rng) -> FeatureBatch:
        store = self.stores[i]
        return store[int(rng.integers(0, len(store)))]

    def __len__(self) -> int:
        return len(self.stores)


def minibatches(fb: FeatureBatch, batch_size: int, rng: Rng) -> Iterator[FeatureBatch]:
    """Endless shuffled mini-batches; each epoch drops its ragged tail."""
    n = len(fb)
    size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield fb.take(perm[start:start + size])


# --- training phases --------------------------------------------------------------


@dataclass
class MlsState:
    k: int
    classifier: Mlp
    classifier_snapshot: Mlp
    dad: DadModule
    buffer: ReplayBuffer
    extractor: Optional[Mlp] = None
    records: list[dict] = field(default_factory=list)


def train_source(fe: Mlp, c: Mlp, data: LabeledDataset, epochs: int, opt: OptSettings, rng: Rng,
                 batch_size: int = 24, extractor_lr_scale: float = 1.0) -> list[float]:
    """Joint cross-entropy training of extractor and classifier; freezes ``fe`` afterwards.

    The extractor's learning rate is ``extractor_lr_scale`` times the classifier's
    (0 leaves it at its initial weights).
    """
    if len(data) == 0:
        raise ValueError("train_source: empty dataset")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    size = min(batch_size, len(data))
    per_epoch = len(data) // size
    optimizers = [PolySgd(c.parameters(), opt, epochs * per_epoch)]
    if extractor_lr_scale > 0:
        fe_opt = OptSettings(opt.lr * extractor_lr_scale, opt.momentum, opt.weight_decay, opt.poly_power)
        optimizers.append(PolySgd(fe.parameters(), fe_opt, epochs * per_epoch))
    x_all = data.points
    trace = []
    for _ in range(epochs):
        perm = rng.permutation(len(data))
        for b in range(per_epoch):
            rows = perm[b * size:(b + 1) * size]
            for o in optimizers:
                o.zero_grad()
            loss = nx.softmax_cross_entropy(c(fe(Tensor(x_all[rows]))), data.labels[rows])
            loss.backward()
            for o in optimizers:
                o.step()
            trace.append(loss.item())
    fe.freeze()
    return trace


def _ce(model: Mlp, batch: FeatureBatch) -> Tensor:
    return nx.softmax_cross_entropy(model(batch.features), batch.labels)


def probe_ce(state: MlsState, probe: FeatureBatch, k: int, rng: Rng) -> float:
    """Frozen-snapshot cross-entropy on a transitional batch built from a fixed noise stream."""
    with nx.no_grad():
        sim = simulate_transitional(state.dad, probe, k, rng)
        return _ce(state.classifier_snapshot, sim).item()


def c_to_d_phase(state: MlsState, source_batches: Iterator[FeatureBatch], target_batches: Iterator[FeatureBatch],
                 r: int, optimizer: PolySgd, rng: Rng, ce_weight: float = 1.0) -> list[float]:
    """Update the DAD noise predictor so the frozen snapshot still recognises step-k features.

    The objective is ``ce_weight * CE(snapshot(F^{D_k}), Y_S) + target reverse loss``.
    Target noise/timesteps come from ``rng`` itself; transitional simulation uses
    the independent ``rng.child("simulate")`` stream.
    """
    if r < 0:
        raise ValueError("r must be non-negative")
    if not state.classifier_snapshot.frozen:
        raise ValueError("classifier snapshot must be frozen")
    if state.dad.frozen:
        raise ValueError("DAD module must be trainable during C->D")
    sim_rng = rng.child("simulate")
    trace = []
    for _ in range(r):
        optimizer.zero_grad()
        loss = target_reverse_loss(state.dad, next(target_batches), rng)
        if ce_weight:
            sim = simulate_transitional(state.dad, next(source_batches), state.k, sim_rng)
            loss = _ce(state.classifier_snapshot, sim) * ce_weight + loss
        loss.backward()
        optimizer.step()
        trace.append(loss.item())
    return trace


def replay_loss(classifier: Mlp, buffer: ReplayBuffer, k: int, m_replay: int, rng: Rng,
                regenerate: Optional[tuple[DadModule, Iterator[FeatureBatch], Rng]] = None) -> Tensor:
    """Average CE over ``m_replay`` previous distributions drawn uniformly without replacement.

    Unbiased for the mean CE over every stored distribution index below ``k``.
    With ``regenerate`` set, indices above 0 are re-simulated with the current
    DAD module instead of read from the buffer.
    """
    idx = buffer.indices(below=k)
    if not idx:
        raise ValueError("replay buffer holds no distribution below the current step")
    m = min(m_replay, len(idx))
    chosen = [idx[j] for j in rng.choice(len(idx), m)]
    terms = []
    for i in chosen:
        if regenerate is not None and i > 0:
            dad, source_batches, sim_rng = regenerate
            batch = simulate_transitional(dad, next(source_batches), i, sim_rng)
        else:
            batch = buffer.sample(i, rng)
        terms.append(_ce(classifier, batch))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / m)


def d_to_c_phase(state: MlsState, source_batches: Iterator[FeatureBatch], r: int, m_replay: int,
                 optimizer: PolySgd, rng: Rng, lpd: bool = True, insert: bool = True,
                 regenerate: bool = False) -> list[float]:
    """Train the classifier on fresh step-k features, plus replay of earlier distributions.

    Generated step-k batches are pushed into the buffer (when ``insert``) for later phases.
    """
    if r < 0:
        raise ValueError("r must be non-negative")
    if not state.dad.frozen:
        raise ValueError("DAD module must be frozen during D->C")
    if lpd and not state.buffer.indices(below=state.k):
        raise ValueError("replay buffer is empty")
    sim_rng = rng.child("simulate")
    regen = (state.dad, source_batches, rng.child("regenerate")) if regenerate else None
    trace = []
    for _ in range(r):
        optimizer.zero_grad()
        sim = simulate_transitional(state.dad, next(source_batches), state.k, sim_rng)
        loss = _ce(state.classifier, sim)
        if lpd:
            loss = replay_loss(state.classifier, state.buffer, state.k, m_replay, rng, regen) + loss
        loss.backward()
        optimizer.step()
        trace.append(loss.item())
        if insert and state.k > 0:
            state.buffer.insert(state.k, sim)
    return trace


# --- experiment plumbing ------------------------------------------------------------


@dataclass
class DomainSplits:
    source_train: LabeledDataset
    source_test: LabeledDataset
    target_train: LabeledDataset
    target_test: LabeledDataset

    @property
    def n_classes(self) -> int:
        return self.source_train.n_classes


def make_domains(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.dataset == "two_moons":
        src = gen_two_moons(cfg.n_per_domain, cfg.noise_std, cfg.seed)
        base = gen_two_moons(cfg.n_per_domain, cfg.noise_std, cfg.seed + 1)
        tgt = apply_shift(base, cfg.rotation_deg, [cfg.translate_x, cfg.translate_y], cfg.scale, name="target")
        return LabeledDataset(src.points, src.labels, "source", src.generator_params), tgt
    return gen_gaussian_mixture_pair(cfg.n_classes, cfg.n_per_domain, cfg.mean_shift, cfg.seed)


def prepare_splits(cfg: ExperimentConfig, datasets=None) -> DomainSplits:
    """Standardize with source statistics and split both domains train/test."""
    src, tgt = datasets if datasets is not None else make_domains(cfg)
    std = Standardizer.fit(src.points)
    src, tgt = std(src), std(tgt)
    rng = Rng(cfg.seed).child("split")
    s_tr, s_te = train_test_split(src, cfg.test_fraction, rng.child("source"))
    t_tr, t_te = train_test_split(tgt, cfg.test_fraction, rng.child("target"))
    return DomainSplits(s_tr, s_te, t_tr, t_te)


def build_networks(cfg: ExperimentConfig, input_dim: int, n_classes: int) -> tuple[FeatureExtractor, Classifier]:
    rng = Rng(cfg.seed).child("init")
    fe = FeatureExtractor(input_dim, cfg.feature_dim, rng.child("extractor"), cfg.fe_hidden, cfg.fe_depth)
    clf = Classifier(cfg.feature_dim, n_classes, rng.child("classifier"), cfg.cls_hidden, cfg.cls_depth)
    return fe, clf


def build_dad(cfg: ExperimentConfig, feature_dim: int) -> DadModule:
    sched = make_linear_schedule(cfg.K, cfg.beta_1, cfg.beta_K)
    return DadModule.create(feature_dim, sched, Rng(cfg.seed).child("init").child("dad"), cfg.np_hidden,
                            cfg.np_depth, cfg.embed_dim, cfg.truncation)


def extract(fe: Mlp, d: LabeledDataset, tag) -> FeatureBatch:
    with nx.no_grad():
        feats = fe(Tensor(d.points))
    return FeatureBatch(feats, d.labels if tag.kind != "target" else None, tag)


@dataclass
class AdaptationReport:
    preset: str
    config: dict
    seed: int
    records: list[dict]
    source_accuracy: float
    target_accuracy: float
    baseline_source_accuracy: float
    baseline_target_accuracy: float
    mmd_profile: list[tuple[int, float]]
    mmd_source_target: Optional[float]
    mmd_transitional_target: Optional[float]
    checksums_ok: bool
    config_diff: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "preset": self.preset,
            "seed": self.seed,
            "config": self.config,
            "config_diff": {k: list(v) for k, v in self.config_diff.items()},
            "final": {
                "source_accuracy": self.source_accuracy,
                "target_accuracy": self.target_accuracy,
                "baseline_source_accuracy": self.baseline_source_accuracy,
                "baseline_target_accuracy": self.baseline_target_accuracy,
            },
            "mmd": {
                "profile": [[k, v] for k, v in self.mmd_profile],
                "source_target": self.mmd_source_target,
                "transitional_target": self.mmd_transitional_target,
            },
            "checksums_ok": self.checksums_ok,
            "records": self.records,
        }
        if include_timing:
            out["wall_clock_seconds"] = self.wall_clock_seconds
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"


@dataclass
class TrainedRun:
    """Everything a finished run leaves behind, for checkpointing and export."""

    report: AdaptationReport
    extractor: Mlp
    classifier: Mlp
    dad: Optional[DadModule]
    splits: DomainSplits
    source_trace: list[float] = field(default_factory=list)
    pretrain_trace: list[float] = field(default_factory=list)


class _Guard:
    """Checksum bookkeeping for frozen / out-of-phase parameter sets."""

    def __init__(self):
        self.ok = True

    def check(self, before: dict[str, str], after: dict[str, str], phase: str, k: int) -> None:
        changed = [name for name in before if before[name] != after[name]]
        if changed:
            self.ok = False
            raise InvariantViolation(f"{phase} at k={k} modified {', '.join(changed)}")


def _sums(**models) -> dict[str, str]:
    return {name: m.checksum() for name, m in models.items()}


def run_experiment(cfg: ExperimentConfig, datasets=None, preset: str = "full") -> TrainedRun:
    """Source training, optional DAD pretraining and the configured adaptation loop."""
    start = time.perf_counter()
    rng = Rng(cfg.seed)
    splits = prepare_splits(cfg, datasets)
    n_classes = splits.n_classes
    fe, clf = build_networks(cfg, splits.source_train.input_dim, n_classes)
    source_trace = train_source(fe, clf, splits.source_train, cfg.epochs_source, cfg.opt("source"),
                                rng.child("source_training"), cfg.batch_size, cfg.extractor_lr_scale)
    base_src = accuracy(clf, fe, splits.source_test)
    base_tgt = accuracy(clf, fe, splits.target_test)

    def report(records, src_acc, tgt_acc, profile, mmd_st, mmd_dt, ok) -> AdaptationReport:
        return AdaptationReport(preset, as_dict(cfg), cfg.seed, records, src_acc, tgt_acc, base_src, base_tgt,
                                profile, mmd_st, mmd_dt, ok, wall_clock_seconds=time.perf_counter() - start)

    if cfg.K == 0:
        rep = report([], base_src, base_tgt, [], None, None, True)
        return TrainedRun(rep, fe, clf, None, splits, source_trace)

    if cfg.split_layer is not None:
        head, model = split_extractor(fe, clf, cfg.split_layer)
    else:
        head, model = fe, clf

    fs_train = extract(head, splits.source_train, SOURCE_TAG)
    ft_train = extract(head, splits.target_train, TARGET_TAG)
    fs_test = extract(head, splits.source_test, SOURCE_TAG)
    ft_test = extract(head, splits.target_test, TARGET_TAG)

    dad = build_dad(cfg, fs_train.features.shape[1])
    dad.fit_frame(fs_train, ft_train)
    src_batches = minibatches(fs_train, cfg.batch_size, rng.child("source_batches"))
    tgt_batches = minibatches(ft_train, cfg.batch_size, rng.child("target_batches"))

    pretrain_trace: list[float] = []
    if cfg.initial_training_on and cfg.steps_dad_pretrain:
        pretrain_trace = pretrain_target_reverse(dad, tgt_batches, cfg.steps_dad_pretrain, cfg.opt("dad"),
                                                 rng.child("dad_pretrain"))

    buffer = ReplayBuffer(cfg.replay_capacity, rng.child("reservoir"))
    seed_batches = minibatches(fs_train, cfg.batch_size, rng.child("replay_source"))
    for _ in range(cfg.replay_capacity):
        buffer.insert(0, next(seed_batches))
    state = MlsState(0, model, snapshot(model), dad, buffer, head)
    records = _adapt(cfg, state, src_batches, tgt_batches, fs_train, splits, rng)

    dad.freeze()
    src_acc = accuracy(model, head, splits.source_test)
    tgt_acc = accuracy(model, head, splits.target_test)
    bw = MmdConfig(median_bandwidth(fs_test.features.data, ft_test.features.data))
    profile = dad_distance_profile(dad, fs_test, ft_test, profile_steps(cfg.K, cfg.profile_points),
                                   rng.child("profile"), bw)
    mmd_st = rbf_mmd2(fs_test.features.data, ft_test.features.data, bw)
    with nx.no_grad():
        f_dk = simulate_transitional(dad, fs_test, cfg.K, rng.child("endpoint"))
    mmd_dt = rbf_mmd2(f_dk.features.data, ft_test.features.data, bw)
    ok = all(rec["checksums_ok"] for rec in records)
    rep = report(records, src_acc, tgt_acc, profile, mmd_st, mmd_dt, ok)
    return TrainedRun(rep, head, model, dad, splits, source_trace, pretrain_trace)


def _adapt(cfg: ExperimentConfig, state: MlsState, src_batches, tgt_batches, fs_train: FeatureBatch,
           splits: DomainSplits, rng: Rng) -> list[dict]:
    """Alternating C->D / D->C loop over the visited steps, per the ablation switches."""
    ks = cfg.visited_steps()
    direct = cfg.transition == "direct"
    do_c2d = cfg.mls_on and not cfg.d_to_c_only
    do_d2c = not cfg.c_to_d_only
    lpd = cfg.lpd_on and cfg.mls_on
    total = len(ks) * cfg.r
    dad_opt = PolySgd(state.dad.parameters(), cfg.opt("dad_adapt"), total)
    cls_opt = PolySgd(state.classifier.parameters(), cfg.opt("classifier"), total)
    probe = fs_train.take(np.arange(min(cfg.probe_size, len(fs_train))))
    guard = _Guard()
    records = []
    for block, k_visit in enumerate(ks):
        k = cfg.K if direct else k_visit
        state.k = k
        rec: dict = {"block": block, "k": k}
        step_rng = rng.child("adapt").child(block)
        rec["snapshot_checksum"] = state.classifier_snapshot.checksum()
        if do_c2d:
            state.dad.unfreeze()
            before = _sums(snapshot=state.classifier_snapshot, classifier=state.classifier,
                           extractor=state.extractor)
            probe_rng = Rng(cfg.seed).child("probe").child(block)
            rec["probe_ce_before"] = probe_ce(state, probe, k, probe_rng.child("draw"))
            dad_opt.state.velocity = []  # each phase faces a new snapshot; stale momentum overshoots
            trace = c_to_d_phase(state, src_batches, tgt_batches, cfg.r, dad_opt, step_rng.child("c2d"),
                                 cfg.cd_ce_weight)
            rec["probe_ce_after"] = probe_ce(state, probe, k, probe_rng.child("draw"))
            rec["c_to_d_loss"] = float(np.mean(trace))
            guard.check(before, _sums(snapshot=state.classifier_snapshot, classifier=state.classifier,
                                      extractor=state.extractor), "C->D", k)
        state.dad.freeze()
        if do_d2c:
            before = _sums(dad=state.dad, snapshot=state.classifier_snapshot, extractor=state.extractor)
            trace = d_to_c_phase(state, src_batches, cfg.r, cfg.m_replay, cls_opt, step_rng.child("d2c"),
                                 lpd=lpd, insert=not direct, regenerate=cfg.replay_mode == "regenerate")
            rec["d_to_c_loss"] = float(np.mean(trace))
            guard.check(before, _sums(dad=state.dad, snapshot=state.classifier_snapshot,
                                      extractor=state.extractor), "D->C", k)
            state.classifier_snapshot = snapshot(state.classifier)
        else:
            # C->D only: bank transitional batches for the final classifier fit.
            gen_rng = step_rng.child("bank")
            with nx.no_grad():
                for _ in range(cfg.r):
                    state.buffer.insert(k, simulate_transitional(state.dad, next(src_batches), k, gen_rng))
        rec["classifier_checksum"] = state.classifier.checksum()
        rec["source_accuracy"] = accuracy(state.classifier, state.extractor, splits.source_test)
        rec["target_accuracy"] = accuracy(state.classifier, state.extractor, splits.target_test)
        rec["checksums_ok"] = guard.ok
        records.append(rec)
    if not do_d2c:
        _fit_on_bank(cfg, state, cls_opt, total, rng.child("bank_fit"))
        if records:
            records[-1]["classifier_checksum"] = state.classifier.checksum()
            records[-1]["source_accuracy"] = accuracy(state.classifier, state.extractor, splits.source_test)
            records[-1]["target_accuracy"] = accuracy(state.classifier, state.extractor, splits.target_test)
    return records


def _fit_on_bank(cfg: ExperimentConfig, state: MlsState, optimizer: PolySgd, iters: int, rng: Rng) -> None:
    """Classifier fit on every banked distribution, one uniformly chosen store per step."""
    idx = state.buffer.indices()
    before = _sums(dad=state.dad, extractor=state.extractor)
    for _ in range(iters):
        optimizer.zero_grad()
        i = idx[int(rng.integers(0, len(idx)))]
        loss = _ce(state.classifier, state.buffer.sample(i, rng))
        loss.backward()
        optimizer.step()
    _Guard().check(before, _sums(dad=state.dad, extractor=state.extractor), "bank fit", state.k)


def run_mls(cfg: ExperimentConfig, datasets=None, preset: str = "full") -> AdaptationReport:
    return run_experiment(cfg, datasets, preset).report


def run_direct_transition(cfg: ExperimentConfig, datasets=None) -> AdaptationReport:
    """Ablation: every block diffuses and reverses the full K steps; replay only sees the source."""
    return run_experiment(cfg.replace(transition="direct"), datasets, preset="direct").report
