"""Acceptance criteria on the desk configuration.

Each test prints one PASS/FAIL line with the measured value and its threshold.
Expensive training runs are cached for the session and shared between
criteria.  Run directly with ``python -m tests.test_acceptance`` for the same
lines without pytest.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import cache

import numpy as np
import pytest

from dadmls.checks import CheckResult, diffusion_suite, gradient_suite
from dadmls.cli import default_export_steps, export_features
from dadmls.config import apply_preset, parse_config
from dadmls.mls import run_experiment

try:
    from .conftest import DESK_CFG
except ImportError:  # script mode
    from conftest import DESK_CFG

SEEDS = range(5)
PROBE_SEEDS = range(3)
MLS_PRESETS = ("full", "direct", "ablation-no-mls", "ablation-c2d-only", "ablation-d2c-only")


@dataclass(frozen=True)
class Outcome:
    report_json: str
    features_csv: str
    target_accuracy: float
    baseline_target_accuracy: float
    mmd_source_target: float
    mmd_transitional_target: float
    profile: tuple[float, ...]
    records: tuple[dict, ...]
    checksums_ok: bool
    seconds: float


def desk_config(preset: str, seed: int):
    base = parse_config(DESK_CFG.read_text(encoding="utf-8")).replace(seed=seed)
    return apply_preset(base, preset)


def _execute(preset: str, seed: int) -> Outcome:
    cfg = desk_config(preset, seed)
    start = time.perf_counter()
    run = run_experiment(cfg, preset=preset)
    seconds = time.perf_counter() - start
    rep = run.report
    features = export_features(run.extractor, run.dad, run.splits, default_export_steps(cfg.K), cfg.seed)
    return Outcome(rep.to_json(), features, rep.target_accuracy, rep.baseline_target_accuracy,
                   rep.mmd_source_target, rep.mmd_transitional_target, tuple(v for _, v in rep.mmd_profile),
                   tuple(rep.records), rep.checksums_ok, seconds)


@cache
def outcome(preset: str, seed: int) -> Outcome:
    return _execute(preset, seed)


def _mean_acc(preset: str) -> float:
    return float(np.mean([outcome(preset, s).target_accuracy for s in SEEDS]))


# --- criteria -------------------------------------------------------------------------------


def criterion_1() -> CheckResult:
    start = time.perf_counter()
    results = gradient_suite(range(10))
    elapsed = time.perf_counter() - start
    worst = max(r.value for r in results)
    ok = all(r.passed for r in results) and elapsed < 60
    return CheckResult("1 gradient fidelity (max rel err, 10 seeds)", ok, worst, 1e-4,
                       f"{len(results)} ops/models, {elapsed:.1f}s of 60s")


def criterion_2() -> CheckResult:
    start = time.perf_counter()
    results = diffusion_suite(K=600, beta_1=1e-4, beta_K=0.02, trials=10_000, seed=0)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 120
    detail = f"{len(results) - len(failed)}/{len(results)} sub-checks, {elapsed:.1f}s of 120s"
    return CheckResult("2 diffusion correctness (failed sub-checks)", ok, len(failed), 0, detail)


def criterion_3() -> CheckResult:
    gains = [outcome("full", s).target_accuracy - outcome("full", s).baseline_target_accuracy for s in SEEDS]
    seconds = sum(outcome("full", s).seconds for s in SEEDS)
    gain = float(np.mean(gains))
    return CheckResult("3 adaptation gain (mean target acc points over baseline)", gain >= 0.10 and seconds < 600,
                       gain, 0.10, f"per seed {np.round(gains, 3).tolist()}, {seconds:.0f}s of 600s")


def criterion_4() -> CheckResult:
    wins = sum(outcome("full", s).target_accuracy >= outcome("direct", s).target_accuracy for s in SEEDS)
    pairs = [(round(outcome("full", s).target_accuracy, 3), round(outcome("direct", s).target_accuracy, 3))
             for s in SEEDS]
    return CheckResult("4 multi-step >= direct (paired seeds won)", wins >= 4, wins, 4, f"(full, direct) {pairs}")


def criterion_5() -> CheckResult:
    full, no_mls = _mean_acc("full"), _mean_acc("ablation-no-mls")
    return CheckResult("5 full >= no-MLS (mean target acc margin)", full >= no_mls, full - no_mls, 0.0,
                       f"full {full:.4f}, no-mls {no_mls:.4f}")


def criterion_6() -> CheckResult:
    full, c2d, d2c = _mean_acc("full"), _mean_acc("ablation-c2d-only"), _mean_acc("ablation-d2c-only")
    margin = min(full - c2d, full - d2c)
    return CheckResult("6 full >= each single direction (min margin)", margin >= 0, margin, 0.0,
                       f"full {full:.4f}, c2d-only {c2d:.4f}, d2c-only {d2c:.4f}")


def criterion_7() -> CheckResult:
    closer = sum(outcome("full", s).mmd_transitional_target < outcome("full", s).mmd_source_target for s in SEEDS)
    smooth = []
    for s in SEEDS:
        prof = np.array(outcome("full", s).profile)
        smooth.append(bool(np.abs(np.diff(prof)).max() < abs(prof[-1] - prof[0])))
    ok = closer >= 4 and all(smooth)
    return CheckResult("7 distribution transition (seeds with MMD(D_K,T) < MMD(S,T))", ok, closer, 4,
                       f"no giant adjacent jump in {sum(smooth)}/{len(smooth)} profiles")


def criterion_8() -> CheckResult:
    held = total = 0
    for s in PROBE_SEEDS:
        for rec in outcome("full", s).records:
            total += 1
            held += rec["probe_ce_after"] <= rec["probe_ce_before"]
    frac = held / total
    return CheckResult("8 semantic preservation (fraction of C->D phases)", frac >= 0.8, frac, 0.8,
                       f"{held}/{total} over {len(PROBE_SEEDS)} seeds")


def criterion_9() -> CheckResult:
    runs = [(p, s) for p in MLS_PRESETS for s in SEEDS]
    bad = [f"{p}/{s}" for p, s in runs if not outcome(p, s).checksums_ok]
    return CheckResult("9 checksum guards (failing runs)", not bad, len(bad), 0, f"{len(runs)} runs checked {bad}")


def criterion_10() -> CheckResult:
    first = outcome("full", 0)
    again = _execute("full", 0)
    same_report = first.report_json == again.report_json
    same_features = first.features_csv == again.features_csv
    return CheckResult("10 determinism (mismatching artifacts)", same_report and same_features,
                       int(not same_report) + int(not same_features), 0, "report.json and features.csv")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10]


@pytest.mark.acceptance
@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, len(CRITERIA) + 1)])
def test_acceptance(criterion, capsys):
    result = criterion()
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.line()


if __name__ == "__main__":
    import sys

    from dadmls.perf import tune_allocator

    tune_allocator()
    passed = True
    for criterion in CRITERIA:
        result = criterion()
        print(result.line(), flush=True)
        passed &= result.passed
    sys.exit(0 if passed else 1)
