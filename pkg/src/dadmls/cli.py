"""Command-line runner: ``run``, ``export-features``, ``eval``, ``grad-check``, ``selftest``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure, 3 a
property check failed in ``grad-check`` / ``selftest``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checks import diffusion_suite, gradient_suite
from .config import PRESETS, ConfigError, ExperimentConfig, apply_preset, diff, parse_config, serialize_config
from .dad import DadModule, simulate_transitional
from .metrics import accuracy
from .mls import TrainedRun, build_dad, build_networks, extract, prepare_splits, run_experiment
from .models import SOURCE_TAG, TARGET_TAG, Mlp, load_checkpoint, prefixed, save_checkpoint, section, split_extractor
from .numerics import Rng
from .perf import tune_allocator

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PROPERTY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is reserved for runtime failures
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- config handling ------------------------------------------------------------------


def load_config(path: str | None, overrides: list[str] = ()) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    cfg = parse_config(text)
    if not overrides:
        return cfg
    merged = dict(line.split("=", 1) for line in serialize_config(cfg).splitlines())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in merged:
            raise ConfigError("unknown key", key)
        merged[key] = value
    return parse_config("".join(f"{k}={v}\n" for k, v in merged.items()))


# --- checkpoints ------------------------------------------------------------------------


def checkpoint_params(run: TrainedRun) -> dict[str, np.ndarray]:
    params = {**prefixed("extractor", run.extractor), **prefixed("classifier", run.classifier)}
    if run.dad is not None:
        params.update({f"dad.{k}": v for k, v in run.dad.state_dict().items()})
    return params


def restore(cfg: ExperimentConfig, params: dict[str, np.ndarray], need_dad: bool = True):
    """Rebuild ``(extractor, classifier, dad, splits)`` from a config and checkpoint table."""
    splits = prepare_splits(cfg)
    fe, clf = build_networks(cfg, splits.source_train.input_dim, splits.n_classes)
    if cfg.K > 0 and cfg.split_layer is not None:
        fe, clf = split_extractor(fe, clf, cfg.split_layer)
    try:
        fe.load_state_dict(section(params, "extractor"))
        clf.load_state_dict(section(params, "classifier"))
        dad = None
        if need_dad:
            if cfg.K == 0:
                raise KeyError("a K=0 run has no DAD module")
            dad = build_dad(cfg, fe.out_dim)
            dad.load_state_dict(section(params, "dad"))
    except KeyError as exc:
        raise RuntimeError(f"checkpoint: {exc.args[0]}") from None
    fe.freeze()
    clf.freeze()
    if dad is not None:
        dad.freeze()
    return fe, clf, dad, splits


# --- feature export -----------------------------------------------------------------


def export_features(fe: Mlp, dad: DadModule | None, splits, ks: list[int], seed: int) -> str:
    """Source rows, one block per transitional k, then target rows (held-out splits)."""
    fs = extract(fe, splits.source_test, SOURCE_TAG)
    ft = extract(fe, splits.target_test, TARGET_TAG)
    width = fs.features.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"f{i}" for i in range(width)] + ["label", "domain_tag"])

    def emit(k, feats: np.ndarray, labels: np.ndarray, tag: str):
        for row, y in zip(feats, labels):
            w.writerow([k] + [repr(float(v)) for v in row] + [int(y), tag])

    emit(0, fs.features.data, fs.labels, str(SOURCE_TAG))
    if ks and dad is None:
        raise RuntimeError("transitional export needs a DAD module")
    with nx.no_grad():
        for k in ks:
            sim = simulate_transitional(dad, fs, k, Rng(seed).child("export").child(k))
            emit(k, sim.features.data, sim.labels, str(sim.domain_tag))
    emit("", ft.features.data, splits.target_test.labels, str(TARGET_TAG))
    return buf.getvalue()


def default_export_steps(K: int) -> list[int]:
    return sorted({max(1, round(K * q / 4)) for q in range(1, 5)}) if K else []


def parse_steps(text: str | None, K: int) -> list[int]:
    if text is None:
        return default_export_steps(K)
    text = text.strip()
    if not text:
        return []
    try:
        ks = [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"steps must be comma-separated integers, got {text!r}") from None
    bad = [k for k in ks if not 1 <= k <= K]
    if bad:
        raise UsageError(f"steps {bad} outside [1, {K}]")
    return ks


# --- verbs ------------------------------------------------------------------------------


def _records_csv(records: list[dict]) -> str:
    cols = ["block", "k", "c_to_d_loss", "d_to_c_loss", "probe_ce_before", "probe_ce_after",
            "source_accuracy", "target_accuracy", "checksums_ok"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in records:
        w.writerow(["" if rec.get(c) is None else rec[c] for c in cols])
    return buf.getvalue()


def cmd_run(args) -> int:
    base = load_config(args.config, args.set)
    cfg = apply_preset(base, args.preset)
    ks = parse_steps(args.steps, cfg.K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        run = run_experiment(cfg, preset=args.preset)
        run.report.config_diff = diff(base, cfg)
        files = {
            "report.json": run.report.to_json(),
            "records.csv": _records_csv(run.report.records),
            "config.txt": serialize_config(cfg),
            "timing.json": json.dumps({"wall_clock_seconds": run.report.wall_clock_seconds}) + "\n",
            "features.csv": export_features(run.extractor, run.dad, run.splits, ks, cfg.seed),
        }
        for name, text in files.items():
            (staging / name).write_text(text, encoding="utf-8")
        save_checkpoint(staging / "checkpoint.bin", checkpoint_params(run))
        for item in staging.iterdir():
            item.replace(out / item.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    rep = run.report
    print(f"{args.preset}: source {rep.source_accuracy:.4f}  target {rep.target_accuracy:.4f}  "
          f"baseline target {rep.baseline_target_accuracy:.4f}  -> {out}")
    return EXIT_OK if rep.checksums_ok else EXIT_RUNTIME


def cmd_export_features(args) -> int:
    cfg = load_config(args.config, args.set)
    ks = parse_steps(args.steps, cfg.K)
    params = load_checkpoint(args.checkpoint)
    fe, _, dad, splits = restore(cfg, params, need_dad=bool(ks))
    text = export_features(fe, dad, splits, ks, cfg.seed)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    try:
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(out)
    finally:
        tmp.unlink(missing_ok=True)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    fe, clf, _, splits = restore(cfg, load_checkpoint(args.checkpoint), need_dad=False)
    result = {"source_accuracy": accuracy(clf, fe, splits.source_test),
              "target_accuracy": accuracy(clf, fe, splits.target_test)}
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _report(results) -> int:
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_PROPERTY if failed else EXIT_OK


def cmd_grad_check(args) -> int:
    return _report(gradient_suite(range(args.seeds)))


def cmd_selftest(args) -> int:
    return _report(diffusion_suite(K=args.K, trials=args.trials, seed=args.seed))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dadmls", description="Domain-adaptive diffusion with mutual learning, desk scale.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file (defaults when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    r = sub.add_parser("run", help="train and adapt one preset")
    r.add_argument("--preset", default="full", choices=sorted(PRESETS))
    with_config(r)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--steps", help="transitional steps to export (comma list; default K/4, K/2, 3K/4, K)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("export-features", help="dump source, transitional and target features")
    e.add_argument("--checkpoint", required=True)
    with_config(e)
    e.add_argument("--steps", default="", help="comma list of k; empty exports source and target only")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_features)

    v = sub.add_parser("eval", help="accuracy of a checkpoint on the held-out splits")
    v.add_argument("--checkpoint", required=True)
    with_config(v)
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference check of every op and model")
    g.add_argument("--seeds", type=int, default=10)
    g.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("selftest", help="diffusion Monte-Carlo properties")
    s.add_argument("--K", type=int, default=50)
    s.add_argument("--trials", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    tune_allocator()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"dadmls: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        print(f"dadmls: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
