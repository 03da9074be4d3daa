"""Experiment configuration: a flat ``key=value`` document with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Union

from .numerics import OptSettings


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


AUTO = "auto"
FULL = "full"
INHERIT = "inherit"

IntOrAuto = Union[int, str]
FloatOrInherit = Union[float, str]


@dataclass(frozen=True)
class ExperimentConfig:
    # diffusion / MLS
    K: int = 600
    r: int = 20
    beta_1: float = 1e-4
    beta_K: float = 0.02
    k_stride: IntOrAuto = AUTO
    m_replay: int = 2
    replay_capacity: int = 4
    replay_mode: str = "cache"
    truncate_reverse_grad: IntOrAuto = AUTO
    transition: str = "multi"
    cd_ce_weight: float = 1.0
    # optimisation
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.05
    poly_power: float = 0.9
    lr_source: FloatOrInherit = INHERIT
    lr_dad: FloatOrInherit = INHERIT
    lr_classifier: FloatOrInherit = INHERIT
    lr_dad_adapt: FloatOrInherit = INHERIT
    extractor_lr_scale: float = 1.0
    batch_size: int = 24
    epochs_source: int = 200
    steps_dad_pretrain: int = 2000
    # model widths
    feature_dim: int = 16
    fe_hidden: int = 64
    fe_depth: int = 2
    cls_hidden: int = 64
    cls_depth: int = 2
    np_hidden: int = 128
    np_depth: int = 3
    embed_dim: int = 32
    dad_after_layer: IntOrAuto = FULL
    # data
    dataset: str = "two_moons"
    n_per_domain: int = 2000
    noise_std: float = 0.08
    rotation_deg: float = 50.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    scale: float = 1.0
    n_classes: int = 3
    mean_shift: float = 2.0
    test_fraction: float = 0.2
    seed: int = 0
    # instrumentation
    probe_size: int = 128
    profile_points: int = 20
    # ablation switches
    mls_on: bool = True
    initial_training_on: bool = True
    lpd_on: bool = True
    c_to_d_only: bool = False
    d_to_c_only: bool = False

    def __post_init__(self):
        validate(self)

    # -- resolved values --------------------------------------------------
    @property
    def stride(self) -> int:
        if self.k_stride == AUTO:
            return 1 if self.K <= 100 else max(self.K // 100, 1)
        return int(self.k_stride)

    @property
    def truncation(self) -> int | None:
        """Number of reverse steps kept in the graph; ``None`` for the full chain."""
        if self.truncate_reverse_grad == FULL:
            return None
        if self.truncate_reverse_grad == AUTO:
            return None if self.K <= 100 else 25
        return int(self.truncate_reverse_grad)

    @property
    def split_layer(self) -> int | None:
        return None if self.dad_after_layer == FULL else int(self.dad_after_layer)

    def visited_steps(self) -> list[int]:
        if self.K == 0:
            return []
        ks = list(range(self.stride, self.K + 1, self.stride))
        if ks[-1] != self.K:
            ks.append(self.K)
        return ks

    def opt(self, phase: str) -> OptSettings:
        lr = getattr(self, f"lr_{phase}")
        if lr == INHERIT and phase == "dad_adapt":
            return self.opt("dad")
        lr = self.lr if lr == INHERIT else float(lr)
        return OptSettings(lr, self.momentum, self.weight_decay, self.poly_power)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


_CHOICES = {
    "replay_mode": ("cache", "regenerate"),
    "transition": ("multi", "direct"),
    "dataset": ("two_moons", "gaussian_mixture"),
}


def validate(cfg: ExperimentConfig) -> None:
    def need(cond: bool, key: str, msg: str):
        if not cond:
            raise ConfigError(msg, key)

    need(cfg.K >= 0, "K", "K >= 0 violated")
    need(cfg.r >= 1, "r", "r >= 1 violated")
    need(0 < cfg.beta_1 < 1, "beta_1", "0 < beta_1 < 1 violated")
    need(0 < cfg.beta_K < 1, "beta_K", "0 < beta_K < 1 violated")
    need(cfg.beta_1 <= cfg.beta_K, "beta_1", "beta_1 <= beta_K violated")
    if cfg.k_stride != AUTO:
        need(1 <= int(cfg.k_stride) <= max(cfg.K, 1), "k_stride", "1 <= k_stride <= max(K, 1) violated")
    need(cfg.m_replay >= 1, "m_replay", "m_replay >= 1 violated")
    need(cfg.replay_capacity >= 1, "replay_capacity", "replay_capacity >= 1 violated")
    if cfg.truncate_reverse_grad not in (AUTO, FULL):
        need(int(cfg.truncate_reverse_grad) >= 1, "truncate_reverse_grad", "truncation must be >= 1")
    for key, options in _CHOICES.items():
        need(getattr(cfg, key) in options, key, f"must be one of {', '.join(options)}")
    need(cfg.cd_ce_weight >= 0, "cd_ce_weight", "cd_ce_weight >= 0 violated")
    need(cfg.lr > 0, "lr", "lr > 0 violated")
    for key in ("lr_source", "lr_dad", "lr_classifier", "lr_dad_adapt"):
        v = getattr(cfg, key)
        need(v == INHERIT or float(v) > 0, key, f"{key} > 0 violated")
    need(cfg.extractor_lr_scale >= 0, "extractor_lr_scale", "extractor_lr_scale >= 0 violated")
    need(0 <= cfg.momentum < 1, "momentum", "0 <= momentum < 1 violated")
    need(cfg.weight_decay >= 0, "weight_decay", "weight_decay >= 0 violated")
    need(cfg.poly_power >= 0, "poly_power", "poly_power >= 0 violated")
    for key in ("batch_size", "feature_dim", "fe_hidden", "cls_hidden", "np_hidden", "fe_depth", "cls_depth",
                "np_depth", "probe_size", "profile_points"):
        need(getattr(cfg, key) >= 1, key, f"{key} >= 1 violated")
    need(cfg.embed_dim >= 2 and cfg.embed_dim % 2 == 0, "embed_dim", "embed_dim must be even and >= 2")
    need(cfg.epochs_source >= 0, "epochs_source", "epochs_source >= 0 violated")
    need(cfg.steps_dad_pretrain >= 0, "steps_dad_pretrain", "steps_dad_pretrain >= 0 violated")
    if cfg.dad_after_layer != FULL:
        need(1 <= int(cfg.dad_after_layer) <= cfg.fe_depth, "dad_after_layer",
             "dad_after_layer must be 'full' or in [1, fe_depth]")
    need(cfg.n_per_domain >= 10, "n_per_domain", "n_per_domain >= 10 violated")
    need(cfg.noise_std >= 0, "noise_std", "noise_std >= 0 violated")
    need(cfg.scale > 0, "scale", "scale > 0 violated")
    need(cfg.n_classes >= 2, "n_classes", "n_classes >= 2 violated")
    need(0 < cfg.test_fraction < 1, "test_fraction", "0 < test_fraction < 1 violated")
    need(0 <= cfg.seed < 2**64, "seed", "seed must fit in 64 unsigned bits")
    need(not (cfg.c_to_d_only and cfg.d_to_c_only), "c_to_d_only", "c_to_d_only and d_to_c_only are exclusive")


_SPECIAL = {
    "k_stride": (AUTO,),
    "truncate_reverse_grad": (AUTO, FULL),
    "dad_after_layer": (FULL,),
    "lr_source": (INHERIT,),
    "lr_dad": (INHERIT,),
    "lr_classifier": (INHERIT,),
    "lr_dad_adapt": (INHERIT,),
}


def _convert(key: str, kind, raw: str):
    if raw in _SPECIAL.get(key, ()):
        return raw
    if kind in (int, IntOrAuto):
        try:
            return int(raw)
        except ValueError:
            pass
    elif kind in (float, FloatOrInherit):
        try:
            return float(raw)
        except ValueError:
            pass
    elif kind is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
    elif kind is str:
        return raw
    extra = _SPECIAL.get(key, ())
    expected = {int: "integer", IntOrAuto: "integer", float: "real", FloatOrInherit: "real", bool: "boolean"}[kind]
    raise ValueError(f"expected {expected}{' or ' + '/'.join(extra) if extra else ''}, got {raw!r}")


def _field_kinds() -> dict[str, object]:
    hints = {"int": int, "float": float, "bool": bool, "str": str,
             "IntOrAuto": IntOrAuto, "FloatOrInherit": FloatOrInherit}
    return {f.name: hints[f.type] for f in fields(ExperimentConfig)}


def parse_config(text: str) -> ExperimentConfig:
    kinds = _field_kinds()
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", line=lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError("unknown key", key, lineno)
        if key in values:
            raise ConfigError("duplicate key", key, lineno)
        try:
            values[key] = _convert(key, kinds[key], raw)
        except ValueError as exc:
            raise ConfigError(str(exc), key, lineno) from None
        lines[key] = lineno
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], exc.key, lines.get(exc.key)) from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def as_dict(cfg: ExperimentConfig) -> dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def diff(a: ExperimentConfig, b: ExperimentConfig) -> dict[str, tuple[object, object]]:
    return {f.name: (getattr(a, f.name), getattr(b, f.name))
            for f in fields(a) if getattr(a, f.name) != getattr(b, f.name)}


PRESETS: dict[str, dict[str, object]] = {
    "baseline": {"K": 0},
    "full": {},
    "direct": {"transition": "direct"},
    "ablation-no-mls": {"mls_on": False},
    "ablation-direct-no-mls": {"transition": "direct", "mls_on": False},
    "ablation-c2d-only": {"c_to_d_only": True},
    "ablation-d2c-only": {"d_to_c_only": True},
    "ablation-no-it": {"initial_training_on": False},
    "ablation-no-lpd": {"lpd_on": False},
    "ablation-placement": {"dad_after_layer": 1},
}


def apply_preset(cfg: ExperimentConfig, preset: str) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    changes = dict(PRESETS[preset])
    if changes.get("K") == 0 and cfg.k_stride != AUTO:
        changes["k_stride"] = AUTO
    return cfg.replace(**changes)
