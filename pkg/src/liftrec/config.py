"""Pipeline configuration: one JSON document, validated field by field.

Every section maps onto a dataclass. Unknown keys, wrong types and values
outside their allowed range raise :class:`ConfigError` carrying the dotted
path of the offending field (for example ``predictor.lr``).
"""

from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class DataSection:
    path: str | None = None  # CSV input; synthetic data is generated when absent
    synth: dict = field(default_factory=dict)  # SynthConfig overrides


@dataclass
class EncoderSection:
    w: int = 16
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    mask_ratio: float = 0.5
    variant: str = "causal_transformer"
    ffn_mult: int = 2


@dataclass
class PretrainSection:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3


@dataclass
class PredictorSection:
    ablation_mode: str = "FULL"
    interaction_fn: str = "inner_product"
    mlp_hidden: list = field(default_factory=lambda: [64, 32])
    lr: float = 1e-3
    weight_decay: float = 0.1
    batch_size: int = 256
    epochs: int = 40
    w: int = 8
    patience: int | None = 5
    raw_embeddings: bool = False
    val_fraction: float = 0.2


@dataclass
class EvalSection:
    n_negatives: int = 100
    topn: list = field(default_factory=lambda: [1, 5, 10])
    max_queries: int = 200
    timing_queries: int = 50


@dataclass
class SweepSection:
    mask_rates: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    Ks: list = field(default_factory=lambda: [1, 5, 10, 15])
    Ls: list = field(default_factory=lambda: [4, 8, 16])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    fractions: list = field(default_factory=lambda: [0.7, 0.15, 0.15])
    L: int = 4
    K: int = 10
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def stage_view(self, stage: str) -> dict:
        """The config fields that can influence ``stage`` or any stage upstream of it."""
        d = self.to_dict()
        synth = {"seed": self.seed, **self.data.synth}
        view = {"data": {"path": self.data.path, "synth": synth if self.data.path is None else {}}}
        chain = STAGE_CHAIN.get(stage, ("split",))
        if "split" in chain:
            view["fractions"] = d["fractions"]
        if "pretrain" in chain:
            view.update(seed=self.seed, L=self.L, encoder=d["encoder"], pretrain=d["pretrain"])
        if "train" in chain:
            view.update(K=self.K, predictor=d["predictor"])
        if "eval" in chain:
            view["eval"] = d["eval"]
        return view

    def stage_hash(self, stage: str) -> str:
        text = json.dumps(self.stage_view(stage), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# stage -> the config-bearing stages it depends on, itself included
STAGE_CHAIN: dict[str, tuple[str, ...]] = {
    "synth": ("synth",),
    "split": ("synth", "split"),
    "pretrain": ("synth", "split", "pretrain"),
    "build-store": ("synth", "split", "pretrain"),
    "audit": ("synth", "split", "pretrain"),
    "train": ("synth", "split", "pretrain", "train"),
    "time": ("synth", "split", "pretrain", "train", "eval"),
    "eval": ("synth", "split", "pretrain", "train", "eval"),
}


# -- validation -----------------------------------------------------------------------

_CHECKS: dict[str, tuple] = {
    "L": (lambda v: v >= 1, "must be >= 1"),
    "K": (lambda v: v >= 1, "must be >= 1"),
    "seed": (lambda v: v >= 0, "must be >= 0"),
    "fractions": (
        lambda v: len(v) == 3 and all(isinstance(x, (int, float)) and x > 0 for x in v) and abs(sum(v) - 1) < 1e-6,
        "must be three positive numbers summing to 1",
    ),
    "encoder.w": (lambda v: v >= 1, "must be >= 1"),
    "encoder.d_model": (lambda v: v >= 1, "must be >= 1"),
    "encoder.n_layers": (lambda v: v >= 1, "must be >= 1"),
    "encoder.n_heads": (lambda v: v >= 1, "must be >= 1"),
    "encoder.mask_ratio": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "encoder.variant": (
        lambda v: v in ("causal_transformer", "recurrent", "bidirectional_transformer"),
        "must be causal_transformer, recurrent or bidirectional_transformer",
    ),
    "pretrain.epochs": (lambda v: v >= 0, "must be >= 0"),
    "pretrain.batch_size": (lambda v: v >= 1, "must be >= 1"),
    "pretrain.lr": (lambda v: v > 0, "must be > 0"),
    "predictor.ablation_mode": (
        lambda v: v in ("FULL", "HISTORY_ONLY", "FUTURE_ONLY", "NO_CONTEXT"),
        "must be FULL, HISTORY_ONLY, FUTURE_ONLY or NO_CONTEXT",
    ),
    "predictor.interaction_fn": (lambda v: v == "inner_product", "only inner_product is available"),
    "predictor.mlp_hidden": (lambda v: all(isinstance(x, int) and x >= 1 for x in v), "must list positive ints"),
    "predictor.lr": (lambda v: v > 0, "must be > 0"),
    "predictor.weight_decay": (lambda v: v >= 0, "must be >= 0"),
    "predictor.batch_size": (lambda v: v >= 1, "must be >= 1"),
    "predictor.epochs": (lambda v: v >= 1, "must be >= 1"),
    "predictor.w": (lambda v: v >= 1, "must be >= 1"),
    "predictor.patience": (lambda v: v is None or v >= 1, "must be >= 1 or null"),
    "predictor.val_fraction": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "eval.n_negatives": (lambda v: v >= 1, "must be >= 1"),
    "eval.topn": (lambda v: len(v) > 0 and all(isinstance(x, int) and x >= 1 for x in v), "must list positive ints"),
    "eval.max_queries": (lambda v: v >= 1, "must be >= 1"),
    "eval.timing_queries": (lambda v: v >= 10, "must be >= 10"),
    "sweep.mask_rates": (lambda v: len(v) > 0 and all(0 < x < 1 for x in v), "must list rates in (0, 1)"),
    "sweep.Ks": (lambda v: len(v) > 0 and all(isinstance(x, int) and x >= 1 for x in v), "must list ints >= 1"),
    "sweep.Ls": (lambda v: len(v) > 0 and all(isinstance(x, int) and x >= 2 for x in v), "must list ints >= 2"),
    "sweep.seeds": (lambda v: len(v) > 0 and all(isinstance(x, int) and x >= 0 for x in v), "must list seeds"),
}


def _type_ok(value: Any, hint: Any) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint in (list, dict, str):
        return isinstance(value, hint)
    return True


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown field")
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        fpath = f"{path}.{f.name}" if path else f.name
        hint = hints[f.name]
        value = raw[f.name]
        if is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, fpath)
            continue
        if not _type_ok(value, hint):
            raise ConfigError(f"{fpath}: expected {getattr(hint, '__name__', hint)}, got {value!r}")
        kwargs[f.name] = value
    obj = cls(**kwargs)
    for f in fields(cls):
        fpath = f"{path}.{f.name}" if path else f.name
        check = _CHECKS.get(fpath)
        if check is not None:
            value = getattr(obj, f.name)
            try:
                ok = check[0](value)
            except TypeError:
                ok = False
            if not ok:
                raise ConfigError(f"{fpath}: {check[1]} (got {value!r})")
    return obj


def config_from_dict(raw: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, raw, "")
    if cfg.encoder.d_model % cfg.encoder.n_heads:
        raise ConfigError("encoder.n_heads: must divide encoder.d_model")
    if cfg.data.synth:
        from .ingest import SynthConfig

        known = {f.name for f in fields(SynthConfig)}
        for key in cfg.data.synth:
            if key not in known:
                raise ConfigError(f"data.synth.{key}: unknown field")
        try:
            SynthConfig(**cfg.data.synth)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.synth: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)
