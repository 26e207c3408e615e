"""Ablation and sweep runners with a shared report format.

Reports serialise to JSON (``REPORT_VERSION`` marks the schema) and to an
aligned-column text table. Standard deviations are population values, so a
single seed reports 0.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..config import PipelineConfig
from ..domain import DatasetSplits
from ..ingest import Dataset
from ..pipeline import fit_and_score, predictor_config, prepare_splits, pretrain_encoder, split_dataset
from ..predictor import MODES
from ..retriever import build_datastore

logger = logging.getLogger(__name__)

REPORT_VERSION = 1


@dataclass
class ExperimentReport:
    name: str
    config: dict
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)  # one per (variant, seed)
    summary: dict = field(default_factory=dict)  # variant -> metric -> {mean, std}
    timings: dict = field(default_factory=dict)  # stage -> wall-clock seconds
    notes: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ValueError("an experiment report needs at least one seed")

    def summarise(self, key: str = "variant", metrics: Sequence[str] = ("auc", "logloss")) -> None:
        groups: dict = {}
        for row in self.rows:
            groups.setdefault(row[key], []).append(row)
        self.summary = {
            str(k): {
                m: {"mean": float(np.mean([r[m] for r in rs])), "std": float(np.std([r[m] for r in rs]))}
                for m in metrics
            }
            for k, rs in groups.items()
        }

    def mean(self, variant, metric: str = "auc") -> float:
        return self.summary[str(variant)][metric]["mean"]

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "version": self.version,
            "name": self.name,
            "config": self.config,
            "seeds": list(self.seeds),
            "rows": self.rows,
            "summary": self.summary,
            "notes": self.notes,
            "extra": self.extra,
        }
        if include_timings:
            out["timings"] = self.timings
        return out

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        return cls(
            name=d["name"], config=d["config"], seeds=d["seeds"], rows=d["rows"], summary=d["summary"],
            timings=d.get("timings", {}), notes=d.get("notes", []), extra=d.get("extra", {}), version=d["version"],
        )

    def to_text(self) -> str:
        header = ["variant"]
        metrics = sorted({m for s in self.summary.values() for m in s})
        for m in metrics:
            header += [f"{m}_mean", f"{m}_std"]
        body = []
        for variant, stats in self.summary.items():
            line = [variant]
            for m in metrics:
                line += [f"{stats[m]['mean']:.4f}", f"{stats[m]['std']:.4f}"]
            body.append(line)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        lines = [f"{self.name} (seeds {', '.join(map(str, self.seeds))})", fmt(header)]
        lines += [fmt(r) for r in body]
        for k, v in sorted(self.extra.items()):
            if not isinstance(v, (dict, list)):
                lines.append(f"{k}: {v}")
        if self.timings:
            lines.append("timings: " + ", ".join(f"{k} {v:.1f}s" for k, v in self.timings.items()))
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


class _Clock:
    def __init__(self, timings: dict):
        self.timings = timings

    def __call__(self, key: str):
        clock = self

        class _Span:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                clock.timings[key] = clock.timings.get(key, 0.0) + time.perf_counter() - self.t0

        return _Span()


def _splits(cfg: PipelineConfig, dataset: Dataset, splits: DatasetSplits | None) -> DatasetSplits:
    return split_dataset(cfg, dataset) if splits is None else splits


def run_ablation(
    dataset: Dataset,
    config: PipelineConfig,
    seeds: Sequence[int],
    modes: Sequence[str] = MODES,
    splits: DatasetSplits | None = None,
    random_encoder: bool = False,
) -> ExperimentReport:
    """Train every ablation mode on identical splits for each seed.

    Per seed one encoder is pretrained and one datastore built; all modes
    share them. With ``random_encoder`` an extra variant ``FULL_RANDOM_ENCODER``
    trains FULL mode against an untrained encoder from the same seed.
    """
    splits = _splits(config, dataset, splits)
    report = ExperimentReport("ablation", config.to_dict(), list(seeds))
    clock = _Clock(report.timings)
    pretrain_losses = {}
    for seed in seeds:
        encoders = {}
        with clock("pretrain"):
            enc, losses = pretrain_encoder(config, dataset, splits, seed)
        encoders["pretrained"] = enc
        pretrain_losses[str(seed)] = losses[-1] if losses else None
        if random_encoder:
            encoders["random"] = pretrain_encoder(config, dataset, splits, seed, train=False)[0]
        for kind, enc in encoders.items():
            with clock("datastore"):
                store = build_datastore(splits.retrieval, enc, config.L)
                prepared = prepare_splits(config, splits, enc, store, config.K, config.L)
            run_modes = modes if kind == "pretrained" else ("FULL",)
            for mode in run_modes:
                pc = predictor_config(config, mode=mode, seed=seed)
                with clock("train"):
                    result, a, ll = fit_and_score(pc, dataset.vocab_sizes, enc.config.v, prepared, store)
                variant = mode if kind == "pretrained" else "FULL_RANDOM_ENCODER"
                report.rows.append({"variant": variant, "seed": seed, "auc": a, "logloss": ll,
                                    "best_epoch": result.best_epoch})
                logger.info("ablation seed %d %s auc %.4f logloss %.4f", seed, variant, a, ll)
    report.summarise()
    report.extra["final_pretrain_loss"] = pretrain_losses
    return report


def mask_rate_sweep(
    dataset: Dataset,
    rates: Sequence[float],
    config: PipelineConfig,
    seed: int | None = None,
    splits: DatasetSplits | None = None,
) -> ExperimentReport:
    """Pretrain one encoder per mask rate (same seed) and record downstream AUC."""
    seed = config.seed if seed is None else seed
    unique = list(dict.fromkeys(float(r) for r in rates))
    report = ExperimentReport("mask_rate_sweep", config.to_dict(), [seed])
    if len(unique) < len(rates):
        msg = f"duplicate mask rates dropped: {list(rates)} -> {unique}"
        warnings.warn(msg, stacklevel=2)
        report.notes.append(msg)
    splits = _splits(config, dataset, splits)
    clock = _Clock(report.timings)
    for rate in unique:
        with clock("pretrain"):
            enc, losses = pretrain_encoder(config, dataset, splits, seed, mask_ratio=rate)
        with clock("datastore"):
            store = build_datastore(splits.retrieval, enc, config.L)
            prepared = prepare_splits(config, splits, enc, store, config.K, config.L)
        with clock("train"):
            _, a, ll = fit_and_score(predictor_config(config, seed=seed), dataset.vocab_sizes, enc.config.v, prepared, store)
        report.rows.append({"variant": f"{rate:g}", "rate": rate, "seed": seed, "auc": a, "logloss": ll,
                            "pretrain_loss": losses[-1] if losses else None})
    report.summarise()
    best = max(report.rows, key=lambda r: (r["auc"], -r["rate"]))
    report.extra["best_rate"] = best["rate"]
    return report


def sweep_kl(
    dataset: Dataset,
    Ks: Sequence[int],
    Ls: Sequence[int],
    config: PipelineConfig,
    seed: int | None = None,
    splits: DatasetSplits | None = None,
) -> ExperimentReport:
    """Grid over retrieved-sample count K and context length L.

    Each L gets its own pretrained encoder and datastore; the K values reuse
    one retrieval pass at the largest K.
    """
    seed = config.seed if seed is None else seed
    splits = _splits(config, dataset, splits)
    report = ExperimentReport("sweep_kl", config.to_dict(), [seed])
    clock = _Clock(report.timings)
    Ks = sorted(set(int(k) for k in Ks))
    for L in sorted(set(int(x) for x in Ls)):
        with clock("pretrain"):
            enc, _ = pretrain_encoder(config, dataset, splits, seed, L=L)
        with clock("datastore"):
            store = build_datastore(splits.retrieval, enc, L)
            prepared = prepare_splits(config, splits, enc, store, max(Ks), L)
        for K in Ks:
            pc = predictor_config(config, seed=seed, K=K, L=L)
            with clock("train"):
                _, a, ll = fit_and_score(pc, dataset.vocab_sizes, enc.config.v, prepared, store)
            report.rows.append({"variant": f"K={K},L={L}", "K": K, "L": L, "seed": seed, "auc": a, "logloss": ll})
    report.summarise()
    return report
