"""Command-line pipeline: ``liftrec <subcommand> --config cfg.json --workdir wd``.

Stages and what they need::

    synth        -> data/interactions-*.csv
    split        data              -> data/splits-*.json
    pretrain     split             -> checkpoints/encoder-*.lpm
    build-store  pretrain          -> stores/store-*.lst
    train        build-store       -> checkpoints/predictor-*.lpm
    eval         train             -> reports/eval-*.json
    audit        build-store       -> reports/audit-*.json
    time         train             -> reports/timing-*.json
    ablate, sweep-mask, sweep-kl     split -> reports/*.json

Every stage writes ``manifests/<stage>.json`` holding the config hash, the
hashes of its inputs and the content-hashed paths of its outputs. Manifests
contain no timestamps or absolute paths, so identical inputs give identical
manifests.

Exit codes: 0 success, 2 config error, 3 stage-order error, 4 audit failure,
5 internal error.
"""

from __future__ import annotations

import argparse
import fcntl
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import PipelineConfig, config_from_dict, load_config
from .domain import DatasetSplits
from .encoder import SequenceEncoder
from .errors import AuditFailure, ConfigError, LiftError, StageOrderError
from .eval.audit import leakage_audit
from .eval.experiments import mask_rate_sweep, run_ablation, sweep_kl
from .eval.metrics import auc, logloss, topn_metrics
from .eval.timing import InferencePipeline, inference_timing
from .eval.topn import build_ranked_sets
from .ingest import Dataset, SynthConfig, generate_synthetic, parse_interactions, write_interactions
from .predictor import Predictor, fit_predictor, predict_prepared, prepare_examples, write_log_csv
from .retriever import build_datastore, load_datastore, save_datastore

logger = logging.getLogger("liftrec")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_AUDIT, EXIT_INTERNAL = 0, 2, 3, 4, 5
MANIFEST_VERSION = 1
SUBDIRS = ("manifests", "checkpoints", "stores", "reports", "data")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock_fh = None

    def init(self) -> None:
        for d in SUBDIRS:
            (self.root / d).mkdir(parents=True, exist_ok=True)

    def lock(self) -> None:
        self.init()
        self._lock_fh = open(self.root / ".lock", "w")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise LiftError(f"workdir {self.root} is in use by another liftrec process") from None

    def unlock(self) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def path(self, rel: str) -> Path:
        return self.root / rel

    def put(self, subdir: str, stem: str, suffix: str, data: bytes) -> str:
        """Store ``data`` under a content-hashed name; returns the workdir-relative path."""
        rel = f"{subdir}/{stem}-{sha256_bytes(data)[:16]}{suffix}"
        target = self.path(rel)
        if not target.exists() or target.read_bytes() != data:
            target.write_bytes(data)
        return rel

    def manifest_path(self, stage: str) -> Path:
        return self.path(f"manifests/{stage}.json")

    def write_manifest(self, stage: str, cfg: PipelineConfig, inputs: dict, outputs: dict, extra: dict | None = None) -> dict:
        body = {
            "version": MANIFEST_VERSION,
            "stage": stage,
            "config_hash": cfg.stage_hash(stage),
            "inputs": inputs,
            "outputs": {k: {"path": v, "sha256": sha256_file(self.path(v))} for k, v in outputs.items()},
        }
        if extra:
            body["extra"] = extra
        body["manifest_hash"] = sha256_bytes(canonical(body).encode())
        self.manifest_path(stage).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return body

    def require(self, stage: str, cfg: PipelineConfig | None = None) -> dict:
        """Load a stage manifest, checking that its outputs exist and are intact."""
        mp = self.manifest_path(stage)
        if not mp.exists():
            raise StageOrderError(f"missing {mp}: run '{stage}' first")
        man = json.loads(mp.read_text())
        for name, out in man["outputs"].items():
            p = self.path(out["path"])
            if not p.exists():
                raise StageOrderError(f"missing {p} ({stage} output '{name}'): rerun '{stage}'")
            if sha256_file(p) != out["sha256"]:
                raise StageOrderError(f"{p} does not match the {stage} manifest: rerun '{stage}'")
        if cfg is not None and man["config_hash"] != cfg.stage_hash(stage):
            raise StageOrderError(
                f"{mp} was produced with config {man['config_hash']}, "
                f"current config gives {cfg.stage_hash(stage)}: rerun '{stage}'"
            )
        return man

    def output(self, man: dict, name: str) -> Path:
        return self.path(man["outputs"][name]["path"])


# -- shared loaders -----------------------------------------------------------------


def _stage_input(man: dict, name: str) -> dict:
    return {"path": man["outputs"][name]["path"], "sha256": man["outputs"][name]["sha256"]}


def _load_data(wd: Workdir, cfg: PipelineConfig) -> tuple[Dataset, DatasetSplits, dict]:
    split_man = wd.require("split", cfg)
    dataset = parse_interactions(wd.output(split_man, "dataset"))
    ids = json.loads(wd.output(split_man, "splits").read_text())
    by_id = {it.interaction_id: it for it in dataset.interactions}
    parts = {k: tuple(by_id[i] for i in ids[k]) for k in ("retrieval", "train", "test")}
    splits = DatasetSplits(parts["retrieval"], parts["train"], parts["test"],
                           ids["boundary_retrieval_end"], ids["boundary_train_end"])
    return dataset, splits, split_man


def _load_encoder(wd: Workdir, cfg: PipelineConfig) -> tuple[SequenceEncoder, dict]:
    man = wd.require("pretrain", cfg)
    return SequenceEncoder.load(wd.output(man, "encoder")), man


def _load_store(wd: Workdir, cfg: PipelineConfig):
    man = wd.require("build-store", cfg)
    store = load_datastore(wd.output(man, "store"))
    store.context_max_ts = np.load(wd.output(man, "context_ts"))
    return store, man


def _check_chain(man: dict, upstream: dict, name: str) -> None:
    """Refuse artifacts whose recorded upstream hash differs from the current one."""
    want = man["inputs"].get(name, {}).get("sha256")
    have = upstream["outputs"][name]["sha256"]
    if want != have:
        raise StageOrderError(f"{man['stage']} was built from a different {name}: rerun '{man['stage']}'")


def _place_checkpoint(wd: Workdir, tmp: Path, rel: str, cfg: PipelineConfig, stage: str) -> None:
    """Move the temporary checkpoint's sidecar next to its hashed name and record provenance."""
    sidecar = tmp.with_suffix(".json")
    wd.path(rel).with_suffix(".json").write_bytes(sidecar.read_bytes())
    wd.path(rel).with_suffix(".provenance.json").write_text(canonical({"config_hash": cfg.stage_hash(stage)}) + "\n")
    tmp.unlink()
    sidecar.unlink()


def _emit(wd: Workdir, stem: str, payload: dict, text: str) -> str:
    rel = wd.put("reports", stem, ".json", (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
    print(text)
    print(f"report: {wd.path(rel)}")
    return rel


# -- subcommands ----------------------------------------------------------------------


def cmd_synth(wd: Workdir, cfg: PipelineConfig, args) -> None:
    synth = {"seed": cfg.seed, **cfg.data.synth}
    dataset = generate_synthetic(SynthConfig(**synth))
    tmp = wd.path("data/.synth.tmp")
    write_interactions(dataset, tmp)
    data = tmp.read_bytes()
    tmp.unlink()
    rel = wd.put("data", "interactions", ".csv", data)
    man = wd.write_manifest("synth", cfg, {"synth_config": synth}, {"dataset": rel})
    print(f"synth: {len(dataset)} interactions, positive rate "
          f"{np.mean([it.label for it in dataset.interactions]):.3f} -> {wd.path(rel)}")
    print(f"manifest {man['manifest_hash']}")


def cmd_split(wd: Workdir, cfg: PipelineConfig, args) -> None:
    if cfg.data.path is not None:
        src = Path(cfg.data.path)
        if not src.exists():
            raise ConfigError(f"data.path: {src} does not exist")
        rel = wd.put("data", "interactions", ".csv", src.read_bytes())
        inputs = {"dataset": {"path": rel, "sha256": sha256_file(wd.path(rel))}}
    else:
        synth_man = wd.require("synth", cfg)
        rel = synth_man["outputs"]["dataset"]["path"]
        inputs = {"dataset": _stage_input(synth_man, "dataset")}
    dataset = parse_interactions(wd.path(rel))
    splits = P.split_dataset(cfg, dataset)
    ids = {k: [it.interaction_id for it in getattr(splits, k)] for k in ("retrieval", "train", "test")}
    ids["boundary_retrieval_end"] = splits.boundary_retrieval_end
    ids["boundary_train_end"] = splits.boundary_train_end
    srel = wd.put("data", "splits", ".json", canonical(ids).encode())
    man = wd.write_manifest("split", cfg, inputs, {"dataset": rel, "splits": srel})
    print(f"split: retrieval {len(splits.retrieval)}, train {len(splits.train)}, test {len(splits.test)}; "
          f"retrieval ends at t={splits.boundary_retrieval_end}")
    print(f"manifest {man['manifest_hash']}")


def cmd_pretrain(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, split_man = _load_data(wd, cfg)
    enc, losses = P.pretrain_encoder(cfg, dataset, splits, cfg.seed)
    tmp = wd.path("checkpoints/.encoder.tmp")
    enc.save(tmp)
    data = tmp.read_bytes()
    rel = wd.put("checkpoints", "encoder", ".lpm", data)
    _place_checkpoint(wd, tmp, rel, cfg, "pretrain")
    man = wd.write_manifest("pretrain", cfg, {"splits": _stage_input(split_man, "splits")}, {"encoder": rel},
                            {"losses": losses})
    for i, loss in enumerate(losses, 1):
        print(f"pretrain epoch {i:3d}  loss {loss:.4f}")
    print(f"manifest {man['manifest_hash']}")


def cmd_build_store(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, split_man = _load_data(wd, cfg)
    enc, enc_man = _load_encoder(wd, cfg)
    store = build_datastore(splits.retrieval, enc, cfg.L)
    tmp = wd.path("stores/.store.tmp")
    save_datastore(store, tmp)
    rel = wd.put("stores", "store", ".lst", tmp.read_bytes())
    tmp.unlink()
    buf = wd.path("stores/.ctx.tmp.npy")
    np.save(buf, store.context_max_ts)
    crel = wd.put("stores", "context-ts", ".npy", buf.read_bytes())
    buf.unlink()
    man = wd.write_manifest(
        "build-store", cfg,
        {"splits": _stage_input(split_man, "splits"), "encoder": _stage_input(enc_man, "encoder")},
        {"store": rel, "context_ts": crel},
    )
    print(f"build-store: {len(store)} records, {store.index.n_terms} index terms -> {wd.path(rel)}")
    print(f"manifest {man['manifest_hash']}")


def cmd_train(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, split_man = _load_data(wd, cfg)
    enc, enc_man = _load_encoder(wd, cfg)
    store, store_man = _load_store(wd, cfg)
    _check_chain(store_man, enc_man, "encoder")
    pc = P.predictor_config(cfg)
    fit, val = P.prepare_fit(cfg, splits, enc, store if pc.uses_retrieval else None, cfg.K, cfg.L)
    before = enc.params.checksum()
    model = Predictor(pc, dataset.vocab_sizes, enc.config.v)
    result = fit_predictor(model, fit, store if pc.uses_retrieval else None, val)
    if enc.params.checksum() != before:
        raise LiftError("encoder parameters changed during predictor training")
    tmp = wd.path("checkpoints/.predictor.tmp")
    model.save(tmp)
    rel = wd.put("checkpoints", "predictor", ".lpm", tmp.read_bytes())
    _place_checkpoint(wd, tmp, rel, cfg, "train")
    log_tmp = wd.path("reports/.trainlog.tmp")
    write_log_csv(result.log, log_tmp)
    lrel = wd.put("reports", "train-log", ".csv", log_tmp.read_bytes())
    log_tmp.unlink()
    man = wd.write_manifest(
        "train", cfg,
        {"encoder": _stage_input(enc_man, "encoder"), "store": _stage_input(store_man, "store"),
         "splits": _stage_input(split_man, "splits")},
        {"predictor": rel, "log": lrel},
        {"best_epoch": result.best_epoch},
    )
    for r in result.log:
        val_txt = "" if r.val_auc is None else f"  val_auc {r.val_auc:.4f}  val_logloss {r.val_logloss:.4f}"
        print(f"train epoch {r.epoch:3d}  loss {r.train_loss:.4f}{val_txt}")
    print(f"manifest {man['manifest_hash']}")


def _load_trained(wd: Workdir, cfg: PipelineConfig):
    dataset, splits, split_man = _load_data(wd, cfg)
    enc, enc_man = _load_encoder(wd, cfg)
    store, store_man = _load_store(wd, cfg)
    train_man = wd.require("train", cfg)
    _check_chain(store_man, enc_man, "encoder")
    _check_chain(train_man, enc_man, "encoder")
    _check_chain(train_man, store_man, "store")
    model = Predictor.load(wd.output(train_man, "predictor"))
    return dataset, splits, enc, store, model, train_man


def cmd_eval(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, enc, store, model, train_man = _load_trained(wd, cfg)
    audit = leakage_audit(store, splits)
    use = store if model.config.uses_retrieval else None
    test = prepare_examples(splits.test, splits.retrieval + splits.train, enc, use, max(cfg.K, 1), cfg.L)
    p = predict_prepared(model, test, use)
    sets = build_ranked_sets(model, enc, use, splits, cfg.eval.n_negatives, cfg.eval.max_queries, cfg.seed)
    report = {
        "version": MANIFEST_VERSION,
        "config_hash": cfg.stage_hash("eval"),
        "mode": model.config.ablation_mode,
        "n_test": len(splits.test),
        "auc": auc(p, test.labels),
        "logloss": logloss(p, test.labels),
        "topn": topn_metrics(sets, cfg.eval.topn) if sets else {},
        "topn_protocol": {
            "negatives_per_positive": cfg.eval.n_negatives,
            "negative_pool": "items the user never interacted with, uniform without replacement",
            "tie_break": "ascending item id",
            "n_queries": len(sets),
            "seed": cfg.seed,
        },
        "audit_passed": audit.passed,
    }
    lines = [f"eval ({report['mode']}, {report['n_test']} test interactions)",
             f"  AUC      {report['auc']:.4f}", f"  LogLoss  {report['logloss']:.4f}"]
    lines += [f"  {k:<8} {v:.4f}" for k, v in report["topn"].items()]
    lines.append(f"  audit    {'pass' if audit.passed else 'FAIL'}")
    rel = _emit(wd, "eval", report, "\n".join(lines))
    man = wd.write_manifest("eval", cfg, {"predictor": _stage_input(train_man, "predictor")}, {"report": rel})
    print(f"manifest {man['manifest_hash']}")


def cmd_audit(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, split_man = _load_data(wd, cfg)
    store, store_man = _load_store(wd, cfg)
    report = leakage_audit(store, splits)
    rel = _emit(wd, "audit", report.to_dict(), report.to_text())
    wd.write_manifest("audit", cfg, {"store": _stage_input(store_man, "store")}, {"report": rel})
    if not report.passed:
        raise AuditFailure(f"leakage audit failed: {report.n_violations} violating records")


def cmd_time(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, enc, store, model, train_man = _load_trained(wd, cfg)
    pipe = InferencePipeline(enc, store, model, splits.retrieval + splits.train, cfg.L)
    report = inference_timing(pipe, list(splits.test), cfg.eval.timing_queries)
    _emit(wd, "timing", report.to_dict(), report.to_text())


def _experiment(wd: Workdir, cfg: PipelineConfig, report) -> None:
    rel = wd.put("reports", report.name.replace("_", "-"), ".json", (report.to_json() + "\n").encode())
    print(report.to_text())
    print(f"report: {wd.path(rel)}")


def cmd_ablate(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, _ = _load_data(wd, cfg)
    seeds = [args.seed] if args.seed is not None else cfg.sweep.seeds
    _experiment(wd, cfg, run_ablation(dataset, cfg, seeds, splits=splits, random_encoder=args.random_encoder))


def cmd_sweep_mask(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, _ = _load_data(wd, cfg)
    _experiment(wd, cfg, mask_rate_sweep(dataset, cfg.sweep.mask_rates, cfg, splits=splits))


def cmd_sweep_kl(wd: Workdir, cfg: PipelineConfig, args) -> None:
    dataset, splits, _ = _load_data(wd, cfg)
    _experiment(wd, cfg, sweep_kl(dataset, cfg.sweep.Ks, cfg.sweep.Ls, cfg, splits=splits))


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "build-store": cmd_build_store,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-mask": cmd_sweep_mask,
    "sweep-kl": cmd_sweep_kl,
    "audit": cmd_audit,
    "time": cmd_time,
}


# -- argument handling ----------------------------------------------------------------


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    raw = cfg.to_dict()
    for item in args.set or []:
        path, value = _parse_override(item)
        node = raw
        for part in path[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"{'.'.join(path)}: unknown field")
            node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"{'.'.join(path)}: unknown field")
        node[path[-1]] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    return config_from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liftrec", description="Retrieval-augmented CTR pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
        sp.add_argument("--workdir", default="liftrec-work", help="artifact directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field, e.g. --set predictor.lr=0.01 (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "ablate":
            sp.add_argument("--random-encoder", action="store_true",
                            help="also train FULL mode against an untrained encoder")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    wd = Workdir(args.workdir)
    try:
        cfg = resolve_config(args)
        wd.lock()
        try:
            COMMANDS[args.command](wd, cfg, args)
        finally:
            wd.unlock()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"stage order error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except AuditFailure as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
