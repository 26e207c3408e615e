"""In-memory pipeline stages shared by the CLI and the experiment runners."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import PipelineConfig
from .domain import DatasetSplits, Interaction, temporal_split
from .encoder import EncoderConfig, PretrainConfig, SequenceEncoder, pretrain
from .errors import EmptyDataset
from .ingest import Dataset, SynthConfig, build_pretrain_corpus, generate_synthetic, parse_interactions
from .predictor import (
    Predictor,
    PredictorConfig,
    PreparedExamples,
    TrainResult,
    evaluate_prepared,
    fit_predictor,
    prepare_examples,
)
from .retriever import Datastore, build_datastore

logger = logging.getLogger(__name__)


def load_dataset(cfg: PipelineConfig) -> Dataset:
    if cfg.data.path is not None:
        return parse_interactions(Path(cfg.data.path))
    return generate_synthetic(SynthConfig(**cfg.data.synth))


def split_dataset(cfg: PipelineConfig, dataset: Dataset) -> DatasetSplits:
    return temporal_split(dataset.interactions, tuple(cfg.fractions))


def carve_validation(train: Sequence[Interaction], fraction: float) -> tuple[tuple, tuple]:
    """Hold out the latest ``fraction`` of the train split for early stopping."""
    n_val = int(len(train) * fraction)
    if n_val == 0:
        return tuple(train), ()
    if n_val >= len(train):
        raise EmptyDataset("validation carve leaves no training interactions")
    return tuple(train[:-n_val]), tuple(train[-n_val:])


def encoder_config(cfg: PipelineConfig, vocab_sizes: Sequence[int], mask_ratio: float | None = None, L: int | None = None) -> EncoderConfig:
    e = cfg.encoder
    L = cfg.L if L is None else L
    return EncoderConfig(
        vocab_sizes=tuple(vocab_sizes),
        w=e.w,
        d_model=e.d_model,
        n_layers=e.n_layers,
        n_heads=e.n_heads,
        L_max=max(16, L),
        mask_ratio=e.mask_ratio if mask_ratio is None else mask_ratio,
        variant=e.variant,
        ffn_mult=e.ffn_mult,
    )


def pretrain_encoder(
    cfg: PipelineConfig,
    dataset: Dataset,
    splits: DatasetSplits,
    seed: int,
    mask_ratio: float | None = None,
    L: int | None = None,
    train: bool = True,
) -> tuple[SequenceEncoder, list[float]]:
    """Initialise an encoder from ``seed`` and, unless ``train`` is false, pretrain it."""
    L = cfg.L if L is None else L
    enc = SequenceEncoder(encoder_config(cfg, dataset.vocab_sizes, mask_ratio, L), seed=seed)
    if not train or cfg.pretrain.epochs == 0:
        return enc, []
    p = cfg.pretrain
    corpus = build_pretrain_corpus(splits.retrieval, max(L, 2))
    result = pretrain(enc, corpus, PretrainConfig(epochs=p.epochs, batch_size=p.batch_size, lr=p.lr), seed=seed)
    return enc, result.losses


def predictor_config(cfg: PipelineConfig, mode: str | None = None, seed: int | None = None,
                     K: int | None = None, L: int | None = None) -> PredictorConfig:
    p = cfg.predictor
    return PredictorConfig(
        ablation_mode=p.ablation_mode if mode is None else mode,
        K=cfg.K if K is None else K,
        interaction_fn=p.interaction_fn,
        mlp_hidden=tuple(p.mlp_hidden),
        lr=p.lr,
        weight_decay=p.weight_decay,
        batch_size=p.batch_size,
        epochs=p.epochs,
        seed=cfg.seed if seed is None else seed,
        w=p.w,
        L=cfg.L if L is None else L,
        raw_embeddings=p.raw_embeddings,
        patience=p.patience,
    )


@dataclass
class Prepared:
    """Encoded targets for the fit, validation and test parts."""

    fit: PreparedExamples
    val: PreparedExamples | None
    test: PreparedExamples


def prepare_splits(cfg: PipelineConfig, splits: DatasetSplits, encoder: SequenceEncoder,
                   store: Datastore | None, K: int, L: int) -> Prepared:
    """Encode user histories and retrieve neighbours once for every target.

    Target histories come from retrieval plus train interactions strictly
    earlier than the target.
    """
    fit, val = prepare_fit(cfg, splits, encoder, store, K, L)
    pool = splits.retrieval + splits.train
    return Prepared(fit, val, prepare_examples(splits.test, pool, encoder, store, max(K, 1), L))


def prepare_fit(cfg: PipelineConfig, splits: DatasetSplits, encoder: SequenceEncoder,
                store: Datastore | None, K: int, L: int) -> tuple[PreparedExamples, PreparedExamples | None]:
    """Prepared fit and validation parts of the train split; the test split is untouched."""
    fit, val = carve_validation(splits.train, cfg.predictor.val_fraction)
    pool = splits.retrieval + splits.train
    K = max(K, 1)
    return (
        prepare_examples(fit, pool, encoder, store, K, L),
        prepare_examples(val, pool, encoder, store, K, L) if val else None,
    )


def fit_and_score(pc: PredictorConfig, vocab_sizes: Sequence[int], v: int, prepared: Prepared,
                  store: Datastore | None) -> tuple[TrainResult, float, float]:
    """Train one predictor on prepared inputs; return it with its test AUC and LogLoss."""
    model = Predictor(pc, vocab_sizes, v)
    result = fit_predictor(model, prepared.fit, store if pc.uses_retrieval else None, prepared.val)
    test_auc, test_ll = evaluate_prepared(model, prepared.test, store if pc.uses_retrieval else None)
    return result, test_auc, test_ll
