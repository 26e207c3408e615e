"""Sequence encoder and masked-behaviour pretraining.

Each interaction becomes a token: the embeddings of its M categorical
features plus an embedding of its label token (0, 1, MSK or PAD), concatenated
and projected to ``d_model``. A causal transformer runs over the tokens and the
hidden state at the last real position represents the sequence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import Interaction
from .errors import EmptyCorpusError, TooShortError, VocabError
from .ingest import PretrainCorpus
from .ndcore import ParamStore, Tensor, init_embedding, init_linear, no_grad, ops as F
from .ndcore.checkpoint import load_params, save_params

logger = logging.getLogger(__name__)

LABEL_0, LABEL_1, MSK, PAD = 0, 1, 2, 3
VARIANTS = ("causal_transformer", "recurrent", "bidirectional_transformer")
_NEG = -1e9


@dataclass
class EncoderConfig:
    vocab_sizes: tuple[int, ...]
    w: int = 8
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    L_max: int = 16
    mask_ratio: float = 0.5
    variant: str = "causal_transformer"
    ffn_mult: int = 2
    head_zero_init: bool = True

    def __post_init__(self):
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}, expected one of {VARIANTS}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")

    @property
    def M(self) -> int:
        return len(self.vocab_sizes)

    @property
    def v(self) -> int:
        return self.d_model

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls(**json.loads(text))


@dataclass
class Batch:
    """Right-padded token block: ``feats`` (B, T, M), ``labels`` (B, T), ``lengths`` (B,)."""

    feats: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        T = self.feats.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]


def make_batch(sequences: Sequence[Sequence[Interaction]], T: int | None = None) -> Batch:
    """Pad a list of (non-empty) interaction lists; labels are left unmasked."""
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    T = int(T or (lengths.max() if len(lengths) else 1))
    M = len(sequences[0][0].features)
    feats = np.zeros((len(sequences), T, M), dtype=np.int64)
    labels = np.full((len(sequences), T), PAD, dtype=np.int64)
    for b, seq in enumerate(sequences):
        for t, it in enumerate(seq):
            feats[b, t] = it.features
            labels[b, t] = it.label
    return Batch(feats, labels, lengths)


@dataclass
class MaskedSequence:
    interactions: tuple[Interaction, ...]
    label_tokens: np.ndarray
    mask_set: tuple[int, ...]
    true_labels: tuple[int, ...]


def draw_masks(valid: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(ratio) mask over valid positions; rows with no pick mask their last position."""
    mask = (rng.random(valid.shape) < ratio) & valid
    empty = ~mask.any(axis=1)
    if empty.any():
        last = valid.sum(axis=1) - 1
        rows = np.nonzero(empty)[0]
        mask[rows, last[rows]] = True
    return mask


def mask_behaviors(seq: Sequence[Interaction], ratio: float, rng: np.random.Generator) -> MaskedSequence:
    if len(seq) < 2:
        raise TooShortError(f"masking needs at least 2 interactions, got {len(seq)}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    seq = tuple(seq)
    mask = draw_masks(np.ones((1, len(seq)), dtype=bool), ratio, rng)[0]
    tokens = np.array([it.label for it in seq], dtype=np.int64)
    tokens[mask] = MSK
    pos = tuple(int(p) for p in np.nonzero(mask)[0])
    return MaskedSequence(seq, tokens, pos, tuple(seq[p].label for p in pos))


class SequenceEncoder:
    """Encoder parameters plus the forward passes that use them."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore()
        self._init_params(np.random.default_rng(seed))

    # -- parameters ----------------------------------------------------------
    def _init_params(self, rng: np.random.Generator) -> None:
        c, p = self.config, self.params
        for j, n in enumerate(c.vocab_sizes):
            p.add(f"feat_emb.{j}", init_embedding(rng, n, c.w))
        p.add("label_emb", init_embedding(rng, 4, c.w))
        p.add("in_proj.w", init_linear(rng, (c.M + 1) * c.w, c.d_model))
        p.add("in_proj.b", np.zeros(c.d_model))
        p.add("pos_emb", init_embedding(rng, c.L_max, c.d_model))
        d = c.d_model
        if c.variant == "recurrent":
            p.add("gru.wx", init_linear(rng, d, 3 * d))
            p.add("gru.wh", init_linear(rng, d, 3 * d))
            p.add("gru.b", np.zeros(3 * d))
        else:
            for i in range(c.n_layers):
                p.add(f"blk{i}.ln1.g", np.ones(d))
                p.add(f"blk{i}.ln1.b", np.zeros(d))
                p.add(f"blk{i}.qkv.w", init_linear(rng, d, 3 * d))
                p.add(f"blk{i}.qkv.b", np.zeros(3 * d))
                p.add(f"blk{i}.out.w", init_linear(rng, d, d))
                p.add(f"blk{i}.out.b", np.zeros(d))
                p.add(f"blk{i}.ln2.g", np.ones(d))
                p.add(f"blk{i}.ln2.b", np.zeros(d))
                p.add(f"blk{i}.ff1.w", init_linear(rng, d, c.ffn_mult * d))
                p.add(f"blk{i}.ff1.b", np.zeros(c.ffn_mult * d))
                p.add(f"blk{i}.ff2.w", init_linear(rng, c.ffn_mult * d, d))
                p.add(f"blk{i}.ff2.b", np.zeros(d))
        p.add("ln_f.g", np.ones(d))
        p.add("ln_f.b", np.zeros(d))
        p.add("null_seq", init_embedding(rng, 1, d)[0])
        p.add("head.w1", init_linear(rng, d, d))
        p.add("head.b1", np.zeros(d))
        p.add("head.w2", np.zeros((d, 1)) if c.head_zero_init else init_linear(rng, d, 1))
        p.add("head.b2", np.zeros(1))

    # -- token embedding ---------------------------------------------------------
    def _check_ids(self, feats: np.ndarray, labels: np.ndarray) -> None:
        c = self.config
        if feats.shape[-1] != c.M:
            raise VocabError(f"expected {c.M} feature fields, got {feats.shape[-1]}")
        for j, n in enumerate(c.vocab_sizes):
            col = feats[..., j]
            if col.size and (col.min() < 0 or col.max() >= n):
                raise VocabError(f"field {j}: value id {int(col.max())} outside vocabulary of size {n}")
        if labels.size and (labels.min() < 0 or labels.max() > PAD):
            raise VocabError(f"label token outside {{0, 1, MSK, PAD}}: {int(labels.max())}")

    def token_embeddings(self, feats: np.ndarray, labels: np.ndarray) -> Tensor:
        """(…, M) feature ids and (…) label tokens -> (…, d_model), before positions."""
        self._check_ids(feats, labels)
        p = self.params
        parts = [F.embedding_lookup(p[f"feat_emb.{j}"], feats[..., j]) for j in range(self.config.M)]
        parts.append(F.embedding_lookup(p["label_emb"], labels))
        return F.concat(parts, axis=-1) @ p["in_proj.w"] + p["in_proj.b"]

    def embed_interaction(self, interaction: Interaction, label_token: int) -> Tensor:
        feats = np.asarray([interaction.features], dtype=np.int64)
        return self.token_embeddings(feats, np.asarray([label_token]))[0]

    # -- sequence model ------------------------------------------------------------
    def hidden_states(self, feats: np.ndarray, labels: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Per-position hidden states (B, T, d_model) of right-padded sequences."""
        c, p = self.config, self.params
        B, T = labels.shape
        if T > c.L_max:
            raise ValueError(f"sequence length {T} exceeds L_max={c.L_max}")
        x = self.token_embeddings(feats, labels) + p["pos_emb"][:T]
        valid = np.arange(T)[None, :] < lengths[:, None]
        if c.variant == "recurrent":
            x = self._gru(x)
        else:
            bias = np.where(valid[:, None, None, :], 0.0, _NEG)  # (B, 1, 1, T) key padding
            if c.variant == "causal_transformer":
                bias = bias + np.triu(np.full((T, T), _NEG), k=1)[None, None]
            for i in range(c.n_layers):
                x = self._block(x, i, bias)
        return F.layer_norm(x, p["ln_f.g"], p["ln_f.b"])

    def _block(self, x: Tensor, i: int, bias: np.ndarray) -> Tensor:
        c, p = self.config, self.params
        B, T, d = x.shape
        H, dh = c.n_heads, d // c.n_heads
        h = F.layer_norm(x, p[f"blk{i}.ln1.g"], p[f"blk{i}.ln1.b"])
        qkv = (h @ p[f"blk{i}.qkv.w"] + p[f"blk{i}.qkv.b"]).reshape(B, T, 3, H, dh)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = F.softmax((q @ F.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)) + bias, axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + (y @ p[f"blk{i}.out.w"] + p[f"blk{i}.out.b"])
        h = F.layer_norm(x, p[f"blk{i}.ln2.g"], p[f"blk{i}.ln2.b"])
        h = F.gelu(h @ p[f"blk{i}.ff1.w"] + p[f"blk{i}.ff1.b"]) @ p[f"blk{i}.ff2.w"] + p[f"blk{i}.ff2.b"]
        return x + h

    def _gru(self, x: Tensor) -> Tensor:
        p = self.params
        B, T, d = x.shape
        gx = x @ p["gru.wx"] + p["gru.b"]
        wh = p["gru.wh"]
        h = Tensor(np.zeros((B, d)))
        outs = []
        for t in range(T):
            g_t = gx[:, t, :]
            gh = h @ wh
            z = F.sigmoid(g_t[:, :d] + gh[:, :d])
            r = F.sigmoid(g_t[:, d : 2 * d] + gh[:, d : 2 * d])
            n = F.tanh(g_t[:, 2 * d :] + r * gh[:, 2 * d :])
            h = (1.0 - z) * n + z * h
            outs.append(h.reshape(B, 1, d))
        return F.concat(outs, axis=1)

    def last_states(self, batch: Batch) -> Tensor:
        hs = self.hidden_states(batch.feats, batch.labels, batch.lengths)
        return hs[np.arange(len(batch.lengths)), batch.lengths - 1]

    def encode_sequences(self, sequences: Sequence[Sequence[Interaction]], batch_size: int = 512) -> np.ndarray:
        """Encode many sequences (labels unmasked) into an (n, v) array.

        Empty sequences map to the learned null-sequence embedding.
        """
        v = self.config.v
        out = np.empty((len(sequences), v))
        nonempty = [i for i, s in enumerate(sequences) if len(s) > 0]
        empty = [i for i, s in enumerate(sequences) if len(s) == 0]
        if empty:
            out[empty] = self.params["null_seq"].data
        # group by length so padding stays small
        nonempty.sort(key=lambda i: len(sequences[i]))
        with no_grad():
            for s in range(0, len(nonempty), batch_size):
                ids = nonempty[s : s + batch_size]
                batch = make_batch([sequences[i] for i in ids])
                out[ids] = self.last_states(batch).data
        return out

    def encode_sequence(self, sequence: Sequence[Interaction]) -> tuple[np.ndarray, bool]:
        """Vector of one sequence plus a flag telling whether it was the null embedding."""
        is_null = len(sequence) == 0
        return self.encode_sequences([sequence])[0], is_null

    # -- pretraining -----------------------------------------------------------------
    def position_logits(self, batch: Batch) -> Tensor:
        """Pretraining head logit at every position, (B, T)."""
        p = self.params
        hs = self.hidden_states(batch.feats, batch.labels, batch.lengths)
        h = F.gelu(hs @ p["head.w1"] + p["head.b1"])
        logits = h @ p["head.w2"] + p["head.b2"]
        return logits.reshape(logits.shape[:-1])

    def pretrain_loss(self, batch: Batch, mask: np.ndarray, true_labels: np.ndarray) -> Tensor:
        """Mean binary cross-entropy over masked positions.

        ``batch.labels`` must already carry MSK at the masked positions.
        """
        logits = self.position_logits(batch)
        picked = logits[np.nonzero(mask)]
        return F.bce_loss(F.sigmoid(picked), true_labels[np.nonzero(mask)]).mean()

    # -- persistence -----------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_params(self.params, path)
        path.with_suffix(".json").write_text(self.config.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SequenceEncoder":
        path = Path(path)
        cfg = EncoderConfig.from_json(path.with_suffix(".json").read_text())
        enc = cls(cfg)
        enc.params.load_state_dict(load_params(path))
        return enc


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class PretrainResult:
    losses: list[float] = field(default_factory=list)


def _corpus_arrays(corpus: PretrainCorpus, T: int) -> Batch:
    return make_batch([s.interactions for s in corpus.sequences], T=T)


def pretrain_epoch(
    encoder: SequenceEncoder,
    corpus: PretrainCorpus,
    ratio: float,
    opt: PretrainConfig,
    rng: np.random.Generator,
    _cache: dict | None = None,
) -> float:
    """One pass over the corpus in shuffled mini-batches; returns loss per masked position."""
    if len(corpus) == 0:
        raise EmptyCorpusError("pretraining corpus is empty")
    T = max(len(s) for s in corpus.sequences)
    full = _cache.get("batch") if _cache is not None else None
    if full is None:
        full = _corpus_arrays(corpus, T)
        if _cache is not None:
            _cache["batch"] = full
    order = rng.permutation(len(corpus))
    total, count = 0.0, 0
    for s in range(0, len(order), opt.batch_size):
        idx = order[s : s + opt.batch_size]
        feats, labels, lengths = full.feats[idx], full.labels[idx], full.lengths[idx]
        valid = np.arange(T)[None, :] < lengths[:, None]
        mask = draw_masks(valid, ratio, rng)
        true = labels.astype(np.float64)
        masked_labels = np.where(mask, MSK, labels)
        # trim to the longest sequence in this mini-batch
        Tb = int(lengths.max())
        batch = Batch(feats[:, :Tb], masked_labels[:, :Tb], lengths)
        encoder.params.zero_grad()
        loss = encoder.pretrain_loss(batch, mask[:, :Tb], true[:, :Tb])
        loss.backward()
        encoder.params.adam_step(opt.lr, opt.beta1, opt.beta2, opt.eps)
        n = int(mask.sum())
        total += loss.item() * n
        count += n
    return total / count


def pretrain(
    encoder: SequenceEncoder,
    corpus: PretrainCorpus,
    opt: PretrainConfig,
    seed: int = 0,
    ratio: float | None = None,
) -> PretrainResult:
    rng = np.random.default_rng(seed)
    ratio = encoder.config.mask_ratio if ratio is None else ratio
    result = PretrainResult()
    cache: dict = {}
    for epoch in range(opt.epochs):
        loss = pretrain_epoch(encoder, corpus, ratio, opt, rng, _cache=cache)
        result.losses.append(loss)
        logger.info("pretrain epoch %d loss %.4f", epoch + 1, loss)
    return result
