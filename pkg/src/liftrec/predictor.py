"""Retrieval-augmented CTR predictor.

The target sample's embedding attends over the embeddings of its retrieved
keys; the attention weights pool the keys and the stored history/future
context vectors. Pairwise feature interactions of the target and of the
pooled key, the pooled context vectors, and the target user's own encoded
history feed an MLP with a sigmoid output.
"""

from __future__ import annotations

import bisect
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .domain import Interaction, build_user_sequences, feature_matrix, label_vector
from .errors import EmptyDataset, ShapeError
from .eval.metrics import auc, logloss
from .ndcore import ParamStore, Tensor, init_attention_matrix, init_embedding, init_linear, no_grad, ops as F
from .ndcore.checkpoint import load_params, save_params
from .retriever import Datastore, RetrievalResult

logger = logging.getLogger(__name__)

MODES = ("FULL", "HISTORY_ONLY", "FUTURE_ONLY", "NO_CONTEXT")
_NEG = -1e9


# -- interaction functions -----------------------------------------------------------


def _pairs(M: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(M, k=1)


def inner_product_interaction(emb: Tensor) -> Tensor:
    """(..., M, w) -> (..., M(M-1)/2) inner products in lexicographic pair order."""
    M = emb.shape[-2]
    if M < 2:
        logger.warning("interaction layer with M=%d fields yields an empty vector", M)
        return Tensor(np.zeros(emb.shape[:-2] + (0,)))
    gram = emb @ F.swapaxes(emb, -1, -2)
    iu, ju = _pairs(M)
    return gram[(Ellipsis, iu, ju)]


INTERACTIONS: dict[str, Callable[[Tensor], Tensor]] = {"inner_product": inner_product_interaction}


def interaction_layer(emb, fn: str = "inner_product") -> Tensor:
    return INTERACTIONS[fn](F.as_tensor(emb))


# -- attention and pooling ---------------------------------------------------------------


def key_attention(target_emb, key_embs, W, valid: np.ndarray | None = None) -> Tensor:
    """Softmax over bilinear scores x_i^T W x_t.

    ``target_emb`` is (..., D), ``key_embs`` (..., K, D); ``valid`` masks
    padded key slots. At least one key must be valid per row.
    """
    target_emb, key_embs, W = F.as_tensor(target_emb), F.as_tensor(key_embs), F.as_tensor(W)
    if key_embs.shape[-2] == 0:
        raise ValueError("key attention needs at least one retrieved key")
    D = target_emb.shape[-1]
    wx = F.reshape(F.reshape(target_emb, (-1, D)) @ F.transpose(W), target_emb.shape)
    scores = (key_embs * F.reshape(wx, wx.shape[:-1] + (1, wx.shape[-1]))).sum(axis=-1)
    if valid is not None:
        scores = scores + np.where(valid, 0.0, _NEG)
    return F.softmax(scores, axis=-1)


def _pool(alpha: Tensor, values) -> Tensor:
    values = F.as_tensor(values)
    return (F.reshape(alpha, alpha.shape + (1,)) * values).sum(axis=-2)


def aggregate_retrieved(alpha, key_embs, h, f, null: tuple | None = None):
    """Attention-weighted sums of keys, history and future vectors.

    With zero records the learned ``null`` triple is returned instead.
    """
    key_embs, h, f = F.as_tensor(key_embs), F.as_tensor(h), F.as_tensor(f)
    n = key_embs.shape[-2]
    if n == 0:
        if null is None:
            raise ValueError("empty retrieval needs null-context vectors")
        return tuple(F.as_tensor(x) for x in null)
    alpha = F.as_tensor(alpha)
    if alpha.shape[-1] != n or h.shape[-2] != n or f.shape[-2] != n:
        raise ShapeError(f"attention over {alpha.shape[-1]} weights but {n} records")
    return _pool(alpha, key_embs), _pool(alpha, h), _pool(alpha, f)


# -- configuration and model --------------------------------------------------------------


@dataclass
class PredictorConfig:
    ablation_mode: str = "FULL"
    K: int = 10
    interaction_fn: str = "inner_product"
    mlp_hidden: tuple[int, ...] = (64, 32)
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    w: int = 8
    L: int = 8
    zero_init_head: bool = False
    raw_embeddings: bool = False
    patience: int | None = None

    def __post_init__(self):
        self.mlp_hidden = tuple(int(x) for x in self.mlp_hidden)
        if self.ablation_mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.ablation_mode!r}, expected one of {MODES}")
        if self.interaction_fn not in INTERACTIONS:
            raise ValueError(f"unknown interaction function {self.interaction_fn!r}")
        if self.K < 1 and self.ablation_mode != "NO_CONTEXT":
            raise ValueError("K must be >= 1 unless the mode is NO_CONTEXT")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when given")

    @property
    def uses_retrieval(self) -> bool:
        return self.ablation_mode != "NO_CONTEXT"

    @property
    def uses_history(self) -> bool:
        return self.ablation_mode in ("FULL", "HISTORY_ONLY")

    @property
    def uses_future(self) -> bool:
        return self.ablation_mode in ("FULL", "FUTURE_ONLY")


@dataclass
class PredictorBatch:
    """Model-ready arrays for a batch of targets.

    ``ret_keys``/``ret_h``/``ret_f`` are padded to K slots; ``ret_valid``
    marks the real ones.
    """

    target: np.ndarray  # (B, M) value ids
    h_t: np.ndarray  # (B, v)
    ret_keys: np.ndarray  # (B, K, M)
    ret_h: np.ndarray  # (B, K, v)
    ret_f: np.ndarray  # (B, K, v)
    ret_valid: np.ndarray  # (B, K) bool
    labels: np.ndarray | None = None


class Predictor:
    def __init__(self, config: PredictorConfig, vocab_sizes: Sequence[int], v: int):
        self.config = config
        self.vocab_sizes = tuple(int(n) for n in vocab_sizes)
        self.v = int(v)
        self.params = ParamStore()
        self._init_params(np.random.default_rng(config.seed))

    @property
    def M(self) -> int:
        return len(self.vocab_sizes)

    @property
    def n_pairs(self) -> int:
        return self.M * (self.M - 1) // 2

    @property
    def input_width(self) -> int:
        c, P, v = self.config, self.n_pairs, self.v
        width = P + v
        if c.raw_embeddings:
            width += self.M * c.w
        if c.uses_retrieval:
            width += P
        width += v * (int(c.uses_history) + int(c.uses_future))
        return width

    def _init_params(self, rng: np.random.Generator) -> None:
        c, p = self.config, self.params
        D = self.M * c.w
        for j, n in enumerate(self.vocab_sizes):
            p.add(f"emb.{j}", init_embedding(rng, n, c.w))
        if c.uses_retrieval:
            p.add("attn.W", init_attention_matrix(rng, D))
            p.add("null.key", init_embedding(rng, 1, D)[0])
            if c.uses_history:
                p.add("null.h", init_embedding(rng, 1, self.v)[0])
            if c.uses_future:
                p.add("null.f", init_embedding(rng, 1, self.v)[0])
        widths = (self.input_width,) + c.mlp_hidden + (1,)
        last = len(widths) - 2
        for i in range(len(widths) - 1):
            if i == last and c.zero_init_head:
                w = np.zeros((widths[i], 1))
            else:
                w = init_linear(rng, widths[i], widths[i + 1])
            p.add(f"mlp.{i}.w", w)
            p.add(f"mlp.{i}.b", np.zeros(widths[i + 1]))

    # -- forward ------------------------------------------------------------------
    def embed(self, ids: np.ndarray) -> Tensor:
        """(..., M) ids -> (..., M, w)."""
        ids = np.asarray(ids, dtype=np.int64)
        parts = [
            F.reshape(F.embedding_lookup(self.params[f"emb.{j}"], ids[..., j]), ids.shape[:-1] + (1, self.config.w))
            for j in range(self.M)
        ]
        return F.concat(parts, axis=-2)

    def _null_row(self, name: str, B: int) -> Tensor:
        t = self.params[name]
        return F.reshape(t, (1, t.shape[0])) * np.ones((B, 1))

    def _context_blocks(self, batch: PredictorBatch, tgt_flat: Tensor) -> list[Tensor]:
        c, p = self.config, self.params
        B, K = batch.ret_valid.shape
        D = self.M * c.w
        if K == 0:
            has = np.zeros((B, 1))
            key_agg = self._null_row("null.key", B)
            h_agg = self._null_row("null.h", B) if c.uses_history else None
            f_agg = self._null_row("null.f", B) if c.uses_future else None
        else:
            keys = self.embed(batch.ret_keys)
            keys_flat = F.reshape(keys, (B, K, D))
            valid = batch.ret_valid.astype(bool)
            alpha = key_attention(tgt_flat, keys_flat, p["attn.W"], valid)
            has = valid.any(axis=1).astype(np.float64)[:, None]

            def mix(pooled: Tensor, null_name: str) -> Tensor:
                # rows without any retrieved record fall back to the null vector
                return pooled * has + self._null_row(null_name, B) * (1.0 - has)

            key_agg = mix(_pool(alpha, keys_flat), "null.key")
            h_agg = mix(_pool(alpha, batch.ret_h), "null.h") if c.uses_history else None
            f_agg = mix(_pool(alpha, batch.ret_f), "null.f") if c.uses_future else None
        key_inter = interaction_layer(F.reshape(key_agg, (B, self.M, c.w)), c.interaction_fn)
        blocks = [key_inter]
        if f_agg is not None:
            blocks.append(f_agg)
        if h_agg is not None:
            blocks.append(h_agg)
        return blocks

    def logits(self, batch: PredictorBatch) -> Tensor:
        c, p = self.config, self.params
        target = np.asarray(batch.target, dtype=np.int64)
        B = target.shape[0]
        if target.shape[1] != self.M:
            raise ShapeError(f"target has {target.shape[1]} fields, model expects {self.M}")
        if batch.h_t.shape != (B, self.v):
            raise ShapeError(f"h_t has shape {batch.h_t.shape}, expected {(B, self.v)}")
        tgt = self.embed(target)
        blocks = [interaction_layer(tgt, c.interaction_fn)]
        if c.raw_embeddings:
            blocks.append(F.reshape(tgt, (B, self.M * c.w)))
        if c.uses_retrieval:
            blocks += self._context_blocks(batch, F.reshape(tgt, (B, self.M * c.w)))
        blocks.append(F.as_tensor(batch.h_t))
        x = F.concat(blocks, axis=-1)
        if x.shape[-1] != self.input_width:
            raise ShapeError(f"hidden width {x.shape[-1]} does not match MLP input {self.input_width}")
        n_layers = len(c.mlp_hidden) + 1
        for i in range(n_layers):
            x = x @ p[f"mlp.{i}.w"] + p[f"mlp.{i}.b"]
            if i < n_layers - 1:
                x = F.relu(x)
        return F.reshape(x, (B,))

    def forward(self, batch: PredictorBatch) -> Tensor:
        return F.sigmoid(self.logits(batch))

    def loss(self, batch: PredictorBatch) -> Tensor:
        return F.bce_loss(self.forward(batch), batch.labels).mean()

    def predict(self, batch: PredictorBatch) -> np.ndarray:
        with no_grad():
            return self.forward(batch).data

    # -- persistence ------------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        import json

        path = Path(path)
        save_params(self.params, path)
        meta = {"config": asdict(self.config), "vocab_sizes": list(self.vocab_sizes), "v": self.v}
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Predictor":
        import json

        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        model = cls(PredictorConfig(**meta["config"]), meta["vocab_sizes"], meta["v"])
        model.params.load_state_dict(load_params(path))
        return model


PredictorParams = Predictor


def batch_from_result(x_t: Sequence[int], h_t: np.ndarray, result: RetrievalResult, K: int | None = None) -> PredictorBatch:
    """Single-target batch from an explicit retrieval result."""
    recs = result.records
    M, v = len(x_t), len(h_t)
    K = len(recs) if K is None else K
    if len(recs) > K:
        raise ShapeError(f"{len(recs)} retrieved records exceed K={K}")
    keys = np.zeros((1, K, M), dtype=np.int64)
    H = np.zeros((1, K, v))
    Fm = np.zeros((1, K, v))
    valid = np.zeros((1, K), dtype=bool)
    for i, r in enumerate(recs):
        keys[0, i] = r.key_features
        H[0, i] = r.h_embedding
        Fm[0, i] = r.f_embedding
        valid[0, i] = True
    return PredictorBatch(np.asarray([x_t], dtype=np.int64), np.asarray(h_t, dtype=np.float64)[None, :], keys, H, Fm, valid)


def predict_forward(x_t: Sequence[int], h_t: np.ndarray, result: RetrievalResult, model: Predictor) -> float:
    """Click probability for one target."""
    return float(model.predict(batch_from_result(x_t, h_t, result))[0])


# -- inputs -----------------------------------------------------------------------------


def user_histories(targets: Sequence[Interaction], pool: Sequence[Interaction], L: int) -> list[tuple[Interaction, ...]]:
    """For each target, the last L pool interactions of its user with strictly earlier timestamps."""
    seqs = build_user_sequences(pool)
    stamps = {u: [it.timestamp for it in s.interactions] for u, s in seqs.items()}
    out = []
    for t in targets:
        seq = seqs.get(t.user_id)
        if seq is None:
            out.append(())
            continue
        cut = bisect.bisect_left(stamps[t.user_id], t.timestamp)
        out.append(seq.interactions[max(0, cut - L) : cut])
    return out


@dataclass
class PreparedExamples:
    """Frozen per-example inputs: target ids, labels, history vectors and retrieved rows."""

    target: np.ndarray
    labels: np.ndarray
    h_t: np.ndarray
    ret_pos: np.ndarray  # (n, K_max), -1 padded, datastore row positions

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx: np.ndarray, store: Datastore | None, K: int) -> PredictorBatch:
        pos = self.ret_pos[idx, :K]
        valid = pos >= 0
        if store is None or len(store) == 0:
            B = len(idx)
            M, v = self.target.shape[1], self.h_t.shape[1]
            keys, H, Fm = np.zeros((B, K, M), dtype=np.int64), np.zeros((B, K, v)), np.zeros((B, K, v))
        else:
            safe = np.where(valid, pos, 0)
            keys, H, Fm = store.keys[safe], store.h[safe], store.f[safe]
        return PredictorBatch(self.target[idx], self.h_t[idx], keys, H, Fm, valid, self.labels[idx])


def retrieve_positions(store: Datastore | None, queries: np.ndarray, K: int, backend: str | None = None) -> np.ndarray:
    if store is None or len(store) == 0:
        return np.full((len(queries), K), -1, dtype=np.int64)
    pos, _ = store.search(queries, K, backend)
    return pos


def prepare_examples(
    targets: Sequence[Interaction],
    history_pool: Sequence[Interaction],
    encoder,
    store: Datastore | None,
    K: int,
    L: int,
    ret_pos: np.ndarray | None = None,
) -> PreparedExamples:
    """Encode user histories and run retrieval once, ahead of training."""
    target = feature_matrix(targets)
    h_t = encoder.encode_sequences(user_histories(targets, history_pool, L))
    if ret_pos is None:
        ret_pos = retrieve_positions(store, target, max(K, 1))
    return PreparedExamples(target, label_vector(targets).astype(np.float64), h_t, ret_pos)


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    val_auc: float | None
    val_logloss: float | None


@dataclass
class TrainResult:
    model: Predictor
    log: list[TrainLogRow] = field(default_factory=list)
    encoder_checksum: str | None = None
    best_epoch: int | None = None

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.log]


def write_log_csv(rows: Sequence[TrainLogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_auc", "val_logloss"])
        for r in rows:
            writer.writerow([r.epoch, repr(r.train_loss), "" if r.val_auc is None else repr(r.val_auc),
                             "" if r.val_logloss is None else repr(r.val_logloss)])


def predict_prepared(model: Predictor, data: PreparedExamples, store: Datastore | None, batch_size: int = 1024) -> np.ndarray:
    K = model.config.K if model.config.uses_retrieval else 0
    out = np.empty(len(data))
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        out[idx] = model.predict(data.batch(idx, store, K))
    return out


def evaluate_prepared(model: Predictor, data: PreparedExamples, store: Datastore | None) -> tuple[float, float]:
    p = predict_prepared(model, data, store)
    return auc(p, data.labels), logloss(p, data.labels)


def fit_predictor(
    model: Predictor,
    train: PreparedExamples,
    store: Datastore | None,
    val: PreparedExamples | None = None,
) -> TrainResult:
    """Mini-batch Adam on BCE; one log row per epoch.

    With ``config.patience`` set and a validation set given, training stops
    once validation AUC has not improved for that many epochs and the best
    epoch's parameters are restored.
    """
    c = model.config
    if len(train) == 0:
        raise EmptyDataset("training split is empty")
    rng = np.random.default_rng(c.seed + 1)
    K = c.K if c.uses_retrieval else 0
    result = TrainResult(model)
    early = c.patience is not None and val is not None and len(val) > 0
    best_auc, best_state, best_epoch = -np.inf, None, 0
    for epoch in range(1, c.epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), c.batch_size):
            idx = order[s : s + c.batch_size]
            model.params.zero_grad()
            loss = model.loss(train.batch(idx, store, K))
            loss.backward()
            model.params.adam_step(c.lr, weight_decay=c.weight_decay)
            total += loss.item() * len(idx)
        row = TrainLogRow(epoch, total / len(train), None, None)
        if val is not None and len(val):
            row.val_auc, row.val_logloss = evaluate_prepared(model, val, store)
        result.log.append(row)
        logger.info("predictor epoch %d loss %.4f val_auc %s", epoch, row.train_loss, row.val_auc)
        if early:
            if row.val_auc > best_auc:
                best_auc, best_state, best_epoch = row.val_auc, model.params.state_dict(), epoch
            elif epoch - best_epoch >= c.patience:
                break
    if early and best_state is not None:
        model.params.load_state_dict(best_state)
        result.best_epoch = best_epoch
    return result


def train_predictor(
    train: Sequence[Interaction],
    store: Datastore | None,
    encoder,
    config: PredictorConfig,
    vocab_sizes: Sequence[int],
    history_pool: Sequence[Interaction] | None = None,
    val: Sequence[Interaction] | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train a predictor against a frozen encoder.

    ``history_pool`` supplies target-user histories (retrieval plus train
    interactions in the standard pipeline); it defaults to ``train``.
    """
    if not train:
        raise EmptyDataset("training split is empty")
    before = encoder.params.checksum()
    pool = train if history_pool is None else history_pool
    K = max(config.K, 1)
    prep_train = prepare_examples(train, pool, encoder, store if config.uses_retrieval else None, K, config.L)
    prep_val = None
    if val:
        prep_val = prepare_examples(val, pool, encoder, store if config.uses_retrieval else None, K, config.L)
    model = Predictor(config, vocab_sizes, encoder.config.v)
    result = fit_predictor(model, prep_train, store, prep_val)
    after = encoder.params.checksum()
    if after != before:
        raise RuntimeError("encoder parameters changed during predictor training")
    result.encoder_checksum = after
    if log_path is not None:
        write_log_csv(result.log, log_path)
    return result
