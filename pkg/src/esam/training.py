"""Mini-batch training of the two-tower model with the combined objective.

One step takes ``batch_size`` training examples (one query each, with ``n``
labeled source items and ``n`` unlabeled target items), computes the four
loss components, and applies one optimizer update on their weighted sum.
After every epoch the model is scored on the validation split; the best
epoch's parameters are kept and training stops after ``patience`` epochs
without improvement.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DisplayFrequencyIndex, InteractionLog, TargetSampler, iter_batches, make_epoch, source_groups
from .errors import ConfigError
from .evaluation import DEFAULT_K, evaluate_sliced
from .losses import COMPONENTS, LossConfig, QueryBatch, batch_losses, loss_total
from .model import SCORINGS, FieldSpec, TowerConfig, embed_items, embed_queries, init_params
from .optim import SGD, Adam

MODES = {"recommendation": "dot_sigmoid", "search": "cosine"}


@dataclass(frozen=True)
class TrainConfig:
    n: int = 10
    batch_size: int = 256
    epochs: int = 20
    lr: float = 1e-4
    optimizer: str = "adam"
    clip_norm: float | None = None
    patience: int = 3
    k: int = DEFAULT_K
    seed: int = 0
    scoring: str = "dot_sigmoid"
    early_stopping: bool = True

    def __post_init__(self):
        if self.n < 1 or self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or self.k < 1:
            raise ConfigError("n, batch_size, epochs, patience and k must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.scoring not in SCORINGS:
            raise ConfigError(f"unknown scoring {self.scoring!r}")


def build_tower(train: InteractionLog, embedding_dim: int, hidden: Sequence[int],
                query_table=None) -> TowerConfig:
    """One embedding per attribute field of the query table and of the catalog."""
    qt = query_table if query_table is not None else train.queries
    q_fields = [FieldSpec(f, qt.vocab[f], embedding_dim) for f in qt.single]
    q_fields += [FieldSpec(f, qt.vocab[f], embedding_dim, multi=True) for f in qt.multi]
    cat = train.catalog
    d_fields = [FieldSpec(f, cat.vocab[f], embedding_dim) for f in cat.single]
    d_fields += [FieldSpec(f, cat.vocab[f], embedding_dim, multi=True) for f in cat.multi]
    return TowerConfig(tuple(q_fields), tuple(d_fields), train.num_items, tuple(hidden))


def model_label(cfg: LossConfig) -> str:
    return "BaseModel" if cfg.is_base_model else "ESAM"


@dataclass
class EpochRecord:
    epoch: int
    L_s: float
    L_DA: float
    L_DCc: float
    L_DCp: float
    total: float
    val_ndcg20: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    tower: TowerConfig
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -math.inf
    optimizer_state: dict = field(default_factory=dict)


class Batcher:
    """Turns training examples into stacked feature tensors."""

    def __init__(self, tower: TowerConfig, item_rows: Sequence[dict], query_rows: Sequence[dict]):
        self.tower = tower
        self.item_rows = item_rows
        self.query_rows = query_rows

    def batch(self, examples, params, with_targets: bool = True) -> QueryBatch:
        n = examples[0].source_items.size
        qs = [e.query for e in examples]
        src = np.concatenate([e.source_items for e in examples])
        lab = np.concatenate([e.labels for e in examples])
        v_q = embed_queries([self.query_rows[q] for q in qs], params, self.tower)
        D_s = embed_items([self.item_rows[i] for i in src], params, self.tower)
        D_t, tgt = None, None
        if with_targets:
            tgt = np.concatenate([e.target_items for e in examples])
            D_t = embed_items([self.item_rows[i] for i in tgt], params, self.tower)
        return QueryBatch(v_q, D_s, lab, D_t, src, tgt, n)


def train_model(train: InteractionLog, val: InteractionLog, tower: TowerConfig, loss_cfg: LossConfig,
                tcfg: TrainConfig, freq: DisplayFrequencyIndex, item_rows: Sequence[dict], query_rows: Sequence[dict],
                params: dict | None = None, val_relevant: Mapping[int, np.ndarray] | None = None,
                log: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train until ``tcfg.epochs`` or early stop; returns the best-validation parameters.

    With ``early_stopping`` off, all epochs run and the last parameters are returned.
    """
    params = params if params is not None else init_params(tower, tcfg.seed)
    if tcfg.optimizer == "adam":
        opt = Adam(params, lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    else:
        opt = SGD(params, lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    batcher = Batcher(tower, item_rows, query_rows)
    groups = source_groups(train, tcfg.n, tcfg.seed)
    sampler = TargetSampler(train.catalog, train.similarity_field)
    result = TrainResult(params, tower)
    best = None
    stale = 0
    for epoch in range(tcfg.epochs):
        examples = make_epoch(train, tcfg.n, tcfg.seed, epoch, groups=groups, sampler=sampler)
        sums = dict.fromkeys((*COMPONENTS, "total"), 0.0)
        steps = 0
        for chunk in iter_batches(examples, tcfg.batch_size, tcfg.seed, epoch):
            opt.zero_grad()
            comps = batch_losses(batcher.batch(chunk, params), params, loss_cfg, tcfg.scoring)
            total = loss_total(comps, loss_cfg)
            total.backward()
            opt.step()
            for name in COMPONENTS:
                sums[name] += comps[name].item()
            sums["total"] += total.item()
            steps += 1
        val_ndcg = evaluate_sliced(params, tower, tcfg.scoring, val, train, freq, tcfg.k, relevant=val_relevant,
                                   item_rows=item_rows, query_rows=query_rows).mean("entire", "ndcg")
        rec = EpochRecord(epoch, *(sums[c] / max(steps, 1) for c in (*COMPONENTS, "total")), val_ndcg)
        result.history.append(rec)
        if log is not None:
            log(rec)
        if not tcfg.early_stopping:
            result.best_val, result.best_epoch = val_ndcg, epoch
            result.optimizer_state = opt.state_arrays()
            continue
        if val_ndcg > result.best_val:
            result.best_val, result.best_epoch = val_ndcg, epoch
            best = {k: p.values.copy() for k, p in params.items()}
            result.optimizer_state = {k: np.copy(v) for k, v in opt.state_arrays().items()}
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    if best is not None:
        result.params = {k: T.parameter(v) for k, v in best.items()}
    return result
