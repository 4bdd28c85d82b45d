"""Two-tower ranking model: embeddings + MLP on each side, two scoring functions.

A query or item is described by a mapping ``field name -> id`` (single-valued
fields) or ``field name -> list of ids`` (multi-valued fields such as a
behavior sequence, keyword tokens or genres).  Multi-valued fields are
mean-pooled; all field embeddings are concatenated and fed to an MLP whose
last width is the feature dimension ``L``.  Hidden layers use relu, the
output layer is linear.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, VersionError
from .tensor import Tensor

FieldIds = Mapping[str, "int | Sequence[int]"]
ModelParams = dict  # name -> Tensor

CHECKPOINT_VERSION = 1
SCORINGS = ("dot_sigmoid", "cosine")


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab: int
    dim: int
    multi: bool = False


@dataclass(frozen=True)
class TowerConfig:
    query_fields: tuple[FieldSpec, ...]
    item_fields: tuple[FieldSpec, ...]
    num_items: int
    hidden: tuple[int, ...] = (256, 128)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "query_fields", tuple(self.query_fields))
        object.__setattr__(self, "item_fields", tuple(self.item_fields))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or self.out_dim <= 0:
            raise ConfigError("feature dimension L must be positive")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive: {self.hidden}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if not self.query_fields or not self.item_fields:
            raise ConfigError("both towers need at least one input field")
        for f in (*self.query_fields, *self.item_fields):
            if f.vocab <= 0 or f.dim <= 0:
                raise ConfigError(f"field {f.name!r} needs positive vocab and dim")

    @property
    def out_dim(self) -> int:
        return self.hidden[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TowerConfig":
        d = dict(d)
        d["query_fields"] = tuple(FieldSpec(**f) for f in d["query_fields"])
        d["item_fields"] = tuple(FieldSpec(**f) for f in d["item_fields"])
        return cls(**d)


def init_params(cfg: TowerConfig, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and embeddings, zero biases.

    For an embedding table the fan-in is taken as the embedding width.
    """
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for side, fields in (("q", cfg.query_fields), ("d", cfg.item_fields)):
        for f in fields:
            bound = 1.0 / np.sqrt(f.dim)
            params[f"{side}.emb.{f.name}"] = T.parameter(rng.uniform(-bound, bound, (f.vocab, f.dim)))
        width = sum(f.dim for f in fields)
        for i, h in enumerate(cfg.hidden):
            bound = 1.0 / np.sqrt(width)
            params[f"{side}.W{i}"] = T.parameter(rng.uniform(-bound, bound, (width, h)))
            params[f"{side}.b{i}"] = T.parameter(np.zeros((1, h)))
            width = h
    params["item_bias"] = T.parameter(np.zeros((cfg.num_items, 1)))
    return params


def _field_embedding(inputs: Sequence[FieldIds], f: FieldSpec, table: Tensor) -> Tensor:
    if not f.multi:
        ids = [int(x[f.name]) for x in inputs]
        return T.gather_rows(table, ids)
    lists = [np.asarray(x.get(f.name, ()), dtype=np.int64).reshape(-1) for x in inputs]
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum([len(l) for l in lists], out=offsets[1:])
    flat = np.concatenate(lists) if lists else np.zeros(0, dtype=np.int64)
    return T.mean_pool_segments(T.gather_rows(table, flat), offsets)


def _tower(inputs: Sequence[FieldIds], fields: Sequence[FieldSpec], side: str, params: ModelParams, cfg: TowerConfig) -> Tensor:
    parts = [_field_embedding(inputs, f, params[f"{side}.emb.{f.name}"]) for f in fields]
    h = T.concat_cols(parts) if len(parts) > 1 else parts[0]
    last = len(cfg.hidden) - 1
    for i in range(len(cfg.hidden)):
        h = T.add(h @ params[f"{side}.W{i}"], params[f"{side}.b{i}"])
        if i < last:
            h = T.relu(h)
    return h


def embed_queries(queries: Sequence[FieldIds], params: ModelParams, cfg: TowerConfig) -> Tensor:
    return _tower(queries, cfg.query_fields, "q", params, cfg)


def embed_items(items: Sequence[FieldIds], params: ModelParams, cfg: TowerConfig) -> Tensor:
    """Stack item features row-wise; this is how source/target feature matrices are formed."""
    return _tower(items, cfg.item_fields, "d", params, cfg)


def embed_query(q: FieldIds, params: ModelParams, cfg: TowerConfig) -> Tensor:
    return embed_queries([q], params, cfg)


def embed_item(d: FieldIds, params: ModelParams, cfg: TowerConfig) -> Tensor:
    return embed_items([d], params, cfg)


def item_bias(params: ModelParams, item_ids: Sequence[int]) -> Tensor:
    return T.gather_rows(params["item_bias"], item_ids)


def _check_pair(v_q: Tensor, v_d: Tensor) -> None:
    if v_q.shape != v_d.shape:
        raise DimensionError(f"query/item feature shapes differ: {v_q.shape} vs {v_d.shape}")


def score_dot_sigmoid(v_q: Tensor, v_d: Tensor, b_d) -> Tensor:
    """Row-wise ``sigmoid(b_d + v_q . v_d)``; returns an ``m x 1`` column."""
    _check_pair(v_q, v_d)
    logits = T.row_sum(v_q * v_d)
    b = b_d if isinstance(b_d, Tensor) else T.constant(np.reshape(np.asarray(b_d, float), (-1, 1)))
    return T.sigmoid(logits + b)


def score_cosine(v_q: Tensor, v_d: Tensor) -> Tensor:
    """Row-wise cosine similarity, ``m x 1``.  Zero-norm rows raise."""
    _check_pair(v_q, v_d)
    return T.row_sum(T.l2_normalize_rows(v_q) * T.l2_normalize_rows(v_d))


def to_probability(raw: Tensor, scoring: str) -> Tensor:
    """Map a raw score into [0, 1]: identity for dot-sigmoid, ``(s + 1) / 2`` for cosine."""
    if scoring == "dot_sigmoid":
        return raw
    if scoring == "cosine":
        return raw * 0.5 + 0.5
    raise ConfigError(f"unknown scoring {scoring!r}; expected one of {SCORINGS}")


def score(v_q: Tensor, v_d: Tensor, params: ModelParams, item_ids: Sequence[int], scoring: str) -> Tensor:
    """Probability-scale scores for aligned rows of ``v_q`` and ``v_d``."""
    if scoring == "dot_sigmoid":
        return score_dot_sigmoid(v_q, v_d, item_bias(params, item_ids))
    return to_probability(score_cosine(v_q, v_d), scoring)


def score_matrix(Q: np.ndarray, D: np.ndarray, bias: np.ndarray | None, scoring: str) -> np.ndarray:
    """All-pairs ranking scores (no graph), ``|Q| x |D|``.  Monotone in the probability."""
    if scoring == "dot_sigmoid":
        logits = Q @ D.T
        if bias is not None:
            logits = logits + bias.reshape(1, -1)
        return logits
    qn = Q / np.linalg.norm(Q, axis=1, keepdims=True).clip(T.EPS_NORM)
    dn = D / np.linalg.norm(D, axis=1, keepdims=True).clip(T.EPS_NORM)
    return qn @ dn.T


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: TowerConfig, params: ModelParams, meta: dict | None = None,
                    optimizer_state: Mapping[str, np.ndarray] | None = None) -> None:
    header = {"version": CHECKPOINT_VERSION, "tower": cfg.to_dict(), "meta": meta or {}}
    arrays = {f"param/{k}": v.values for k, v in params.items()}
    for k, v in (optimizer_state or {}).items():
        arrays[f"optim/{k}"] = np.asarray(v)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    tower: TowerConfig
    params: ModelParams
    meta: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise VersionError(f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
        params = {k[6:]: T.parameter(z[k]) for k in z.files if k.startswith("param/")}
        opt = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
    tower = TowerConfig.from_dict(header["tower"])
    expected = set(init_params_shapes(tower))
    if expected != set(params):
        raise VersionError(f"checkpoint parameters do not match its tower config: {sorted(expected ^ set(params))}")
    for name, shape in init_params_shapes(tower).items():
        if params[name].shape != shape:
            raise VersionError(f"parameter {name} has shape {params[name].shape}, config implies {shape}")
    return Checkpoint(tower, params, header.get("meta", {}), opt)


def init_params_shapes(cfg: TowerConfig) -> dict[str, tuple[int, int]]:
    shapes = {}
    for side, fields in (("q", cfg.query_fields), ("d", cfg.item_fields)):
        for f in fields:
            shapes[f"{side}.emb.{f.name}"] = (f.vocab, f.dim)
        width = sum(f.dim for f in fields)
        for i, h in enumerate(cfg.hidden):
            shapes[f"{side}.W{i}"] = (width, h)
            shapes[f"{side}.b{i}"] = (1, h)
            width = h
    shapes["item_bias"] = (cfg.num_items, 1)
    return shapes
