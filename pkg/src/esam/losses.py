"""Training objectives: point-wise cross-entropy, attribute-correlation
alignment, center-wise clustering, gated entropy self-training, and their
weighted sum.

Each loss accepts either a single query (the plain form) or several queries
stacked row-wise.  Stacked inputs carry a per-row query index (``groups``)
or, for the alignment loss, a fixed number of rows per query
(``group_size``).  Per-query values are averaged over the queries present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateRowError, DimensionError, DomainError, NumericError
from .model import score
from .tensor import Tensor

PROB_EPS = 1e-7
COMPONENTS = ("L_s", "L_DA", "L_DCc", "L_DCp")


@dataclass(frozen=True)
class LossConfig:
    lambda_da: float = 0.7
    lambda_dcc: float = 0.3
    lambda_dcp: float = 0.5
    m1: float = 0.2
    m2: float = 0.7
    p1: float = 0.2
    p2: float = 0.8
    n_classes: int = 2
    detach_centers: bool = False

    def __post_init__(self):
        if min(self.lambda_da, self.lambda_dcc, self.lambda_dcp) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (0 <= self.m1 < self.m2):
            raise ConfigError(f"need 0 <= m1 < m2, got m1={self.m1}, m2={self.m2}")
        if not (0 < self.p1 < self.p2 < 1):
            raise ConfigError(f"need 0 < p1 < p2 < 1, got p1={self.p1}, p2={self.p2}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")

    @property
    def is_base_model(self) -> bool:
        return self.lambda_da == self.lambda_dcc == self.lambda_dcp == 0

    @property
    def weights(self) -> dict[str, float]:
        return {"L_s": 1.0, "L_DA": self.lambda_da, "L_DCc": self.lambda_dcc, "L_DCp": self.lambda_dcp}


def _safe_log(p: Tensor) -> Tensor:
    return T.log(T.clamp(p, PROB_EPS, 1.0 - PROB_EPS))


def loss_pointwise_ce(scores: Tensor, labels: Sequence[float]) -> Tensor:
    """Mean binary cross-entropy of probability scores (``m x 1``) against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.size == 0:
        raise ContractError("cross-entropy of an empty batch")
    if scores.shape != y.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {y.shape}")
    yt = T.constant(y)
    ll = yt * _safe_log(scores) + (1.0 - yt) * _safe_log(1.0 - scores)
    return -T.mean(ll)


def loss_a2c(D_s: Tensor, D_t: Tensor, group_size: int | None = None) -> Tensor:
    """Squared Frobenius distance between source and target Gram matrices, over ``L**2``.

    The Gram matrices are raw ``D.T @ D`` products (no mean-centering).  With
    ``group_size=n`` the inputs hold consecutive ``n``-row blocks, one per
    query, and the per-query losses are averaged.
    """
    if D_s.shape != D_t.shape:
        raise DimensionError(f"source {D_s.shape} and target {D_t.shape} feature matrices differ")
    rows, L = D_s.shape
    if group_size is None:
        diff = D_s.T @ D_s - D_t.T @ D_t
        return T.frobenius_sq(diff) * (1.0 / L**2)
    if group_size <= 0 or rows % group_size:
        raise DimensionError(f"{rows} rows do not split into groups of {group_size}")
    # ||As'As - At'At||^2 = ||As As'||^2 - 2 ||As At'||^2 + ||At At'||^2 per block,
    # which only needs the n x n within-block inner products.
    n, B = group_size, rows // group_size
    base = np.repeat(np.arange(B) * n, n * n)
    left = base + np.tile(np.repeat(np.arange(n), n), B)
    right = base + np.tile(np.arange(n), n * B)
    s_l, s_r = T.gather_rows(D_s, left), T.gather_rows(D_s, right)
    t_l, t_r = T.gather_rows(D_t, left), T.gather_rows(D_t, right)
    ss = T.frobenius_sq(T.row_sum(s_l * s_r))
    tt = T.frobenius_sq(T.row_sum(t_l * t_r))
    st = T.frobenius_sq(T.row_sum(s_l * t_r))
    return (ss + tt - st * 2.0) * (1.0 / (L**2 * B))


def _groups(groups, m: int) -> np.ndarray:
    g = np.zeros(m, dtype=np.int64) if groups is None else np.asarray(groups, dtype=np.int64).reshape(-1)
    if g.size != m:
        raise DimensionError(f"{g.size} group ids for {m} rows")
    return g


def class_centers(features: Tensor, labels: np.ndarray, groups: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Mean of the rows sharing (query, label).

    Returns ``(centers, center_of_row, center_keys)`` where ``center_keys`` is a
    ``C x 2`` array of ``(group, label)`` sorted lexicographically.
    """
    keys, center_of_row = np.unique(np.stack([groups, labels], axis=1), axis=0, return_inverse=True)
    center_of_row = center_of_row.reshape(-1)
    order = np.argsort(center_of_row, kind="stable")
    counts = np.bincount(center_of_row, minlength=len(keys))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    centers = T.mean_pool_segments(T.gather_rows(features, order), offsets)
    return centers, center_of_row, keys


def loss_center_clustering(D_s: Tensor, labels: Sequence[int], cfg: LossConfig, groups=None) -> Tensor:
    """Hinge-based center-wise clustering on L2-normalized source features.

    Intra term: ``sum_j max(0, |v_j - c_{y_j}|^2 - m1)``.  Inter term: over
    unordered pairs of classes present in the same query,
    ``max(0, m2 - |c_k - c_u|^2)``.  Both are summed per query and averaged
    over queries.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    m = D_s.shape[0]
    if m == 0 or y.size != m:
        raise ContractError(f"need one label per row and at least one row, got {y.size} labels for {m} rows")
    if y.min() < 0 or y.max() >= cfg.n_classes:
        raise ContractError(f"label {int(y.max() if y.max() >= cfg.n_classes else y.min())} outside [0, {cfg.n_classes})")
    g = _groups(groups, m)
    n_queries = len(np.unique(g))

    v = T.l2_normalize_rows(D_s)
    centers, center_of_row, keys = class_centers(v, y, g)
    if cfg.detach_centers:
        centers = centers.detach()
    dist = T.row_sum(T.square(v - T.gather_rows(centers, center_of_row)))
    total = T.sum(T.hinge(dist - cfg.m1))

    first, second = [], []
    for q in np.unique(keys[:, 0]):
        idx = np.flatnonzero(keys[:, 0] == q)
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                first.append(idx[a])
                second.append(idx[b])
    if first:
        gap = T.row_sum(T.square(T.gather_rows(centers, first) - T.gather_rows(centers, second)))
        total = total + T.sum(T.hinge(cfg.m2 - gap))
    return total * (1.0 / n_queries)


def self_training_mask(probs: np.ndarray, cfg: LossConfig) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    return (p < cfg.p1) | (p > cfg.p2)


def loss_self_training(target_probs: Tensor, cfg: LossConfig, groups=None, mask=None) -> Tensor:
    """Entropy ``-s log s`` averaged over confidently scored target rows.

    Rows with ``s < p1`` or ``s > p2`` are selected; the selection is a
    constant for this step (no gradient through it).  A query with no
    selected rows contributes 0.
    """
    m = target_probs.shape[0]
    if m == 0:
        return T.constant(0.0)
    sel = self_training_mask(target_probs.values, cfg) if mask is None else np.asarray(mask, bool).reshape(-1)
    g = _groups(groups, m)
    uniq, inv = np.unique(g, return_inverse=True)
    n_sel = np.bincount(inv, weights=sel.astype(float), minlength=len(uniq))
    w = np.where(sel, 1.0 / np.maximum(n_sel[inv], 1.0), 0.0) / len(uniq)
    ent = -(target_probs * _safe_log(target_probs))
    return T.sum(ent * T.constant(w.reshape(-1, 1)))


def loss_total(components: Mapping[str, Tensor], cfg: LossConfig) -> Tensor:
    """``L_s + l1 L_DA + l2 L_DCc + l3 L_DCp``; missing components count as 0."""
    total = None
    for name, weight in cfg.weights.items():
        if name not in components:
            if name == "L_s":
                raise ContractError("L_s is required")
            continue
        c = components[name]
        v = c.item() if isinstance(c, Tensor) else float(c)
        if not math.isfinite(v):
            raise NumericError(f"loss component {name} is not finite ({v})")
        if weight == 0:
            continue  # logged by the caller, but kept out of the graph
        if not isinstance(c, Tensor):
            c = T.constant(v)
        term = c if name == "L_s" else c * weight
        total = term if total is None else total + term
    return total


@dataclass
class QueryBatch:
    """Features for ``B`` queries, each with ``n`` source and ``n`` target items.

    ``D_s`` and ``D_t`` are ``(B*n) x L`` with query ``b`` owning rows
    ``b*n .. b*n+n-1``; ``v_q`` is ``B x L``.
    """

    v_q: Tensor
    D_s: Tensor
    labels: np.ndarray
    D_t: Tensor | None
    source_ids: np.ndarray
    target_ids: np.ndarray | None
    n: int

    def __post_init__(self):
        B, n = self.v_q.shape[0], self.n
        if self.D_s.shape[0] != B * n or self.labels.size != B * n:
            raise ContractError(f"expected {B * n} source rows and labels, got {self.D_s.shape[0]} / {self.labels.size}")
        if self.D_t is not None and self.D_t.shape != self.D_s.shape:
            raise ContractError(f"source {self.D_s.shape} and target {self.D_t.shape} must match")

    @property
    def groups(self) -> np.ndarray:
        return np.repeat(np.arange(self.v_q.shape[0]), self.n)


def _component(name: str, build) -> Tensor:
    # NaN inputs surface as domain errors deep in the graph; report which term hit them
    try:
        out = build()
    except DegenerateRowError:
        raise
    except DomainError as exc:
        raise NumericError(f"loss component {name} is not finite ({exc})") from exc
    v = out.item()
    if not math.isfinite(v):
        raise NumericError(f"loss component {name} is not finite ({v})")
    return out


def batch_losses(batch: QueryBatch, params, cfg: LossConfig, scoring: str) -> dict[str, Tensor]:
    """All four components for a stacked batch.  Target terms need ``batch.D_t``."""
    q_rep = T.gather_rows(batch.v_q, batch.groups)
    comps = {
        "L_s": _component("L_s", lambda: loss_pointwise_ce(
            score(q_rep, batch.D_s, params, batch.source_ids, scoring), (batch.labels > 0).astype(float))),
        "L_DCc": _component("L_DCc", lambda: loss_center_clustering(batch.D_s, batch.labels, cfg, batch.groups)),
    }
    if batch.D_t is not None:
        comps["L_DA"] = _component("L_DA", lambda: loss_a2c(batch.D_s, batch.D_t, group_size=batch.n))
        comps["L_DCp"] = _component("L_DCp", lambda: loss_self_training(
            score(q_rep, batch.D_t, params, batch.target_ids, scoring), cfg, batch.groups))
    return comps
