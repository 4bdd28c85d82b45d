"""Ranking metrics sliced by item popularity, and feature-space diagnostics.

Relevance is binary.  Rankings are by descending score with ties broken by
ascending item id, so metric values never depend on candidate input order.
A slice restricts both the candidate pool and the relevant set; per-slice
means are taken over the queries that have at least one relevant candidate
in that slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DisplayFrequencyIndex, InteractionLog, _group
from .errors import DataError, DimensionError
from .losses import loss_a2c
from .model import TowerConfig, embed_items, embed_queries, score_matrix, to_probability

SLICES = ("hot", "long-tail", "entire")
METRICS = ("ndcg", "recall", "map")
DEFAULT_K = 20


# ------------------------------------------------------------------ metrics


def _hits(ranked: Sequence[int], relevant) -> np.ndarray:
    return np.isin(np.asarray(ranked, dtype=np.int64), np.asarray(list(relevant), dtype=np.int64))


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")


def ndcg_from_hits(hits: np.ndarray, n_relevant: int, k: int) -> float:
    _check_k(k)
    if n_relevant == 0:
        return 0.0
    dcg = math.fsum(1.0 / math.log2(i + 2) for i in np.flatnonzero(hits[:k]))
    idcg = math.fsum(1.0 / math.log2(i + 2) for i in range(min(k, n_relevant)))
    return dcg / idcg


def recall_from_hits(hits: np.ndarray, n_relevant: int, k: int) -> float:
    _check_k(k)
    return 0.0 if n_relevant == 0 else int(np.count_nonzero(hits[:k])) / n_relevant


def ap_from_hits(hits: np.ndarray, n_relevant: int) -> float:
    if n_relevant == 0:
        return 0.0
    pos = np.flatnonzero(hits)
    return math.fsum((j + 1) / (p + 1) for j, p in enumerate(pos)) / n_relevant


def ndcg_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    """Binary-gain NDCG; ``relevant`` counts toward the ideal even if absent from ``ranked``."""
    return ndcg_from_hits(_hits(ranked, relevant), len(set(relevant)), k)


def recall_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    return recall_from_hits(_hits(ranked, relevant), len(set(relevant)), k)


def average_precision(ranked: Sequence[int], relevant) -> float:
    return ap_from_hits(_hits(ranked, relevant), len(set(relevant)))


def map_metric(rankings: Sequence[tuple[Sequence[int], object]]) -> float:
    """Mean average precision over ``(ranked, relevant)`` pairs."""
    if not rankings:
        return 0.0
    return math.fsum(average_precision(r, rel) for r, rel in rankings) / len(rankings)


def rank_items(scores: np.ndarray, item_ids: np.ndarray | None = None) -> np.ndarray:
    """Item ids sorted by descending score, ascending id on ties."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    ids = np.arange(scores.size) if item_ids is None else np.asarray(item_ids).reshape(-1)
    return ids[np.lexsort((ids, -scores))]


def random_ndcg_baseline(n_candidates: int, n_relevant: int, k: int) -> float:
    """Expected NDCG@k of a uniformly random ranking."""
    if n_relevant == 0 or n_candidates == 0:
        return 0.0
    p = n_relevant / n_candidates
    k_eff = min(k, n_candidates)
    dcg = math.fsum(p / math.log2(i + 2) for i in range(k_eff))
    idcg = math.fsum(1.0 / math.log2(i + 2) for i in range(min(k, n_relevant)))
    return dcg / idcg


# ----------------------------------------------------------- sliced metrics


@dataclass
class SlicedMetrics:
    k: int
    queries: dict[str, np.ndarray] = field(default_factory=dict)
    per_query: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    n_relevant: dict[str, np.ndarray] = field(default_factory=dict)

    def mean(self, slice_name: str, metric: str) -> float:
        vals = self.per_query[slice_name][metric]
        return math.fsum(vals.tolist()) / vals.size if vals.size else 0.0

    @property
    def means(self) -> dict[str, dict[str, float]]:
        return {s: {m: self.mean(s, m) for m in METRICS} for s in SLICES}

    def report(self) -> str:
        k = self.k
        lines = [f"slice\tNDCG@{k}\tRecall@{k}\tMAP\tqueries"]
        for s in SLICES:
            m = self.means[s]
            lines.append(f"{s}\t{m['ndcg']:.6f}\t{m['recall']:.6f}\t{m['map']:.6f}\t{self.queries[s].size}")
        return "\n".join(lines) + "\n"

    def per_query_table(self) -> str:
        lines = ["slice\tquery\tn_relevant\tndcg\trecall\tmap"]
        for s in SLICES:
            pq = self.per_query[s]
            for j, q in enumerate(self.queries[s]):
                lines.append(f"{s}\t{q}\t{self.n_relevant[s][j]}\t{pq['ndcg'][j]:.10f}\t{pq['recall'][j]:.10f}\t{pq['map'][j]:.10f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "metrics") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.tsv").write_text(self.report())
        (out / f"{stem}_per_query.tsv").write_text(self.per_query_table())


def sliced_metrics(scores: np.ndarray, queries: Sequence[int], relevant: Mapping[int, np.ndarray],
                   exclude: Mapping[int, np.ndarray], hot: np.ndarray, k: int = DEFAULT_K,
                   candidates: np.ndarray | None = None) -> SlicedMetrics:
    """Metrics for a precomputed ``len(queries) x num_items`` score matrix.

    Row ``j`` of ``scores`` belongs to ``queries[j]``.  Each query's candidate
    pool is the catalog (or the ``candidates`` mask) minus ``exclude[q]``;
    its relevant set is ``relevant[q]`` intersected with the pool.
    """
    _check_k(k)
    num_items = hot.size
    if scores.shape != (len(queries), num_items):
        raise DimensionError(f"score matrix {scores.shape} vs {len(queries)} queries x {num_items} items")
    masks = {"hot": hot, "long-tail": ~hot, "entire": np.ones(num_items, dtype=bool)}
    acc = {s: {"q": [], "n": [], **{m: [] for m in METRICS}} for s in SLICES}
    empty = np.zeros(0, dtype=np.int64)
    base_pool = np.ones(num_items, dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
    if base_pool.shape != (num_items,):
        raise DimensionError(f"candidate mask {base_pool.shape} vs {num_items} items")
    for j, q in enumerate(queries):
        pool = base_pool.copy()
        pool[exclude.get(q, empty)] = False
        if not pool.any():
            raise DataError(f"query {q}: empty candidate pool")
        is_rel = np.zeros(num_items, dtype=bool)
        is_rel[relevant.get(q, empty)] = True
        is_rel &= pool
        order = rank_items(scores[j])
        order = order[pool[order]]
        for s in SLICES:
            ranked = order[masks[s][order]]
            hits = is_rel[ranked]
            n_rel = int(hits.sum())
            if n_rel == 0:
                continue
            a = acc[s]
            a["q"].append(q)
            a["n"].append(n_rel)
            a["ndcg"].append(ndcg_from_hits(hits, n_rel, k))
            a["recall"].append(recall_from_hits(hits, n_rel, k))
            a["map"].append(ap_from_hits(hits, n_rel))
    out = SlicedMetrics(k)
    for s in SLICES:
        out.queries[s] = np.array(acc[s]["q"], dtype=np.int64)
        out.n_relevant[s] = np.array(acc[s]["n"], dtype=np.int64)
        out.per_query[s] = {m: np.array(acc[s][m], dtype=np.float64) for m in METRICS}
    return out


# ---------------------------------------------------------- model plumbing


def item_features(params, tower: TowerConfig, item_rows: Sequence[dict], chunk: int = 2048) -> np.ndarray:
    parts = [embed_items(item_rows[s:s + chunk], params, tower).values for s in range(0, len(item_rows), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, tower.out_dim))


def query_features(params, tower: TowerConfig, query_rows: Sequence[dict], chunk: int = 2048) -> np.ndarray:
    parts = [embed_queries(query_rows[s:s + chunk], params, tower).values for s in range(0, len(query_rows), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, tower.out_dim))


def split_relevance(split: InteractionLog) -> dict[int, np.ndarray]:
    """Positives of ``split`` per query."""
    return {q: np.unique(v) for q, v in split.positives_by_query().items()}


def evaluate_sliced(params, tower: TowerConfig, scoring: str, split: InteractionLog, train: InteractionLog,
                    freq: DisplayFrequencyIndex, k: int = DEFAULT_K,
                    relevant: Mapping[int, np.ndarray] | None = None,
                    item_rows: Sequence[dict] | None = None, query_rows: Sequence[dict] | None = None,
                    candidates: np.ndarray | None = None) -> SlicedMetrics:
    """Rank the full catalog (minus each query's training positives) for every query in ``split``.

    ``relevant`` defaults to the positives in ``split``; when given (e.g. an
    oracle relevance table), it is used for the queries that appear in
    ``split``.  ``candidates`` optionally narrows the catalog to a boolean
    item mask (the cold items under the cold-start protocol).
    """
    if relevant is None:
        relevant = split_relevance(split)
    pool = None if candidates is None else np.asarray(candidates, dtype=bool)
    queries = np.unique(split.query)
    queries = np.array([q for q in queries
                        if len(relevant.get(int(q), ())) > 0
                        and (pool is None or pool[relevant[int(q)]].any())], dtype=np.int64)
    item_rows = item_rows if item_rows is not None else split.catalog.rows(range(split.num_items))
    query_rows = query_rows if query_rows is not None else split.queries.rows(range(split.num_queries))
    D = item_features(params, tower, item_rows)
    Q = query_features(params, tower, [query_rows[q] for q in queries])
    bias = params["item_bias"].values.reshape(-1) if scoring == "dot_sigmoid" else None
    scores = score_matrix(Q, D, bias, scoring) if queries.size else np.zeros((0, D.shape[0]))
    exclude = {q: np.unique(v) for q, v in train.positives_by_query().items()}
    return sliced_metrics(scores, [int(q) for q in queries], relevant, exclude, freq.hot, k, candidates=pool)


# -------------------------------------------------------------- diagnostics


def domain_distance(D_src_a: np.ndarray, D_src_b: np.ndarray, D_tgt_a: np.ndarray, D_tgt_b: np.ndarray) -> tuple[float, float, float]:
    """Alignment loss between feature batches: (source-source, target-target, source-target)."""
    shapes = {np.shape(x) for x in (D_src_a, D_src_b, D_tgt_a, D_tgt_b)}
    if len(shapes) != 1:
        raise DimensionError(f"feature batches must share one shape, got {sorted(shapes)}")
    f = lambda a, b: loss_a2c(T.constant(a), T.constant(b)).item()
    return f(D_src_a, D_src_b), f(D_tgt_a, D_tgt_b), f(D_src_a, D_tgt_a)


def domain_batches(train: InteractionLog, size: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Two disjoint displayed-record batches and two disjoint never-displayed item batches.

    Source batches are drawn from training records, so they follow the
    exposure distribution; target batches are uniform over items without
    any training display.
    """
    rng = np.random.default_rng([seed, 11])
    if len(train) < 2 * size:
        raise DataError(f"need {2 * size} training records for two source batches, have {len(train)}")
    rec = rng.choice(len(train), size=2 * size, replace=False)
    src = train.item[rec]
    never = np.flatnonzero(np.bincount(train.item, minlength=train.num_items) == 0)
    if never.size < 2 * size:
        raise DataError(f"need {2 * size} never-displayed items for two target batches, have {never.size}")
    tgt = rng.choice(never, size=2 * size, replace=False)
    return src[:size], src[size:], tgt[:size], tgt[size:]


def score_histograms(params, tower: TowerConfig, scoring: str, train: InteractionLog, item_rows, query_rows,
                     pairs: int = 500, bins: int = 20, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bin counts of probability scores for source pairs and target pairs.

    Source pairs are random training records; target pairs join a random
    training query with a random item it was never shown.
    """
    rng = np.random.default_rng([seed, 12])
    rec = rng.choice(len(train), size=pairs, replace=len(train) < pairs)
    src_q, src_i = train.query[rec], train.item[rec]
    displayed = train.displayed_by_query()
    tgt_q = train.query[rng.choice(len(train), size=pairs, replace=True)]
    tgt_i = np.empty(pairs, dtype=np.int64)
    for j, q in enumerate(tgt_q):
        free = np.setdiff1d(np.arange(train.num_items), displayed[int(q)], assume_unique=False)
        tgt_i[j] = rng.choice(free)
    item_bias = params["item_bias"].values.reshape(-1)

    def probs(qs, its):
        Q = query_features(params, tower, [query_rows[q] for q in qs])
        D = item_features(params, tower, [item_rows[i] for i in its])
        if scoring == "dot_sigmoid":
            raw = (Q * D).sum(1) + item_bias[its]
            return 1.0 / (1.0 + np.exp(-raw))
        qn = Q / np.linalg.norm(Q, axis=1, keepdims=True).clip(T.EPS_NORM)
        dn = D / np.linalg.norm(D, axis=1, keepdims=True).clip(T.EPS_NORM)
        return to_probability(T.constant((qn * dn).sum(1, keepdims=True)), scoring).values.reshape(-1)

    edges = np.linspace(0.0, 1.0, bins + 1)
    h_src = np.histogram(np.clip(probs(src_q, src_i), 0, 1), bins=edges)[0]
    h_tgt = np.histogram(np.clip(probs(tgt_q, tgt_i), 0, 1), bins=edges)[0]
    return edges, h_src, h_tgt


def group_similarity(features: np.ndarray, category: np.ndarray, group_size: int = 500, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity between per-category centers of two disjoint item groups.

    Items of each category are shuffled and split in half (at most
    ``group_size`` per half); entry ``[a, b]`` compares category ``a``'s first
    half with category ``b``'s second half.  Categories with fewer than two
    items are skipped.  Returns ``(categories, matrix)``.
    """
    rng = np.random.default_rng([seed, 13])
    cats, first, second = [], [], []
    for c in np.unique(category):
        members = rng.permutation(np.flatnonzero(category == c))
        if members.size < 2:
            continue
        half = min(group_size, members.size // 2)
        cats.append(int(c))
        first.append(features[members[:half]].mean(0))
        second.append(features[members[half:2 * half]].mean(0))
    A = np.array(first)
    B = np.array(second)
    if not cats:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
    A = A / np.linalg.norm(A, axis=1, keepdims=True).clip(T.EPS_NORM)
    B = B / np.linalg.norm(B, axis=1, keepdims=True).clip(T.EPS_NORM)
    return np.array(cats, dtype=np.int64), A @ B.T


def export_diagnostics(params, tower: TowerConfig, scoring: str, train: InteractionLog, out_dir,
                       category_field: str | None = None, seed: int = 0, batch_size: int = 500,
                       dump_items: int = 2000, query_rows=None, item_rows=None) -> dict[str, Path]:
    """Write the four diagnostic tables and return their paths.

    ``domain_distance.tsv``, ``score_histogram.tsv``,
    ``similarity_matrix.tsv`` and ``item_features.tsv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    item_rows = item_rows if item_rows is not None else train.catalog.rows(range(train.num_items))
    query_rows = query_rows if query_rows is not None else train.queries.rows(range(train.num_queries))
    D = item_features(params, tower, item_rows)
    paths = {}

    sa, sb, ta, tb = domain_batches(train, min(batch_size, len(train) // 2,
                                               int((np.bincount(train.item, minlength=train.num_items) == 0).sum()) // 2),
                                    seed)
    dd = domain_distance(D[sa], D[sb], D[ta], D[tb])
    paths["domain_distance"] = out / "domain_distance.tsv"
    paths["domain_distance"].write_text("source_source\ttarget_target\tsource_target\n" + "\t".join(f"{x:.10g}" for x in dd) + "\n")

    edges, hs, ht = score_histograms(params, tower, scoring, train, item_rows, query_rows, seed=seed)
    lines = ["bin_lo\tbin_hi\tsource\ttarget"]
    lines += [f"{edges[b]:.2f}\t{edges[b + 1]:.2f}\t{hs[b]}\t{ht[b]}" for b in range(hs.size)]
    paths["score_histogram"] = out / "score_histogram.tsv"
    paths["score_histogram"].write_text("\n".join(lines) + "\n")

    field_name = category_field or train.similarity_field
    if field_name in train.catalog.single:
        category = train.catalog.single[field_name]
    elif field_name in train.catalog.multi:
        category = np.array([l[0] if l.size else -1 for l in train.catalog.multi[field_name]])
    else:
        category = np.zeros(train.num_items, dtype=np.int64)
    cats, sim = group_similarity(D, category, seed=seed)
    names = train.catalog.values.get(field_name, [])
    label = lambda c: names[c] if 0 <= c < len(names) else str(c)
    lines = ["category\t" + "\t".join(label(c) for c in cats)]
    lines += [label(c) + "\t" + "\t".join(f"{x:.8f}" for x in row) for c, row in zip(cats, sim)]
    paths["similarity_matrix"] = out / "similarity_matrix.tsv"
    paths["similarity_matrix"].write_text("\n".join(lines) + "\n")

    rng = np.random.default_rng([seed, 14])
    pick = np.sort(rng.choice(train.num_items, size=min(dump_items, train.num_items), replace=False))
    shown = np.bincount(train.item, minlength=train.num_items) > 0
    lines = ["item\tdomain\t" + "\t".join(f"f{j}" for j in range(D.shape[1]))]
    lines += [f"{train.catalog.raw_ids[i]}\t{'source' if shown[i] else 'target'}\t" + "\t".join(f"{x:.8g}" for x in D[i]) for i in pick]
    paths["item_features"] = out / "item_features.tsv"
    paths["item_features"].write_text("\n".join(lines) + "\n")
    return paths
