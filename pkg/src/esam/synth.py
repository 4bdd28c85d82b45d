"""Synthetic exposure-biased interaction world with a known relevance oracle.

Queries and items get latent factors in ``R^k``.  Item factors are drawn
around ``n_genres`` cluster centers and each item's genre is its nearest
center.  A query's relevant items are its top ``relevant_fraction`` of the
catalog by factor dot product.  Exposure ignores relevance entirely: items
have power-law popularity weights ``rank**-alpha`` over a random ranking,
and each query is shown items drawn in proportion to those weights.  Clicks
are the relevance flags of displayed items, optionally flipped with
probability ``label_noise``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import AttributeTable, InteractionLog, write_generic_log


@dataclass(frozen=True)
class WorldConfig:
    num_queries: int = 2000
    num_items: int = 5000
    k: int = 8
    alpha: float = 1.5
    n_genres: int = 20
    cluster_spread: float = 1.0
    relevant_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_queries < 1 or self.num_items < 1 or self.k < 1 or self.n_genres < 1:
            raise ValueError("world sizes must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.relevant_fraction <= 1:
            raise ValueError("relevant_fraction must be in (0, 1]")

    @property
    def relevant_per_query(self) -> int:
        return max(1, int(round(self.relevant_fraction * self.num_items)))


@dataclass
class SynthWorld:
    config: WorldConfig
    query_factors: np.ndarray
    item_factors: np.ndarray
    centers: np.ndarray
    genre: np.ndarray
    query_segment: np.ndarray
    popularity: np.ndarray
    relevant: np.ndarray

    def true_scores(self, queries=None) -> np.ndarray:
        U = self.query_factors if queries is None else self.query_factors[np.asarray(queries)]
        return U @ self.item_factors.T

    def relevance_mask(self) -> np.ndarray:
        mask = np.zeros((self.config.num_queries, self.config.num_items), dtype=bool)
        np.put_along_axis(mask, self.relevant, True, axis=1)
        return mask

    def relevant_sets(self) -> dict[int, np.ndarray]:
        return {q: np.sort(r) for q, r in enumerate(self.relevant)}


def _nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points**2).sum(1)[:, None] - 2 * points @ centers.T + (centers**2).sum(1)[None, :]
    return np.argmin(d, axis=1)


def top_by_score(scores: np.ndarray, r: int) -> np.ndarray:
    """Column ids of each row's ``r`` largest entries, best first (ties: lower id)."""
    n = scores.shape[1]
    idx = np.argpartition(-scores, r - 1, axis=1)[:, :r] if r < n else np.tile(np.arange(n), (scores.shape[0], 1))
    vals = np.take_along_axis(scores, idx, axis=1)
    order = np.lexsort((idx, -vals), axis=1)
    return np.take_along_axis(idx, order, axis=1)


def popularity_weights(num_items: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Normalized ``rank**-alpha`` weights over a random item ranking."""
    ranks = rng.permutation(num_items) + 1.0
    w = ranks**-alpha
    return w / w.sum()


def generate_world(num_queries: int = 2000, num_items: int = 5000, k: int = 8, alpha: float = 1.5,
                   seed: int = 0, **kw) -> SynthWorld:
    cfg = WorldConfig(num_queries, num_items, k, alpha, seed=seed, **kw)
    rng = np.random.default_rng([cfg.seed, 0])
    centers = rng.standard_normal((cfg.n_genres, k))
    raw_genre = rng.integers(0, cfg.n_genres, size=num_items)
    items = centers[raw_genre] + cfg.cluster_spread * rng.standard_normal((num_items, k))
    queries = rng.standard_normal((num_queries, k))
    popularity = popularity_weights(num_items, alpha, np.random.default_rng([cfg.seed, 1]))
    relevant = top_by_score(queries @ items.T, cfg.relevant_per_query)
    return SynthWorld(cfg, queries, items, centers, _nearest(items, centers),
                      _nearest(queries, centers), popularity, relevant)


def draw_exposures(popularity: np.ndarray, size, rng: np.random.Generator) -> np.ndarray:
    """Independent item draws with ``P(item) = popularity[item]``."""
    cdf = np.cumsum(popularity)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), popularity.size - 1)


def emit_log(world: SynthWorld, impressions: int = 300, seed: int = 0, label_noise: float = 0.0) -> InteractionLog:
    """Display log of ``impressions`` popularity-weighted draws per query.

    Repeat draws of the same item for one query collapse into a single
    displayed record (the latest impression's timestamp is kept).
    """
    cfg = world.config
    rng = np.random.default_rng([seed, 2])
    draws = draw_exposures(world.popularity, (cfg.num_queries, impressions), rng)
    q = np.repeat(np.arange(cfg.num_queries), impressions)
    it = draws.reshape(-1)
    t = np.arange(q.size, dtype=np.float64)
    # keep the last impression of each (query, item)
    key = q * cfg.num_items + it
    _, last_rev = np.unique(key[::-1], return_index=True)
    keep = np.sort(q.size - 1 - last_rev)
    q, it, t = q[keep], it[keep], t[keep]
    label = world.relevance_mask()[q, it].astype(np.int64)
    if label_noise > 0:
        flip = np.random.default_rng([seed, 3]).random(label.size) < label_noise
        label = np.where(flip, 1 - label, label)

    catalog = AttributeTable("item", [f"i{i}" for i in range(cfg.num_items)])
    catalog.single["genre"] = world.genre.astype(np.int64)
    catalog.vocab["genre"] = cfg.n_genres
    catalog.values["genre"] = [f"g{g}" for g in range(cfg.n_genres)]
    queries = AttributeTable("query", [f"q{i}" for i in range(cfg.num_queries)])
    queries.single["segment"] = world.query_segment.astype(np.int64)
    queries.vocab["segment"] = cfg.n_genres
    queries.values["segment"] = [f"s{g}" for g in range(cfg.n_genres)]
    return InteractionLog(q, it, label, t, catalog, queries, similarity_field="genre")


def write_world(out, world: SynthWorld, log: InteractionLog, extra: dict | None = None) -> Path:
    """Generic-format log plus ``relevance.tsv`` (query, item, rank) and ``world.json``."""
    out = Path(out)
    write_generic_log(out, log)
    with open(out / "relevance.tsv", "w", encoding="utf-8") as fh:
        for q, items in enumerate(world.relevant):
            for r, i in enumerate(items):
                fh.write(f"{log.queries.raw_ids[q]}\t{log.catalog.raw_ids[i]}\t{r + 1}\n")
    meta = {"world": asdict(world.config), **(extra or {})}
    (out / "world.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def read_relevance(path, log: InteractionLog) -> dict[int, np.ndarray]:
    """Load ``relevance.tsv`` into ``query id -> sorted item ids`` using ``log``'s id maps."""
    q_lut = {r: i for i, r in enumerate(log.queries.raw_ids)}
    i_lut = {r: i for i, r in enumerate(log.catalog.raw_ids)}
    out: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 2:
                out.setdefault(q_lut[parts[0]], []).append(i_lut[parts[1]])
    return {q: np.sort(np.array(v, dtype=np.int64)) for q, v in out.items()}
