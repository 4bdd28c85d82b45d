"""Interaction logs, splits, popularity slices and per-query training examples.

A log is a set of displayed ``(query, item, label)`` records plus two
attribute tables (one for items, one for queries).  Ids are dense
``0..V-1`` integers internally; the original string ids are kept for output.

Generic log layout (a directory)::

    log.tsv       query_id <TAB> item_id <TAB> label [<TAB> timestamp]   (no header)
    items.tsv     item_id <TAB> field ...      (header row; optional)
    queries.tsv   query_id <TAB> field ...     (header row; optional)

A header name ending in ``[]`` marks a multi-valued field whose cell holds
``|``-separated values (e.g. ``genre[]``).  Labels are click flags; any value
greater than 0 is a positive.  Duplicate ``(query, item)`` records keep the
latest one (largest timestamp, then last line).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, IntegrityError, ParseError

HOT_FRACTION = 0.2
COLD_FRACTION = 0.2


@dataclass
class AttributeTable:
    """Categorical fields for a set of entities (items or queries).

    ``single[f]`` holds one id per entity; ``multi[f]`` holds an id array
    per entity.  ``vocab[f]`` is the number of distinct ids of field ``f``.
    The entity's own id is the single field named ``id_field``.
    """

    id_field: str
    raw_ids: list[str]
    single: dict[str, np.ndarray] = field(default_factory=dict)
    multi: dict[str, list[np.ndarray]] = field(default_factory=dict)
    vocab: dict[str, int] = field(default_factory=dict)
    values: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.id_field not in self.single:
            self.single[self.id_field] = np.arange(len(self.raw_ids), dtype=np.int64)
            self.vocab[self.id_field] = len(self.raw_ids)
            self.values[self.id_field] = list(self.raw_ids)

    def __len__(self) -> int:
        return len(self.raw_ids)

    @property
    def fields(self) -> list[str]:
        return [*self.single, *self.multi]

    def row(self, i: int) -> dict:
        out: dict = {f: int(a[i]) for f, a in self.single.items()}
        out.update({f: lists[i] for f, lists in self.multi.items()})
        return out

    def rows(self, ids: Sequence[int]) -> list[dict]:
        ids = np.asarray(ids, dtype=np.int64)
        cols = {f: a[ids] for f, a in self.single.items()}
        out = [{f: int(c[k]) for f, c in cols.items()} for k in range(ids.size)]
        for f, lists in self.multi.items():
            for k, i in enumerate(ids):
                out[k][f] = lists[i]
        return out

    def with_multi(self, name: str, lists: list[np.ndarray], vocab: int) -> "AttributeTable":
        return replace(self, multi={**self.multi, name: lists}, vocab={**self.vocab, name: vocab})


@dataclass
class InteractionLog:
    query: np.ndarray
    item: np.ndarray
    label: np.ndarray
    timestamp: np.ndarray
    catalog: AttributeTable
    queries: AttributeTable
    similarity_field: str | None = None

    def __len__(self) -> int:
        return int(self.query.size)

    @property
    def num_items(self) -> int:
        return len(self.catalog)

    @property
    def num_queries(self) -> int:
        return len(self.queries)

    def subset(self, idx) -> "InteractionLog":
        idx = np.asarray(idx)
        return replace(self, query=self.query[idx], item=self.item[idx], label=self.label[idx],
                       timestamp=self.timestamp[idx])

    def positives_by_query(self) -> dict[int, np.ndarray]:
        pos = self.label > 0
        return _group(self.query[pos], self.item[pos])

    def displayed_by_query(self) -> dict[int, np.ndarray]:
        return _group(self.query, self.item)


def _group(keys: np.ndarray, vals: np.ndarray) -> dict[int, np.ndarray]:
    if keys.size == 0:
        return {}
    order = np.argsort(keys, kind="stable")
    k, v = keys[order], vals[order]
    cuts = np.flatnonzero(np.diff(k)) + 1
    return {int(kk[0]): vv for kk, vv in zip(np.split(k, cuts), np.split(v, cuts))}


def _vocab(values: Sequence[str]) -> tuple[dict[str, int], list[str]]:
    uniq = sorted(set(values), key=lambda s: (len(s), s) if s.isdigit() else (math.inf, s))
    return {v: i for i, v in enumerate(uniq)}, uniq


def _single_field(cells: list[str]) -> tuple[np.ndarray, int, list[str]]:
    lut, uniq = _vocab(cells)
    return np.array([lut[c] for c in cells], dtype=np.int64), len(uniq), uniq


def _multi_field(cells: list[list[str]]) -> tuple[list[np.ndarray], int, list[str]]:
    lut, uniq = _vocab([v for c in cells for v in c])
    return [np.array([lut[v] for v in c], dtype=np.int64) for c in cells], len(uniq), uniq


# ------------------------------------------------------------------ MovieLens


_YEAR = re.compile(r"\((\d{4})\)\s*$")


def _read_dat(path: Path, n_fields: int) -> list[list[str]]:
    rows = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != n_fields:
                raise ParseError(f"{path.name}:{lineno}: expected {n_fields} '::'-separated fields, got {len(parts)}")
            rows.append(parts)
    return rows


def load_movielens(path) -> InteractionLog:
    """Parse a MovieLens-1M directory (``ratings.dat``, ``users.dat``, ``movies.dat``).

    Ratings above 3 are positives; every rated pair counts as displayed.
    """
    root = Path(path)
    users = _read_dat(root / "users.dat", 5)
    movies = _read_dat(root / "movies.dat", 3)
    ratings = _read_dat(root / "ratings.dat", 4)

    user_ids = [u[0] for u in users]
    movie_ids = [m[0] for m in movies]
    queries = AttributeTable("user", user_ids)
    for name, col in (("gender", 1), ("age", 2), ("occupation", 3)):
        ids, v, vals = _single_field([u[col] for u in users])
        queries.single[name], queries.vocab[name], queries.values[name] = ids, v, vals

    catalog = AttributeTable("movie", movie_ids)
    years = []
    for m in movies:
        hit = _YEAR.search(m[1])
        years.append(hit.group(1) if hit else "unknown")
    ids, v, vals = _single_field(years)
    catalog.single["year"], catalog.vocab["year"], catalog.values["year"] = ids, v, vals
    lists, v, vals = _multi_field([m[2].split("|") if m[2] else [] for m in movies])
    catalog.multi["genres"], catalog.vocab["genres"], catalog.values["genres"] = lists, v, vals

    u_lut = {u: i for i, u in enumerate(user_ids)}
    m_lut = {m: i for i, m in enumerate(movie_ids)}
    q, it, lab, ts = [], [], [], []
    for lineno, (u, m, r, t) in enumerate(ratings, 1):
        if u not in u_lut or m not in m_lut:
            raise IntegrityError(f"ratings.dat:{lineno}: unknown {'user' if u not in u_lut else 'movie'} id {u if u not in u_lut else m}")
        try:
            rating, stamp = float(r), float(t)
        except ValueError as exc:
            raise ParseError(f"ratings.dat:{lineno}: {exc}") from None
        q.append(u_lut[u])
        it.append(m_lut[m])
        lab.append(1 if rating > 3 else 0)
        ts.append(stamp)
    return InteractionLog(np.array(q, dtype=np.int64), np.array(it, dtype=np.int64),
                          np.array(lab, dtype=np.int64), np.array(ts, dtype=np.float64),
                          catalog, queries, similarity_field="genres")


# ---------------------------------------------------------------- generic log


def _read_table(path: Path, id_field: str) -> AttributeTable | None:
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        lines = [l.rstrip("\r\n") for l in fh]
    lines = [l for l in lines if l]
    if not lines:
        return None
    header = lines[0].split("\t")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise ParseError(f"{path.name}:{lineno}: expected {len(header)} tab-separated fields, got {len(parts)}")
        rows.append(parts)
    raw_ids = [r[0] for r in rows]
    if len(set(raw_ids)) != len(raw_ids):
        raise IntegrityError(f"{path.name}: duplicate ids")
    table = AttributeTable(id_field, raw_ids)
    for col, name in enumerate(header[1:], 1):
        if name.endswith("[]"):
            lists, v, vals = _multi_field([[x for x in r[col].split("|") if x] for r in rows])
            key = name[:-2]
            table.multi[key], table.vocab[key], table.values[key] = lists, v, vals
        else:
            ids, v, vals = _single_field([r[col] for r in rows])
            table.single[name], table.vocab[name], table.values[name] = ids, v, vals
    return table


def load_generic_log(path, similarity_field: str | None = None) -> InteractionLog:
    root = Path(path)
    records = []
    log_path = root / "log.tsv" if root.is_dir() else root
    if root.is_file():
        root = root.parent
    with open(log_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise ParseError(f"{log_path.name}:{lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}")
            try:
                label = float(parts[2])
                stamp = float(parts[3]) if len(parts) == 4 else math.nan
            except ValueError as exc:
                raise ParseError(f"{log_path.name}:{lineno}: {exc}") from None
            records.append((parts[0], parts[1], 1 if label > 0 else 0, stamp, lineno))

    catalog = _read_table(root / "items.tsv", "item")
    queries = _read_table(root / "queries.tsv", "query")
    if catalog is None:
        catalog = AttributeTable("item", _vocab([r[1] for r in records])[1])
    if queries is None:
        queries = AttributeTable("query", _vocab([r[0] for r in records])[1])
    i_lut = {v: i for i, v in enumerate(catalog.raw_ids)}
    q_lut = {v: i for i, v in enumerate(queries.raw_ids)}

    latest: dict[tuple[int, int], tuple] = {}
    for qid, iid, label, stamp, lineno in records:
        if qid not in q_lut:
            raise IntegrityError(f"{log_path.name}:{lineno}: unknown query id {qid!r}")
        if iid not in i_lut:
            raise IntegrityError(f"{log_path.name}:{lineno}: unknown item id {iid!r}")
        key = (q_lut[qid], i_lut[iid])
        rank = (-math.inf if math.isnan(stamp) else stamp, lineno)
        prev = latest.get(key)
        if prev is None or rank >= prev[0]:
            latest[key] = (rank, label, stamp)
    keys = sorted(latest, key=lambda k: latest[k][0][1])
    q = np.array([k[0] for k in keys], dtype=np.int64)
    it = np.array([k[1] for k in keys], dtype=np.int64)
    lab = np.array([latest[k][1] for k in keys], dtype=np.int64)
    ts = np.array([latest[k][2] for k in keys], dtype=np.float64)

    if similarity_field is None:
        similarity_field = next(iter(catalog.multi), None) or next(
            (f for f in catalog.single if f != catalog.id_field), None)
    return InteractionLog(q, it, lab, ts, catalog, queries, similarity_field)


def write_generic_log(path, log: InteractionLog) -> None:
    """Write ``log`` in the generic directory layout (inverse of ``load_generic_log``)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "log.tsv", "w", encoding="utf-8") as fh:
        for q, i, y, t in zip(log.query, log.item, log.label, log.timestamp):
            stamp = "" if math.isnan(t) else f"\t{int(t) if float(t).is_integer() else t}"
            fh.write(f"{log.queries.raw_ids[q]}\t{log.catalog.raw_ids[i]}\t{int(y)}{stamp}\n")
    for name, table in (("items.tsv", log.catalog), ("queries.tsv", log.queries)):
        extra_single = [f for f in table.single if f != table.id_field]
        with open(root / name, "w", encoding="utf-8") as fh:
            fh.write("\t".join([table.id_field, *extra_single, *(f + "[]" for f in table.multi)]) + "\n")
            for e in range(len(table)):
                cells = [table.raw_ids[e]]
                cells += [table.values[f][table.single[f][e]] for f in extra_single]
                cells += ["|".join(table.values[f][v] for v in table.multi[f][e]) for f in table.multi]
                fh.write("\t".join(cells) + "\n")


# ----------------------------------------------------------------- splitting


def split_records(log: InteractionLog, ratios: Sequence[float] = (8, 1, 1), seed: int = 0):
    """Random record-level partition into train / validation / test."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.size != 3 or np.any(r <= 0):
        raise DataError(f"ratios must be three positive numbers, got {ratios}")
    n = len(log)
    perm = np.random.default_rng(seed).permutation(n)
    c1 = int(round(n * r[0] / r.sum()))
    c2 = int(round(n * (r[0] + r[1]) / r.sum()))
    return log.subset(np.sort(perm[:c1])), log.subset(np.sort(perm[c1:c2])), log.subset(np.sort(perm[c2:]))


def cold_start_split(test: InteractionLog, train: InteractionLog, seed: int = 0, fraction: float = COLD_FRACTION):
    """Pick ``fraction`` of test records; drop every training record on their items.

    Returns ``(cold_test, reduced_train)``.
    """
    n_pick = int(round(fraction * len(test)))
    picked = np.sort(np.random.default_rng(seed).choice(len(test), size=n_pick, replace=False))
    cold = test.subset(picked)
    keep = ~np.isin(train.item, np.unique(cold.item))
    return cold, train.subset(np.flatnonzero(keep))


# --------------------------------------------------------- display frequency


@dataclass
class DisplayFrequencyIndex:
    counts: np.ndarray
    order: np.ndarray
    hot: np.ndarray

    @property
    def long_tail(self) -> np.ndarray:
        return ~self.hot

    def slice_mask(self, name: str) -> np.ndarray:
        if name == "hot":
            return self.hot
        if name == "long-tail":
            return ~self.hot
        if name == "entire":
            return np.ones_like(self.hot)
        raise ValueError(f"unknown slice {name!r}")


def build_display_frequency(train: InteractionLog, hot_fraction: float = HOT_FRACTION) -> DisplayFrequencyIndex:
    """Hot items are the top ``ceil(hot_fraction * #displayed items)`` by training display count.

    Ties are broken by ascending item id; never-displayed items are long-tail.
    """
    if len(train) == 0:
        raise DataError("display frequency needs a non-empty training split")
    counts = np.bincount(train.item, minlength=train.num_items)
    order = np.lexsort((np.arange(counts.size), -counts))
    n_hot = math.ceil(hot_fraction * int(np.count_nonzero(counts)))
    hot = np.zeros(counts.size, dtype=bool)
    hot[order[:n_hot]] = True
    return DisplayFrequencyIndex(counts, order, hot)


# ------------------------------------------------------------ training data


def attach_behavior(queries: AttributeTable, train: InteractionLog, max_len: int = 50,
                    name: str = "behavior") -> AttributeTable:
    """Add each query's most recent training positives as a multi-valued field."""
    pos = np.flatnonzero(train.label > 0)
    stamp = np.nan_to_num(train.timestamp[pos], nan=-np.inf)
    order = pos[np.lexsort((pos, stamp, train.query[pos]))]
    by_q = _group(train.query[order], train.item[order])
    empty = np.zeros(0, dtype=np.int64)
    lists = [by_q.get(q, empty)[-max_len:] for q in range(len(queries))]
    return queries.with_multi(name, lists, train.num_items)


@dataclass
class TrainingExample:
    query: int
    source_items: np.ndarray
    labels: np.ndarray
    target_items: np.ndarray


class TargetSampler:
    """Draws non-displayed items that share an attribute value with displayed ones."""

    def __init__(self, catalog: AttributeTable, field_name: str | None):
        self.num_items = len(catalog)
        self.incidence = None
        if field_name is not None:
            if field_name in catalog.multi:
                lists = catalog.multi[field_name]
            elif field_name in catalog.single:
                lists = [np.array([v]) for v in catalog.single[field_name]]
            else:
                raise DataError(f"catalog has no field {field_name!r}")
            inc = np.zeros((self.num_items, catalog.vocab[field_name]), dtype=bool)
            for i, vals in enumerate(lists):
                inc[i, vals] = True
            self.incidence = inc

    def similar_pool(self, seed_items: np.ndarray, displayed: np.ndarray) -> np.ndarray:
        if self.incidence is None:
            mask = np.zeros(self.num_items, dtype=bool)
        else:
            wanted = self.incidence[np.asarray(seed_items)].any(axis=0)
            mask = self.incidence[:, wanted].any(axis=1)
        mask[displayed] = False
        return np.flatnonzero(mask)

    def sample(self, seed_items, displayed, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` distinct non-displayed items, similar ones first, uniform fallback."""
        displayed = np.asarray(displayed, dtype=np.int64)
        free = self.num_items - np.unique(displayed).size
        if free < n:
            raise DataError(f"only {free} non-displayed items available, need {n}")
        pool = self.similar_pool(seed_items, displayed)
        if pool.size >= n:
            return rng.choice(pool, size=n, replace=False)
        rest = np.ones(self.num_items, dtype=bool)
        rest[displayed] = False
        rest[pool] = False
        pad = rng.choice(np.flatnonzero(rest), size=n - pool.size, replace=False)
        return np.concatenate([rng.permutation(pool), pad])


def sample_targets(displayed, catalog: AttributeTable, n: int, seed: int, field_name: str | None,
                   seed_items=None) -> np.ndarray:
    seed_items = displayed if seed_items is None else seed_items
    return TargetSampler(catalog, field_name).sample(seed_items, displayed, n, np.random.default_rng(seed))


def source_groups(train: InteractionLog, n: int, seed: int) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Split each query's displayed records into groups of exactly ``n``.

    The last partial group is padded by sampling (with replacement) among
    that query's displayed records.  Depends on ``seed`` only, not the epoch.
    """
    out = []
    by_q = _group(train.query, np.arange(len(train)))
    for q in sorted(by_q):
        recs = by_q[q]
        rng = np.random.default_rng([seed, q])
        recs = recs[rng.permutation(recs.size)]
        for start in range(0, recs.size, n):
            chunk = recs[start:start + n]
            if chunk.size < n:
                chunk = np.concatenate([chunk, rng.choice(recs, size=n - chunk.size, replace=True)])
            out.append((q, train.item[chunk], train.label[chunk]))
    return out


def make_epoch(train: InteractionLog, n: int, seed: int, epoch: int,
               groups: list | None = None, sampler: TargetSampler | None = None) -> list[TrainingExample]:
    """One example per (query, group of ``n`` displayed items) with ``n`` fresh targets."""
    groups = source_groups(train, n, seed) if groups is None else groups
    sampler = sampler or TargetSampler(train.catalog, train.similarity_field)
    displayed = train.displayed_by_query()
    out = []
    for k, (q, items, labels) in enumerate(groups):
        rng = np.random.default_rng([seed, epoch, k])
        targets = sampler.sample(items, displayed[q], n, rng)
        out.append(TrainingExample(q, items, labels, targets))
    return out


def iter_batches(examples: list[TrainingExample], batch_size: int, seed: int, epoch: int) -> Iterator[list[TrainingExample]]:
    order = np.random.default_rng([seed, epoch, 7919]).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]
