"""
An exposure-biased world with known relevance
=============================================

Queries and items live in a shared latent space.  A power law decides
which items get shown, independent of relevance, so the display log
under-represents most of the catalog.
"""

import numpy as np

from esam.data import build_display_frequency, split_records
from esam.evaluation import random_ndcg_baseline, sliced_metrics
from esam.synth import emit_log, generate_world

world = generate_world(num_queries=300, num_items=1500, alpha=1.5, seed=0)
log = emit_log(world, impressions=100, seed=0)
print(f"{len(log)} displayed records, {int(log.label.sum())} clicks")

# How concentrated is exposure?  Count displays per item.
counts = np.bincount(log.item, minlength=log.num_items)
top = np.sort(counts)[::-1]
share = top[: log.num_items // 5].sum() / top.sum()
print(f"top 20% of items take {share:.1%} of displays; {np.mean(counts == 0):.1%} never shown")

# Relevance is spread evenly, so most relevant items are in the long tail.
train, val, test = split_records(log, seed=0)
freq = build_display_frequency(train)
mask = world.relevance_mask()
print(f"relevant pairs on long-tail items: {mask[:, freq.long_tail].sum() / mask.sum():.1%}")

# Scoring with the true latent dot product is the ceiling, random the floor.
relevant = world.relevant_sets()
queries = np.arange(log.num_queries)
oracle = sliced_metrics(world.true_scores(), queries, relevant, train.positives_by_query(), freq.hot, k=20)
rng = np.random.default_rng(1)
rand = sliced_metrics(rng.random((log.num_queries, log.num_items)), queries, relevant,
                      train.positives_by_query(), freq.hot, k=20)
print("oracle scores\n" + oracle.report())
print("random scores\n" + rand.report())
n_cand = log.num_items - np.mean([len(v) for v in train.positives_by_query().values()])
print("closed-form random NDCG@20:", round(random_ndcg_baseline(int(n_cand), world.config.relevant_per_query, 20), 4))
