"""Brute-force references written term by term from the definitions."""

import math


def a2c_pairwise(Ds, Dt):
    L = Ds.shape[1]
    total = 0.0
    for j in range(L):
        for k in range(L):
            total += (Ds[:, j] @ Ds[:, k] - Dt[:, j] @ Dt[:, k]) ** 2
    return total / L**2


def ref_ndcg(ranked, relevant, k):
    rel = set(relevant)
    if not rel:
        return 0.0
    gains = [1.0 / math.log2(pos + 1) for pos, item in enumerate(ranked, start=1) if pos <= k and item in rel]
    ideal = [1.0 / math.log2(pos + 1) for pos in range(1, min(k, len(rel)) + 1)]
    return math.fsum(gains) / math.fsum(ideal)


def ref_recall(ranked, relevant, k):
    rel = set(relevant)
    return len([x for x in ranked[:k] if x in rel]) / len(rel) if rel else 0.0


def ref_ap(ranked, relevant):
    rel = set(relevant)
    if not rel:
        return 0.0
    terms, found = [], 0
    for pos, item in enumerate(ranked, start=1):
        if item in rel:
            found += 1
            terms.append(found / pos)
    return math.fsum(terms) / len(rel)


