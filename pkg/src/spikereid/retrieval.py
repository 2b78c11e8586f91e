"""Retrieval evaluation: cosine similarity, mAP, and CMC under the
cross-camera protocol (gallery entries sharing both identity and camera with
the query are excluded from its ranking)."""

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RetrievalResult:
    map: float
    cmc: np.ndarray
    aps: list = field(default_factory=list)
    first_hit_ranks: list = field(default_factory=list)
    query_indices: list = field(default_factory=list)
    n_skipped: int = 0

    @property
    def rank1(self):
        return float(self.cmc[0]) if len(self.cmc) else 0.0


def cosine_sim_matrix(queries, gallery):
    """S[i, j] = <q_i, g_j> / (|q_i| |g_j|)."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm vector in cosine similarity")
    return (q / qn[:, None]) @ (g / gn[:, None]).T


def compute_map_cmc(sim, query_ids, query_cams, gallery_ids, gallery_cams):
    """Rank the gallery per query by descending similarity (ties broken by
    gallery index) and aggregate AP and CMC.

    AP is the mean over relevant ranks r of precision@r. Queries without any
    valid cross-camera positive are skipped with a warning and counted in
    ``n_skipped``.
    """
    sim = np.asarray(sim)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    n_q, n_g = sim.shape
    aps, first_hits, kept_queries = [], [], []
    n_skipped = 0
    max_len = 0
    hit_ranks = []
    for i in range(n_q):
        keep = ~((gallery_ids == query_ids[i]) & (gallery_cams == query_cams[i]))
        good = gallery_ids[keep] == query_ids[i]
        if not good.any():
            warnings.warn(f"query {i} has no valid cross-camera positive; skipped")
            n_skipped += 1
            continue
        order = np.argsort(-sim[i, keep], kind="stable")
        rel = good[order]
        ranks = np.nonzero(rel)[0]
        precision = np.cumsum(rel)[ranks] / (ranks + 1.0)
        aps.append(float(precision.mean()))
        first = int(ranks[0])
        first_hits.append(first)
        kept_queries.append(i)
        hit_ranks.append(first)
        max_len = max(max_len, int(keep.sum()))
    if not aps:
        raise ValueError("no query has a valid cross-camera positive")
    cmc = np.zeros(max_len)
    for first in hit_ranks:
        cmc[first:] += 1.0
    cmc /= len(aps)
    return RetrievalResult(map=float(np.mean(aps)), cmc=cmc, aps=aps,
                           first_hit_ranks=first_hits, query_indices=kept_queries,
                           n_skipped=n_skipped)
