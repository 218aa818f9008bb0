"""Retrieval evaluation: feature extraction, distance matrices, CMC and mAP."""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

DISTANCES = ("euclidean", "cosine")
CMC_RANKS = (1, 5, 10, 20)


@dataclass
class RetrievalResult:
    per_query_ap: np.ndarray  # NaN for queries without a valid positive
    cmc: np.ndarray
    mAP: float
    rank1: float
    num_valid: int
    skipped_queries: list = field(default_factory=list)

    def rank(self, k):
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])


@torch.no_grad()
def extract_features(model, images, batch_size=128, normalize=True):
    """Concatenated branch features for a ``(N, 3, H, W)`` tensor or a list of tensors."""
    was_training = model.training
    model.eval()
    chunks = []
    try:
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            if isinstance(batch, (list, tuple)):
                batch = torch.stack(list(batch))
            chunks.append(model.extract(batch).double())
    finally:
        model.train(was_training)
    feats = torch.cat(chunks) if chunks else torch.empty(0, model.cfg.feature_dim, dtype=torch.float64)
    if normalize:
        feats = torch.nn.functional.normalize(feats, dim=1)
    return feats.numpy()


def extract_dataset_features(model, dataset, records, batch_size=128, normalize=True):
    images = [dataset.load(r) for r in records]
    return extract_features(model, images, batch_size=batch_size, normalize=normalize)


def pairwise_distances(query, gallery, metric="euclidean"):
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ValueError(f"feature dims differ: query {query.shape}, gallery {gallery.shape}")
    if metric == "euclidean":
        sq = (query ** 2).sum(1)[:, None] + (gallery ** 2).sum(1)[None, :] - 2.0 * query @ gallery.T
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown distance {metric!r}; expected one of {DISTANCES}")


def evaluate(distances, q_pids, q_cams, g_pids, g_cams):
    """Single-query CMC and mAP.

    For each query the gallery is ranked by (distance, gallery index);
    entries with person id -1 and entries sharing both person and camera id
    with the query are removed before scoring. Queries with no remaining
    positive are left out of both metrics and listed in ``skipped_queries``.
    """
    distances = np.asarray(distances)
    q_pids, q_cams = np.asarray(q_pids), np.asarray(q_cams)
    g_pids, g_cams = np.asarray(g_pids), np.asarray(g_cams)
    num_q, num_g = distances.shape
    if num_q == 0 or num_g == 0:
        raise ValueError("query and gallery sets must be non-empty")
    if len(q_pids) != num_q or len(g_pids) != num_g:
        raise ValueError("id arrays do not match the distance matrix shape")

    aps = np.full(num_q, np.nan)
    cmc_sum = np.zeros(num_g)
    skipped = []
    for i in range(num_q):
        order = np.argsort(distances[i], kind="stable")
        keep = (g_pids[order] != -1) & ~((g_pids[order] == q_pids[i]) & (g_cams[order] == q_cams[i]))
        hits = g_pids[order][keep] == q_pids[i]
        if not hits.any():
            skipped.append(i)
            continue
        hit_ranks = np.flatnonzero(hits)
        precisions = np.arange(1, len(hit_ranks) + 1) / (hit_ranks + 1)
        # exactly rounded sums keep AP independent of summation order
        aps[i] = math.fsum(precisions) / len(precisions)
        cmc_sum[hit_ranks[0]:] += 1
    valid = num_q - len(skipped)
    cmc = cmc_sum / valid if valid else cmc_sum
    mAP = math.fsum(aps[~np.isnan(aps)]) / valid if valid else 0.0
    return RetrievalResult(aps, cmc, mAP, float(cmc[0]) if valid else 0.0, valid, skipped)


def metrics_dict(result, num_query, num_gallery, config_hash=None):
    return {
        "mAP": result.mAP,
        "cmc": [result.rank(k) for k in CMC_RANKS],
        "num_query": int(num_query),
        "num_gallery": int(num_gallery),
        "num_valid_query": int(result.num_valid),
        "config_hash": config_hash,
    }
