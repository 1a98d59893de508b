"""Evaluation harness: accuracy, fairness, and diversity of top-k lists.

All metrics run on hard ranked lists built from a trained model, with train
and validation positives excluded from the candidates and test positives as
the relevance sets. Smooth approximations are a training-time device only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import TEST, TRAIN, VAL, GroupMaskSet, InteractionDataset
from .model import FactorModel
from .objectives import consumer_group_fairness

METRIC_COLUMNS = ("model", "k", "recall", "ndcg", "disparity_u", "disparity_i",
                  "gini", "popularity_rate", "diversity")


@dataclass
class RecommendationRun:
    """Top-k lists for every evaluated user plus their test relevance sets."""

    k: int
    user_ids: np.ndarray
    lists: np.ndarray
    relevance: list

    def __post_init__(self):
        if self.lists.shape != (self.user_ids.shape[0], self.k):
            raise ValueError("lists must be (num_users, k)")


def build_recommendations(model: FactorModel, dataset: InteractionDataset,
                          k: int) -> RecommendationRun:
    """Rank the catalog per user and keep the top k unseen items.

    Users without test positives are excluded from evaluation. Ties are broken
    by item id so reruns are byte-stable.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = model.user_embeddings @ model.item_embeddings.T
    seen = (dataset.split == TRAIN) | (dataset.split == VAL)
    scores[dataset.users[seen], dataset.items[seen]] = -np.inf

    test_users, test_items = dataset.split_pairs(TEST)
    relevance_by_user = {}
    for u, i in zip(test_users, test_items):
        relevance_by_user.setdefault(int(u), []).append(int(i))

    user_ids = np.asarray(sorted(relevance_by_user), dtype=np.int64)
    # stable argsort on the negated scores ranks ties by ascending item id
    order = np.argsort(-scores[user_ids], axis=1, kind="stable")
    lists = order[:, :k]
    if np.any(np.take_along_axis(scores[user_ids], lists, axis=1) == -np.inf):
        raise ValueError(f"catalog too small to recommend {k} unseen items")
    relevance = [np.asarray(sorted(relevance_by_user[int(u)]), dtype=np.int64)
                 for u in user_ids]
    return RecommendationRun(k, user_ids, lists, relevance)


def _hit_matrix(run: RecommendationRun) -> np.ndarray:
    hits = np.zeros((run.user_ids.shape[0], run.k), dtype=np.float64)
    for row, rel in enumerate(run.relevance):
        hits[row] = np.isin(run.lists[row], rel)
    return hits


def recall_at_k(run: RecommendationRun) -> float:
    """Mean fraction of each user's test positives that made the list."""
    hits = _hit_matrix(run)
    counts = np.asarray([rel.shape[0] for rel in run.relevance], dtype=np.float64)
    return float(np.mean(hits.sum(axis=1) / counts))


def _ndcg_vectors(run: RecommendationRun) -> np.ndarray:
    """Per-user NDCG@j for j = 1..k, binary relevance, 1-based positions."""
    hits = _hit_matrix(run)
    positions = np.arange(1, run.k + 1, dtype=np.float64)
    gains = 1.0 / np.log2(positions + 1.0)
    dcg = np.cumsum(hits * gains[None, :], axis=1)
    counts = np.asarray([rel.shape[0] for rel in run.relevance])
    ideal_hits = positions[None, :] <= counts[:, None]
    idcg = np.cumsum(ideal_hits * gains[None, :], axis=1)
    return dcg / idcg


def ndcg_at_k(run: RecommendationRun) -> float:
    """Mean normalized discounted cumulative gain at the run's depth."""
    return float(np.mean(_ndcg_vectors(run)[:, -1]))


def disparity_user(run: RecommendationRun, masks: GroupMaskSet,
                   variant: str = "gender") -> float | None:
    """Consumer-side disparity: the training objective on exact NDCG vectors.

    Per-user vectors of NDCG@1..k are averaged within each attribute group
    and the pairwise squared distances of the group means are returned.
    None when the mask is missing or fewer than two groups are evaluated.
    """
    if variant not in ("gender", "age"):
        raise ValueError(f"variant must be 'gender' or 'age', got {variant!r}")
    mask = masks.mask_for(variant)
    if mask is None:
        return None
    vectors = _ndcg_vectors(run)
    group_rows = mask[:, run.user_ids].astype(np.float64)
    counts = group_rows.sum(axis=1)
    means = [group_rows[g] @ vectors / counts[g]
             for g in np.flatnonzero(counts >= 1)]
    if len(means) < 2:
        return None
    return consumer_group_fairness(means)


def disparity_item(run: RecommendationRun, item_group_mask: np.ndarray,
                   patience: float = 0.5) -> float:
    """Producer-side disparity: the training objective on hard exposures.

    Each recommended slot contributes patience**position to every group of
    its item; the normalized distribution is compared to the flat target.
    """
    if not 0.0 < patience < 1.0:
        raise ValueError(f"patience must be in (0, 1), got {patience}")
    positions = np.arange(1, run.k + 1, dtype=np.float64)
    slot_exposure = np.power(patience, positions)
    groups = item_group_mask.shape[0]
    raw = np.zeros(groups)
    for row in range(run.user_ids.shape[0]):
        raw += item_group_mask[:, run.lists[row]].astype(np.float64) @ slot_exposure
    total = raw.sum()
    if total <= 0.0:
        raise ValueError("no recommended item belongs to any group")
    eps = raw / total
    diff = eps - 1.0 / groups
    return float(diff @ diff)


def exposure_counts(run: RecommendationRun, num_items: int) -> np.ndarray:
    """How often each catalog item appears across all top-k lists."""
    return np.bincount(run.lists.ravel(), minlength=num_items).astype(np.float64)


def gini_index(run: RecommendationRun, num_items: int,
               recommended_only: bool = False) -> float:
    """Inequality of item exposure across the catalog, in [0, 1).

    Exposure is the occurrence count in all lists; items never recommended
    count as zero unless ``recommended_only`` restricts to the items that
    appear at least once.
    """
    exposures = exposure_counts(run, num_items)
    if recommended_only:
        exposures = exposures[exposures > 0]
    return gini_from_exposures(exposures)


def gini_from_exposures(exposures: np.ndarray) -> float:
    """Mean absolute pairwise exposure difference over twice the mean.

    Computed from the sorted vector in O(n log n); equal to the pairwise
    double sum (1 / (2 n^2 mean)) * sum_ij |e_i - e_j|.
    """
    e = np.asarray(exposures, dtype=np.float64)
    if e.ndim != 1 or e.shape[0] == 0:
        raise ValueError("exposures must be a nonempty vector")
    if np.any(e < 0):
        raise ValueError("exposures must be nonnegative")
    total = e.sum()
    if total <= 0.0:
        raise ValueError("total exposure is zero; the index is undefined")
    n = e.shape[0]
    ordered = np.sort(e)
    ranks = np.arange(1, n + 1, dtype=np.float64)
    return float(np.sum((2.0 * ranks - n - 1.0) * ordered) / (n * total))


def popularity_rate(run: RecommendationRun, popularity_mask: np.ndarray) -> float:
    """Fraction of recommended slots filled by items of the top popularity group."""
    top_group = popularity_mask[0]
    hits = top_group[run.lists.ravel()]
    return float(np.mean(hits))


def simpson_diversity(run: RecommendationRun, group_mask: np.ndarray) -> float:
    """One minus the probability that two random slots share an item group."""
    slot_counts = group_mask[:, run.lists.ravel()].astype(np.float64).sum(axis=1)
    total = slot_counts.sum()
    if total < 2:
        raise ValueError("at least two grouped slots are required")
    return float(1.0 - np.sum(slot_counts * (slot_counts - 1.0))
                 / (total * (total - 1.0)))


def evaluate(model: FactorModel, dataset: InteractionDataset, masks: GroupMaskSet,
             k_values=(10, 20), patience: float = 0.5, label: str = "model",
             disparity_user_variant: str = "gender",
             diversity_grouping: str = "popularity") -> list:
    """All seven metrics at each requested list depth, one row per (model, k)."""
    rows = []
    diversity_mask = masks.mask_for(diversity_grouping)
    for k in k_values:
        run = build_recommendations(model, dataset, k)
        rows.append({
            "model": label,
            "k": int(k),
            "recall": recall_at_k(run),
            "ndcg": ndcg_at_k(run),
            "disparity_u": disparity_user(run, masks, disparity_user_variant),
            "disparity_i": disparity_item(run, masks.popularity, patience),
            "gini": gini_index(run, dataset.num_items),
            "popularity_rate": popularity_rate(run, masks.popularity),
            "diversity": simpson_diversity(run, diversity_mask),
        })
    return rows


def write_metrics_csv(rows, path: str) -> None:
    """Emit the metrics table with six significant digits per value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            out = []
            for col in METRIC_COLUMNS:
                value = row.get(col)
                if value is None:
                    out.append("")
                elif isinstance(value, float):
                    out.append(f"{value:.6g}")
                else:
                    out.append(str(value))
            writer.writerow(out)
