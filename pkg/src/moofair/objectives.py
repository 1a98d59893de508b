"""Differentiable group-fairness objectives over shared embeddings.

Consumer side: per-batch NDCG vectors are built from smooth ranks, averaged
within each user group, and the squared differences of the group means are
penalized (gender and age groupings).

Producer side: item sampling probabilities are Gumbel-perturbed, turned into
smooth ranks and position-biased exposure, aggregated per item group, and the
normalized exposure distribution is pulled toward a target (popularity and
genre groupings).

Every objective exposes both the scalar loss and its analytic gradient over
the flattened model parameters; the gradients backpropagate through the whole
smooth-ranking chain with the Gumbel noise held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import GroupMaskSet, InteractionDataset
from .model import FactorModel, ObjectiveGradient, TripletBatch, bpr_grad
from .numerics import SeededRng, sample_gumbel, sigmoid
from .ranking import SmoothRankConfig, hard_ranks

logger = logging.getLogger(__name__)

OBJECTIVE_IDS = ("bpr", "gender", "age", "popularity", "genre")
CONSUMER_OBJECTIVES = ("gender", "age")
PRODUCER_OBJECTIVES = ("popularity", "genre")

# Mask attribute each fairness objective needs on the GroupMaskSet.
OBJECTIVE_MASKS = {
    "gender": "gender",
    "age": "age",
    "popularity": "popularity",
    "genre": "genre",
}

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class NdcgVectorSpec:
    """Shape of the training-time NDCG vectors: truncation depths 1..k_max,
    candidate sets of all train positives plus sampled negatives."""

    k_max: int = 50
    candidate_negatives: int = 200

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if self.candidate_negatives < 0:
            raise ValueError("candidate_negatives must be >= 0")


@dataclass(frozen=True)
class ExposureTarget:
    """Target exposure distribution over item groups (defaults to flat)."""

    distribution: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distribution, dtype=np.float64)
        if d.ndim != 1 or d.shape[0] < 1:
            raise ValueError("target distribution must be a nonempty vector")
        if np.any(d < 0) or abs(float(d.sum()) - 1.0) > 1e-9:
            raise ValueError("target distribution must be nonnegative and sum to 1")
        object.__setattr__(self, "distribution", d)

    @classmethod
    def flat(cls, groups: int) -> "ExposureTarget":
        return cls(np.full(groups, 1.0 / groups))


@dataclass
class ConsumerContext:
    """Frozen per-batch sampling state for the consumer-side objectives.

    Per user: candidate item ids with the train positives first, then the
    sampled negatives. Users without train positives keep an empty positive
    prefix; they produce zero NDCG rows and are excluded from group counts.
    """

    users: np.ndarray
    candidates: list = field(repr=False, default_factory=list)
    positive_counts: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @property
    def valid(self) -> np.ndarray:
        return self.positive_counts > 0


@dataclass
class ProducerContext:
    """Frozen per-batch sampling state for the producer-side objectives.

    Per user: candidate item ids with the capped relevant items first, then
    sampled negatives, plus one frozen Gumbel noise draw per candidate.
    """

    users: np.ndarray
    candidates: list = field(repr=False, default_factory=list)
    relevant_counts: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    noise: list = field(repr=False, default_factory=list)


def _sample_candidate_negatives(pool: np.ndarray, gen: np.random.Generator,
                                count: int) -> np.ndarray:
    if count >= pool.shape[0]:
        return pool
    return np.sort(gen.choice(pool, size=count, replace=False))


def build_consumer_context(dataset: InteractionDataset, users,
                           spec: NdcgVectorSpec,
                           rng: SeededRng | np.random.Generator) -> ConsumerContext:
    gen = rng.generator if isinstance(rng, SeededRng) else rng
    users = np.asarray(users, dtype=np.int64)
    lists = dataset.train_positive_lists()
    pools = dataset.train_complement_lists()
    candidates, pos_counts = [], []
    for u in users:
        positives = lists[u]
        negatives = _sample_candidate_negatives(pools[u], gen,
                                                spec.candidate_negatives)
        candidates.append(np.concatenate([positives, negatives]))
        pos_counts.append(positives.shape[0])
    return ConsumerContext(users, candidates, np.asarray(pos_counts, dtype=np.int64))


def build_producer_context(dataset: InteractionDataset, users,
                           n_r_cap: int, candidate_negatives: int,
                           rng: SeededRng | np.random.Generator) -> ProducerContext:
    gen = rng.generator if isinstance(rng, SeededRng) else rng
    users = np.asarray(users, dtype=np.int64)
    lists = dataset.train_positive_lists()
    pools = dataset.train_complement_lists()
    candidates, rel_counts = [], []
    for u in users:
        positives = lists[u]
        relevant = positives[: max(0, n_r_cap)] if n_r_cap else positives
        negatives = _sample_candidate_negatives(pools[u], gen,
                                                candidate_negatives)
        candidates.append(np.concatenate([relevant, negatives]))
        rel_counts.append(relevant.shape[0])
    sizes = [c.shape[0] for c in candidates]
    flat_noise = (sample_gumbel(gen, sum(sizes)) if sum(sizes)
                  else np.empty(0, dtype=np.float64))
    bounds = np.cumsum([0] + sizes)
    noise = [flat_noise[bounds[k]:bounds[k + 1]] for k in range(len(sizes))]
    return ProducerContext(users, candidates,
                           np.asarray(rel_counts, dtype=np.int64), noise)


# ---------------------------------------------------------------------------
# consumer side: group-mean NDCG disparity
# ---------------------------------------------------------------------------

def consumer_group_fairness(group_vectors) -> float:
    """Mean squared distance between all pairs of group representations."""
    vectors = [np.asarray(v, dtype=np.float64) for v in group_vectors]
    if len(vectors) < 2:
        raise ValueError("at least two groups are required")
    n = len(vectors)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            diff = vectors[i] - vectors[j]
            total += float(diff @ diff)
    return total / (n * (n - 1) / 2)


def _ideal_dcg(k_max: int, num_relevant: int) -> np.ndarray:
    """idcg[k-1] for k = 1..k_max with binary relevance."""
    gains = 1.0 / np.log2(np.arange(1, k_max + 1) + 1.0)
    if num_relevant < k_max:
        gains[num_relevant:] = 0.0
    return np.cumsum(gains)


def _consumer_forward(model: FactorModel, ctx: ConsumerContext, k_max: int,
                      steepness: float, mode: str):
    """Per-user NDCG rows plus the intermediates the backward pass reuses."""
    b = ctx.users.shape[0]
    g_matrix = np.zeros((b, k_max))
    cache = []
    ks = np.arange(1, k_max + 1, dtype=np.float64)
    for row, user in enumerate(ctx.users):
        cand = ctx.candidates[row]
        n_pos = int(ctx.positive_counts[row])
        if n_pos == 0:
            cache.append(None)
            continue
        scores = model.item_embeddings[cand] @ model.user_embeddings[user]
        idcg = _ideal_dcg(k_max, n_pos)
        if mode == "exact":
            ranks = hard_ranks(scores)[:n_pos].astype(np.float64)
            disc = 1.0 / np.log2(ranks + 1.0)
            hit = ranks[None, :] <= ks[:, None]
            g_matrix[row] = (hit * disc[None, :]).sum(axis=1) / idcg
            cache.append(None)
            continue
        pair = sigmoid(steepness * (scores[None, :] - scores[:n_pos, None]))
        ranks = 0.5 + pair.sum(axis=1)
        disc = 1.0 / np.log2(ranks + 1.0)
        trunc = sigmoid(steepness * (ks[:, None] + 0.5 - ranks[None, :]))
        g_matrix[row] = (trunc * disc[None, :]).sum(axis=1) / idcg
        cache.append((scores, pair, ranks, disc, trunc, idcg))
    return g_matrix, cache


def build_ndcg_matrix(model: FactorModel, ctx: ConsumerContext,
                      spec: NdcgVectorSpec, mode: str = "smooth",
                      steepness: float = 1.0) -> np.ndarray:
    """Batch matrix of NDCG@k values, one row per context user, k = 1..k_max.

    In ``smooth`` mode the ranks are sigmoid-relaxed pairwise ranks and the
    top-k cutoff is the soft indicator sigmoid(steepness*(k + 0.5 - rank)); in
    ``exact`` mode hard sort ranks and a hard cutoff are used.
    """
    if mode not in ("smooth", "exact"):
        raise ValueError(f"mode must be 'smooth' or 'exact', got {mode!r}")
    g_matrix, _ = _consumer_forward(model, ctx, spec.k_max, steepness, mode)
    return g_matrix


def _group_means(g_matrix: np.ndarray, group_masks: np.ndarray,
                 valid: np.ndarray):
    """Mean NDCG row per group with at least one valid member."""
    masks = (np.asarray(group_masks, dtype=np.float64) * valid[None, :].astype(np.float64))
    counts = masks.sum(axis=1)
    present = np.flatnonzero(counts >= 1)
    means = [masks[g] @ g_matrix / counts[g] for g in present]
    return present, means, masks, counts


def gender_fairness_loss(g_matrix: np.ndarray, group_masks: np.ndarray,
                         valid: np.ndarray | None = None) -> float | None:
    """Squared distance between the two gender-group mean NDCG vectors.

    ``group_masks`` holds one row per gender over the batch users. Returns
    None (with a warning) when a gender is absent from the batch.
    """
    if valid is None:
        valid = np.ones(g_matrix.shape[0], dtype=bool)
    present, means, _, _ = _group_means(g_matrix, group_masks, valid)
    if present.shape[0] < 2:
        logger.warning("a gender group is absent from the batch; objective skipped")
        return None
    return consumer_group_fairness(means)


def age_fairness_loss(g_matrix: np.ndarray, group_masks: np.ndarray,
                      valid: np.ndarray | None = None) -> float | None:
    """Pairwise mean squared distance between the present age-group means."""
    if valid is None:
        valid = np.ones(g_matrix.shape[0], dtype=bool)
    present, means, _, _ = _group_means(g_matrix, group_masks, valid)
    if present.shape[0] < 2:
        logger.warning("fewer than two age groups in the batch; objective skipped")
        return None
    return consumer_group_fairness(means)


def _consumer_loss_and_ndcg_grad(g_matrix, group_masks, valid):
    """Loss plus dL/dG, or None when fewer than two groups are present."""
    present, means, masks, counts = _group_means(g_matrix, group_masks, valid)
    n = present.shape[0]
    if n < 2:
        return None
    loss = consumer_group_fairness(means)
    stacked = np.stack(means)
    pair_norm = n * (n - 1) / 2
    # dL/dA_g = (2 / C(n,2)) * (n * A_g - sum_h A_h)
    d_means = (2.0 / pair_norm) * (n * stacked - stacked.sum(axis=0)[None, :])
    d_g = np.zeros_like(g_matrix)
    for idx, g in enumerate(present):
        members = masks[g] > 0
        d_g[members] += d_means[idx] / counts[g]
    return loss, d_g


def consumer_fairness_grad(model: FactorModel, ctx: ConsumerContext,
                           group_masks: np.ndarray, spec: NdcgVectorSpec,
                           steepness: float,
                           objective_id: str) -> ObjectiveGradient | None:
    """Analytic gradient of a consumer-side objective over the flattened model.

    Backpropagates the group-mean disparity through the smooth NDCG rows, the
    soft top-k cutoffs, the smooth pairwise ranks, and the candidate scores.
    """
    g_matrix, cache = _consumer_forward(model, ctx, spec.k_max, steepness, "smooth")
    result = _consumer_loss_and_ndcg_grad(g_matrix, group_masks, ctx.valid)
    if result is None:
        logger.warning("%s objective skipped: not enough groups in batch", objective_id)
        return None
    loss, d_g = result

    user_grad = np.zeros_like(model.user_embeddings)
    item_grad = np.zeros_like(model.item_embeddings)
    ks = np.arange(1, spec.k_max + 1, dtype=np.float64)
    for row, user in enumerate(ctx.users):
        if cache[row] is None or not np.any(d_g[row]):
            continue
        scores, pair, ranks, disc, trunc, idcg = cache[row]
        cand = ctx.candidates[row]
        n_pos = int(ctx.positive_counts[row])
        coeff = d_g[row] / idcg  # (K,)
        # d dcg_k / d r_p: soft-cutoff slope times discount, plus cutoff times
        # discount slope
        trunc_slope = -steepness * trunc * (1.0 - trunc)  # (K, P)
        disc_slope = -1.0 / ((ranks + 1.0) * LN2 * np.log2(ranks + 1.0) ** 2)
        d_rank = coeff @ (trunc_slope * disc[None, :]) \
            + (coeff @ trunc) * disc_slope  # (P,)
        # rank -> score: r_p = 0.5 + sum_j sigmoid(steepness (s_j - s_p)), the
        # j == p term is constant
        slope = steepness * pair * (1.0 - pair)  # (P, C)
        slope[np.arange(n_pos), np.arange(n_pos)] = 0.0
        d_scores = slope.T @ d_rank
        d_scores[:n_pos] -= d_rank * slope.sum(axis=1)
        user_grad[user] += model.item_embeddings[cand].T @ d_scores
        item_grad[cand] += np.outer(d_scores, model.user_embeddings[user])
    grad = np.concatenate([user_grad.ravel(), item_grad.ravel()])
    return ObjectiveGradient(objective_id, loss, grad)


# ---------------------------------------------------------------------------
# producer side: group exposure disparity
# ---------------------------------------------------------------------------

def _producer_shape_groups(ctx: ProducerContext):
    """Context rows bucketed by (relevant count, candidate count).

    Candidate counts are nearly uniform (cap + fixed negative draw), so the
    buckets let the whole chain run as stacked array ops instead of a
    per-user loop.
    """
    groups: dict = {}
    for row in range(ctx.users.shape[0]):
        n_rel = int(ctx.relevant_counts[row])
        if n_rel == 0:
            continue
        groups.setdefault((n_rel, ctx.candidates[row].shape[0]), []).append(row)
    return groups


def _producer_forward(model: FactorModel, ctx: ProducerContext,
                      item_group_mask: np.ndarray, config: SmoothRankConfig):
    """Batch exposure per item group plus per-shape-bucket intermediates."""
    z = item_group_mask.shape[0]
    raw = np.zeros(z)
    cache = []
    inv_tau = 1.0 / config.temperature
    for (n_rel, _), rows in _producer_shape_groups(ctx).items():
        rows = np.asarray(rows, dtype=np.int64)
        users = ctx.users[rows]
        cands = np.stack([ctx.candidates[r] for r in rows])  # (B, C)
        noise = np.stack([ctx.noise[r] for r in rows])
        logits = np.einsum("bcd,bd->bc", model.item_embeddings[cands],
                           model.user_embeddings[users])
        shifted = logits + noise
        shifted -= shifted.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        pair = sigmoid(-inv_tau * (probs[:, :n_rel, None] - probs[:, None, :]))
        ranks = pair.sum(axis=2) - 0.5  # remove the j == i term
        expo = np.power(config.patience, ranks + config.rank_offset)  # (B, R)
        routing = item_group_mask[:, cands[:, :n_rel]].astype(np.float64)  # (z, B, R)
        raw += np.einsum("zbr,br->z", routing, expo)
        cache.append((rows, n_rel, users, cands, probs, pair, expo, routing))
    return raw, cache


def producer_fairness_loss(model: FactorModel, ctx: ProducerContext,
                           item_group_mask: np.ndarray,
                           config: SmoothRankConfig,
                           target: ExposureTarget | None = None) -> float | None:
    """Squared distance between normalized group exposure and the target.

    Relevant-item exposures are accumulated over the whole batch and routed to
    every group each item belongs to before normalizing. Returns None when the
    batch produces no exposure at all.
    """
    raw, _ = _producer_forward(model, ctx, item_group_mask, config)
    total = float(raw.sum())
    if total <= 0.0:
        logger.warning("batch produced no routed exposure; objective skipped")
        return None
    if target is None:
        target = ExposureTarget.flat(item_group_mask.shape[0])
    eps = raw / total
    diff = eps - target.distribution
    return float(diff @ diff)


def producer_fairness_grad(model: FactorModel, ctx: ProducerContext,
                           item_group_mask: np.ndarray,
                           config: SmoothRankConfig,
                           target: ExposureTarget | None = None,
                           objective_id: str = "popularity") -> ObjectiveGradient | None:
    """Analytic gradient of a producer-side objective over the flattened model.

    Backpropagates the exposure disparity through the normalization, the
    position-bias decay, the temperature smooth ranks, and the perturbed
    sampling probabilities (noise frozen).
    """
    raw, cache = _producer_forward(model, ctx, item_group_mask, config)
    total = float(raw.sum())
    if total <= 0.0:
        logger.warning("%s objective skipped: no routed exposure", objective_id)
        return None
    if target is None:
        target = ExposureTarget.flat(item_group_mask.shape[0])
    eps = raw / total
    diff = eps - target.distribution
    loss = float(diff @ diff)
    # d loss / d raw_g through the normalization eps = raw / sum(raw)
    d_raw = (2.0 / total) * (diff - float(diff @ eps))

    user_grad = np.zeros_like(model.user_embeddings)
    item_grad = np.zeros_like(model.item_embeddings)
    log_patience = float(np.log(config.patience))
    inv_tau = 1.0 / config.temperature
    for rows, n_rel, users, cands, probs, pair, expo, routing in cache:
        d_expo = np.einsum("zbr,z->br", routing, d_raw)
        d_rank = d_expo * expo * log_patience  # (B, R)
        # rank -> probs: r_i = sum_{j != i} sigmoid(-(p_i - p_j)/tau)
        d_pair = d_rank[:, :, None] * (-pair * (1.0 - pair))  # (B, R, C)
        diag = np.arange(n_rel)
        d_pair[:, diag, diag] = 0.0
        d_probs = -d_pair.sum(axis=1) * inv_tau  # (B, C)
        d_probs[:, :n_rel] += d_pair.sum(axis=2) * inv_tau
        # softmax backward (perturbation is additive and frozen)
        inner = np.einsum("bc,bc->b", d_probs, probs)
        d_logits = probs * (d_probs - inner[:, None])
        user_grad[users] += np.einsum("bcd,bc->bd", model.item_embeddings[cands],
                                      d_logits)
        values = (d_logits[:, :, None]
                  * model.user_embeddings[users][:, None, :]).reshape(-1, model.dim)
        _scatter_add_rows(item_grad, cands.ravel(), values)
    grad = np.concatenate([user_grad.ravel(), item_grad.ravel()])
    return ObjectiveGradient(objective_id, loss, grad)


def _scatter_add_rows(target: np.ndarray, indices: np.ndarray,
                      values: np.ndarray) -> None:
    """target[indices] += values with repeated indices, via per-column bincount
    (much faster than np.add.at for wide value matrices)."""
    n = target.shape[0]
    for col in range(target.shape[1]):
        target[:, col] += np.bincount(indices, weights=values[:, col], minlength=n)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def fairness_grad(objective_id: str, model: FactorModel, masks: GroupMaskSet,
                  *, triplet_batch: TripletBatch | None = None,
                  consumer_ctx: ConsumerContext | None = None,
                  producer_ctx: ProducerContext | None = None,
                  spec: NdcgVectorSpec | None = None,
                  config: SmoothRankConfig | None = None,
                  target: ExposureTarget | None = None) -> ObjectiveGradient | None:
    """Loss and gradient of any configured objective on the current batch.

    Returns None when the objective is skipped for the batch (degenerate
    group composition).
    """
    if objective_id == "bpr":
        if triplet_batch is None:
            raise ValueError("bpr objective requires a triplet batch")
        return bpr_grad(model, triplet_batch)
    if objective_id in CONSUMER_OBJECTIVES:
        if consumer_ctx is None or spec is None:
            raise ValueError(f"{objective_id} objective requires a consumer context")
        mask = masks.mask_for(OBJECTIVE_MASKS[objective_id])
        if mask is None:
            raise ValueError(f"{objective_id} objective requires the "
                             f"{OBJECTIVE_MASKS[objective_id]} mask")
        steepness = config.steepness if config is not None else 1.0
        return consumer_fairness_grad(model, consumer_ctx,
                                      mask[:, consumer_ctx.users], spec,
                                      steepness, objective_id)
    if objective_id in PRODUCER_OBJECTIVES:
        if producer_ctx is None or config is None:
            raise ValueError(f"{objective_id} objective requires a producer context")
        mask = masks.mask_for(OBJECTIVE_MASKS[objective_id])
        if mask is None:
            raise ValueError(f"{objective_id} objective requires the "
                             f"{OBJECTIVE_MASKS[objective_id]} mask")
        return producer_fairness_grad(model, producer_ctx, mask, config,
                                      target, objective_id)
    raise ValueError(f"unknown objective {objective_id!r}")
