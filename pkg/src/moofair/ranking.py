"""Differentiable ranking toolkit.

Two smooth-rank constructions are provided:

* ``pairwise_smooth_rank`` builds 1-based ranks from sigmoid-relaxed pairwise
  score comparisons (hard-rank limit as the sigmoid steepens).
* ``temperature_smooth_rank`` builds 0-based ranks from pairwise comparisons
  of sampling probabilities, sharpened by a temperature.

Plus the pieces around them: smooth DCG on those ranks, softmax sampling
probabilities, Gumbel perturbation of the probabilities, and position-biased
exposure of ranked items.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng, as_vector, sample_gumbel, sigmoid, softmax


@dataclass(frozen=True)
class SmoothRankConfig:
    """Hyperparameters of the smooth-ranking chain.

    steepness: sigmoid slope for pairwise smooth ranks and soft top-k cutoffs.
    temperature: sharpness of probability-based smooth ranks (smaller = harder).
    patience: per-position decay of user attention, in (0, 1).
    rank_offset: added to 0-based probability ranks before exposure so they
        line up with the 1-based convention of hard-rank exposure.
    """

    steepness: float = 1.0
    temperature: float = 1e-5
    patience: float = 0.5
    rank_offset: float = 1.0

    def __post_init__(self):
        if self.steepness <= 0:
            raise ValueError(f"steepness must be > 0, got {self.steepness}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.patience < 1.0:
            raise ValueError(f"patience must be in (0, 1), got {self.patience}")
        if self.rank_offset < 0:
            raise ValueError(f"rank_offset must be >= 0, got {self.rank_offset}")


def _complement_pairwise(values: np.ndarray, scale: float) -> np.ndarray:
    """Matrix S with S[i, j] = sigmoid(scale * (values[j] - values[i])).

    Each unordered pair is evaluated once on its nonnegative side and the
    mirror entry is set to 1 - S[i, j], so S[i, j] + S[j, i] == 1 exactly
    (the subtraction is exact for S >= 0.5). The diagonal is 0.5.
    """
    n = values.shape[0]
    diff = scale * (values[None, :] - values[:, None])
    s = sigmoid(np.where(diff >= 0, diff, 0.0))
    lower = diff < 0
    s[lower] = 1.0 - s.T[lower]
    np.fill_diagonal(s, 0.5)
    return s


def pairwise_smooth_rank(scores, steepness: float = 1.0) -> np.ndarray:
    """Smooth 1-based rank of each score among all scores (higher score, lower rank).

    r_i = 0.5 + sum_j sigmoid(steepness * (s_j - s_i)), with the j == i term
    contributing 0.5 so the hard-rank limit starts at 1. Tied scores receive
    their average rank.
    """
    s = as_vector(scores, "scores")
    if steepness <= 0:
        raise ValueError(f"steepness must be > 0, got {steepness}")
    if s.shape[0] == 0:
        raise ValueError("scores must contain at least one entry")
    comp = _complement_pairwise(s, steepness)
    return 0.5 + comp.sum(axis=1)


def hard_ranks(scores) -> np.ndarray:
    """1-based ranks by descending score, ties broken by index ascending."""
    s = as_vector(scores, "scores")
    order = np.lexsort((np.arange(s.shape[0]), -s))
    ranks = np.empty(s.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, s.shape[0] + 1)
    return ranks


def smooth_dcg(relevance, ranks) -> float:
    """Discounted cumulative gain sum_i rel_i / log2(r_i + 1) on (smooth) ranks."""
    rel = as_vector(relevance, "relevance")
    r = as_vector(ranks, "ranks")
    if rel.shape != r.shape:
        raise ValueError(f"length mismatch: {rel.shape[0]} vs {r.shape[0]}")
    if np.any(r < 0.5):
        raise ValueError("ranks must be >= 0.5")
    return float(np.sum(rel / np.log2(r + 1.0)))


def pl_probs(logits) -> np.ndarray:
    """Sampling probability of each item proportional to exp(logit)."""
    return softmax(logits)


def gumbel_perturb(logits, rng: SeededRng | np.random.Generator | None = None,
                   noise=None) -> np.ndarray:
    """Sampling probabilities recomputed from Gumbel-perturbed logits.

    ``noise`` injects a fixed perturbation (frozen noise during gradient
    computation, or zeros in tests); otherwise fresh Gumbel noise is drawn
    from ``rng``.
    """
    l = as_vector(logits, "logits")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be provided")
        noise = sample_gumbel(rng, l.shape[0])
    z = as_vector(noise, "noise")
    if z.shape != l.shape:
        raise ValueError(f"noise length {z.shape[0]} does not match logits {l.shape[0]}")
    return softmax(l + z)


def temperature_smooth_rank(probs, temperature: float) -> np.ndarray:
    """Smooth 0-based rank of each probability among all probabilities.

    r_i = sum_{j != i} (1 + exp((p_i - p_j) / temperature))^-1; as the
    temperature shrinks this approaches the 0-based hard rank by descending
    probability.
    """
    p = as_vector(probs, "probs")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if p.shape[0] == 0:
        raise ValueError("probs must contain at least one entry")
    # (1 + exp(x/tau))^-1 == sigmoid(-x/tau); the complement trick keeps
    # h(x) + h(-x) == 1 exact for every pair.
    comp = _complement_pairwise(p, 1.0 / temperature)
    return comp.sum(axis=1) - 0.5


def exposure(ranks, patience: float, rank_offset: float = 0.0) -> np.ndarray:
    """Position-biased attention patience**(rank + rank_offset), elementwise.

    Attention decays exponentially with rank; pass rank_offset=1 for 0-based
    smooth ranks so they match the 1-based hard-rank convention.
    """
    if not 0.0 < patience < 1.0:
        raise ValueError(f"patience must be in (0, 1), got {patience}")
    if rank_offset < 0:
        raise ValueError(f"rank_offset must be >= 0, got {rank_offset}")
    r = np.asarray(ranks, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("ranks contain non-finite entries")
    return np.power(patience, r + rank_offset)
