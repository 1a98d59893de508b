"""Pareto machinery for multi-objective gradient descent.

The per-step objective weights are the coordinates of the minimum-norm point
in the convex hull of the objective gradients, found by Frank-Wolfe iteration
on the simplex. Everything here works in Gram form: the solver only ever sees
the t x t matrix of gradient inner products, never the gradients themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix, as_vector

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class SimplexWeights:
    """Objective scaling coefficients: nonnegative, summing to one."""

    values: np.ndarray

    def __post_init__(self):
        v = as_vector(self.values, "weights")
        if v.shape[0] < 1:
            raise ValueError("weights must have at least one entry")
        if np.any(v < -SIMPLEX_TOL):
            raise ValueError(f"weights must be nonnegative, got {v}")
        if abs(float(v.sum()) - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"weights must sum to 1, got sum {v.sum()!r}")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SolutionRecord:
    """Final objective values of one training round plus a checkpoint handle."""

    round_id: int
    objective_values: np.ndarray
    checkpoint_ref: object = None

    def __post_init__(self):
        object.__setattr__(
            self, "objective_values", as_vector(self.objective_values, "objective_values")
        )


def gram_matrix(gradients) -> np.ndarray:
    """Matrix of pairwise inner products of the given gradient vectors."""
    g = [as_vector(gi, f"gradient {i}") for i, gi in enumerate(gradients)]
    stacked = np.stack(g)
    m = stacked @ stacked.T
    # the product is symmetric up to roundoff; make it exactly so
    return 0.5 * (m + m.T)


def two_objective_alpha(g1, g2) -> float:
    """Weight on g1 minimizing ||a*g1 + (1-a)*g2||^2 over a in [0, 1].

    Closed form a* = ((g2 - g1)^T g2) / ||g1 - g2||^2, clipped to [0, 1].
    Identical (or both-zero) gradients are degenerate: every weight is
    optimal and 0.5 is returned.
    """
    v1 = as_vector(g1, "g1")
    v2 = as_vector(g2, "g2")
    if v1.shape != v2.shape:
        raise ValueError(f"length mismatch: {v1.shape[0]} vs {v2.shape[0]}")
    diff = v1 - v2
    denom = float(diff @ diff)
    if denom == 0.0:
        return 0.5
    alpha = float(-(diff @ v2) / denom)
    return min(1.0, max(0.0, alpha))


def _project_simplex(alpha: np.ndarray) -> np.ndarray:
    """Clamp tiny negative drift and renormalize the sum to one."""
    clipped = np.maximum(alpha, 0.0)
    total = clipped.sum()
    if total <= 0.0:
        return np.full_like(alpha, 1.0 / alpha.shape[0])
    return clipped / total


def frank_wolfe_solve(M, max_iters: int = 100, tol: float = 1e-6,
                      return_history: bool = False):
    """Minimize alpha^T M alpha over the probability simplex.

    M is the (symmetric PSD) Gram matrix of the objective gradients, so the
    optimum is the squared norm of the min-norm point of their convex hull.
    Starting from uniform weights, each iteration moves toward the vertex
    with the smallest combined inner product, with a closed-form line search.

    Returns SimplexWeights, or (SimplexWeights, history of alpha^T M alpha per
    iteration) when ``return_history`` is set.
    """
    m = as_matrix(M, "M")
    t = m.shape[0]
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"M must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=1e-9 * max(1.0, float(np.abs(m).max()))):
        raise ValueError("M must be symmetric")

    alpha = np.full(t, 1.0 / t)
    history = [float(alpha @ m @ alpha)]
    if t > 1:
        for _ in range(max_iters):
            combined = m @ alpha
            target = int(np.argmin(combined))
            direction = alpha.copy()
            direction[target] -= 1.0  # alpha - e_target
            num = float(direction @ combined)
            denom = float(direction @ m @ direction)
            if denom <= 0.0:
                break
            w_star = min(1.0, max(0.0, num / denom))
            new_alpha = (1.0 - w_star) * alpha
            new_alpha[target] += w_star
            step_change = w_star * float(np.abs(new_alpha - alpha).sum())
            alpha = new_alpha
            history.append(float(alpha @ m @ alpha))
            if step_change < tol:
                break
    weights = SimplexWeights(_project_simplex(alpha))
    if return_history:
        return weights, history
    return weights


def pareto_stationary(M, alpha: SimplexWeights, tol: float) -> bool:
    """True iff the weighted gradient combination has (near-)zero norm.

    alpha^T M alpha equals ||sum_i alpha_i g_i||^2, so a value below ``tol``
    together with valid simplex weights certifies a stationary point.
    """
    m = as_matrix(M, "M")
    a = alpha.values if isinstance(alpha, SimplexWeights) else as_vector(alpha, "alpha")
    if a.shape[0] != m.shape[0]:
        raise ValueError(f"alpha length {a.shape[0]} does not match M size {m.shape[0]}")
    if np.any(a < -SIMPLEX_TOL) or abs(float(a.sum()) - 1.0) > SIMPLEX_TOL:
        return False
    return float(a @ m @ a) <= tol


def dominates(a, b) -> bool:
    """True iff objective vector ``a`` is no worse everywhere and better somewhere."""
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape[0]} vs {vb.shape[0]}")
    return bool(np.all(va <= vb) and np.any(va < vb))


def least_misery_select(records) -> SolutionRecord:
    """Pick the round whose worst normalized objective is least bad.

    Objective values are first divided by their round-one values (raw
    magnitudes differ by orders of magnitude across objectives, so the
    max would otherwise be dominated by whichever objective is largest).
    Ties go to the earliest round.
    """
    records = list(records)
    if not records:
        raise ValueError("at least one record is required")
    baseline = records[0].objective_values
    denom = np.where(np.abs(baseline) > 1e-12, np.abs(baseline), 1.0)
    best = None
    best_key = None
    for rec in records:
        worst = float(np.max(rec.objective_values / denom))
        key = (worst, rec.round_id)
        if best_key is None or key < best_key:
            best, best_key = rec, key
    return best
