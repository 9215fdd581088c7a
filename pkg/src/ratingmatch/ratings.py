"""Rating profiles, the published rating distribution, and the rating update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

# Ratings are compared after rounding to this many decimals so that agents who
# compute identical updates stay exactly tied.
DECIMALS = 12


def quantize(x):
    """Round ratings to the tie-detection grid (scalar or array)."""
    return np.round(x, DECIMALS) + 0.0


@dataclass(frozen=True, eq=False)
class RatingDistribution:
    """Distinct ratings from high to low.

    ``counts`` gives how many agents hold each rating; it decides whether an
    agent is alone at its rating. ``ranks`` (1-based, per agent) is present only
    when the distribution was built from a full profile.
    """

    values: NDArray[np.float64]
    counts: NDArray[np.int64]
    ranks: NDArray[np.int64] | None = None

    @property
    def K(self) -> int:
        return len(self.values)

    @property
    def n_agents(self) -> int:
        return int(self.counts.sum())

    def value(self, k: int) -> float:
        """Rating at 1-based rank ``k``."""
        return float(self.values[k - 1])

    def count(self, k: int) -> int:
        return int(self.counts[k - 1])

    def rank_of(self, theta: float) -> int:
        """1-based rank of a rating already present in the distribution."""
        idx = np.flatnonzero(self.values == quantize(theta))
        if idx.size == 0:
            raise KeyError(f"rating {theta} not in distribution")
        return int(idx[0]) + 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RatingDistribution):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(
            self.counts, other.counts
        )

    def __repr__(self) -> str:
        return f"RatingDistribution(values={self.values.tolist()}, counts={self.counts.tolist()})"


def distribution(profile: ArrayLike) -> RatingDistribution:
    theta = quantize(np.asarray(profile, dtype=float))
    if theta.ndim != 1:
        raise ValueError("rating profile must be one-dimensional")
    asc, inverse, counts = np.unique(theta, return_inverse=True, return_counts=True)
    K = len(asc)
    return RatingDistribution(
        values=asc[::-1].copy(),
        counts=counts[::-1].astype(np.int64),
        ranks=(K - inverse).astype(np.int64),
    )


def from_values(values: ArrayLike, counts: ArrayLike | None = None) -> RatingDistribution:
    """Distribution from distinct descending ratings (counts default to 1)."""
    v = quantize(np.asarray(values, dtype=float))
    if v.size and np.any(np.diff(v) >= 0):
        raise ValueError("ratings must be distinct and strictly decreasing")
    c = np.ones(len(v), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
    if c.shape != v.shape or np.any(c < 1):
        raise ValueError("counts must be positive and match the ratings")
    return RatingDistribution(v, c)


def remove_agent(dist: RatingDistribution, k: int) -> RatingDistribution:
    """The distribution the other agents form once one agent at rank ``k`` is taken out."""
    counts = dist.counts.copy()
    if counts[k - 1] > 1:
        counts[k - 1] -= 1
        return RatingDistribution(dist.values, counts)
    keep = np.arange(dist.K) != k - 1
    return RatingDistribution(dist.values[keep], counts[keep])


def insert_rating(dist: RatingDistribution, x: float) -> tuple[RatingDistribution, int]:
    """Add one agent with rating ``x``; returns the new distribution and its rank."""
    xq = float(quantize(x))
    values = dist.values
    # values are descending; count how many are strictly above x
    above = int(np.count_nonzero(values > xq))
    if above < dist.K and values[above] == xq:
        counts = dist.counts.copy()
        counts[above] += 1
        return RatingDistribution(values, counts), above + 1
    return (
        RatingDistribution(
            np.insert(values, above, xq),
            np.insert(dist.counts, above, 1),
        ),
        above + 1,
    )


def update_rating(theta: float, report: float, mu: float, reviewed: bool) -> float:
    """Convex-combination update of a reviewer's rating with a quality report."""
    if not 0.0 < mu < 1.0:
        raise ValueError(f"step size mu={mu} must lie in (0, 1)")
    if not reviewed:
        return theta
    return (1.0 - mu) * theta + mu * report


def reinsert(
    profile: ArrayLike, agent_id: int, new_theta: float, dist: RatingDistribution | None = None
) -> tuple[NDArray[np.float64], RatingDistribution, int]:
    """Replace one agent's rating, keeping everyone else's.

    The new distribution is derived from the old one and ``new_theta`` only.
    """
    if new_theta < 0:
        raise ValueError("ratings are non-negative")
    theta = quantize(np.asarray(profile, dtype=float))
    if dist is None:
        dist = distribution(theta)
    if dist.ranks is None:
        raise ValueError("reinsert needs a distribution with per-agent ranks")
    others = remove_agent(dist, int(dist.ranks[agent_id]))
    new_dist, k_plus = insert_rating(others, new_theta)
    new_profile = theta.copy()
    new_profile[agent_id] = quantize(new_theta)
    ranks = 1 + np.count_nonzero(new_dist.values[None, :] > new_profile[:, None], axis=1)
    return new_profile, RatingDistribution(new_dist.values, new_dist.counts, ranks), k_plus
