"""Rating-based repeated endogenous matching for peer review.

Agents review each other's products, a designer keeps ratings of review
quality, and the matching rule ties future reviewers to current ratings.
Agents pick effort by best-responding to an affine conjecture about their
future value; the package simulates those dynamics and checks the
resulting equilibria.
"""

from ratingmatch.functions import AgentSpec, FunctionSpec, is_more_capable, validate_assumption1
from ratingmatch.ratings import RatingDistribution, distribution, reinsert, update_rating
from ratingmatch.matching import MatchingRule, conjectured_benefit, match_probabilities
from ratingmatch.best_response import best_response, brute_force_best_response
from ratingmatch.dynamics import DynamicsState, Population, run, step, verify_ce

__all__ = [
    "AgentSpec",
    "DynamicsState",
    "FunctionSpec",
    "MatchingRule",
    "Population",
    "RatingDistribution",
    "best_response",
    "brute_force_best_response",
    "conjectured_benefit",
    "distribution",
    "is_more_capable",
    "match_probabilities",
    "reinsert",
    "run",
    "step",
    "update_rating",
    "validate_assumption1",
    "verify_ce",
]
