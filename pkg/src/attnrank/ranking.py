"""Ranking inference: greedy/beam decoding and an exhaustive oracle.

The recurrence's states do not depend on which candidates were already
chosen, so a single forward pass yields the (T, T) step-by-candidate score
matrix and every decoding strategy just explores selection paths on it.
A path's log-likelihood is the sum over steps of the selected candidate's
log-mass under the softmax restricted to the still-unranked candidates.
All accumulation is in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .embeddings import EmbeddingBundle
from .model import AttentionState, RankerParams, episode_scores, forward_episode
from .numerics import Array, logsumexp

EXHAUSTIVE_MAX_T = 8


@dataclass(frozen=True)
class BeamPath:
    """A partial ranking kept by the beam; ``state`` is the recurrence state
    after the last chosen step (shared across paths of equal depth)."""

    prefix: tuple
    log_likelihood: float
    state: AttentionState | None = None


def path_log_likelihood(scores: Array, order) -> float:
    """Sum of per-step selection log-probabilities of ``order`` on ``scores``."""
    t_sz = scores.shape[0]
    mask = np.ones(t_sz, dtype=bool)
    total = 0.0
    for ti, pick in enumerate(order):
        row = np.where(mask, scores[ti], -np.inf)
        total += float(row[pick] - logsumexp(row))
        mask[pick] = False
    return total


def beam_on_scores(scores: Array, width: int):
    """Beam search over a score matrix; returns (order, log_likelihood).

    Every surviving path expands over all its unranked candidates; the
    ``width`` best cumulative log-likelihoods survive each step, ties broken
    lexicographically by the chosen-index sequence (smaller wins).
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    t_sz = scores.shape[0]
    paths = [((), 0.0)]
    for ti in range(t_sz):
        row = scores[ti]
        expanded = []
        for prefix, ll in paths:
            mask = np.ones(t_sz, dtype=bool)
            mask[list(prefix)] = False
            masked = np.where(mask, row, -np.inf)
            lse = logsumexp(masked)
            for k in np.flatnonzero(mask):
                expanded.append((prefix + (int(k),), ll + float(masked[k] - lse)))
        expanded.sort(key=lambda p: (-p[1], p[0]))
        paths = expanded[:width]
    best_prefix, best_ll = paths[0]
    return best_prefix, best_ll


def rank_beam(params: RankerParams, bundle: EmbeddingBundle, width: int = 3):
    """Beam-search ranking of one episode; width 1 is greedy decoding."""
    order, ll = beam_on_scores(episode_scores(params, bundle), width)
    return order, ll


def rank_greedy(params: RankerParams, bundle: EmbeddingBundle):
    trace = forward_episode(params, bundle)
    return trace.order, trace.log_likelihood


def exhaustive_on_scores(scores: Array):
    t_sz = scores.shape[0]
    if t_sz > EXHAUSTIVE_MAX_T:
        raise ValueError(
            f"refusing exhaustive search over {t_sz}! orders (T={t_sz} > {EXHAUSTIVE_MAX_T})"
        )
    best_order, best_ll = None, -np.inf
    for perm in permutations(range(t_sz)):
        ll = path_log_likelihood(scores, perm)
        if ll > best_ll:
            best_order, best_ll = perm, ll
    return best_order, best_ll


def rank_exhaustive(params: RankerParams, bundle: EmbeddingBundle):
    """Optimal ranking by enumerating all T! orders (guarded to T <= 8).

    ``itertools.permutations`` yields lexicographically, and only strictly
    better log-likelihoods replace the incumbent, so ties resolve to the
    lexicographically smallest order, matching the beam's tie rule.
    """
    return exhaustive_on_scores(episode_scores(params, bundle))
