"""Bilinear-similarity baseline trained with a pairwise hinge.

Scores a (query, result) pair as q^T W r and ranks candidates by descending
score (ties to the lower index). Training walks (query, positive, negative)
triplets: whenever the margin S(q, r+) - S(q, r-) falls below 1, W moves by
lr * q (r+ - r-)^T. W starts at the identity and is never regularized or
projected, matching the original online algorithm.

Channel handling mirrors how the baseline is usually run against
multi-embedding models: "single" scores with the first channel only,
"average" scores with the per-side channel means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episodes import Dataset, episode_tensors
from .errors import ShapeError
from .numerics import Array, as_f64

CHANNEL_MODES = ("single", "average")


@dataclass
class OasisModel:
    w: Array
    channel_mode: str = "single"

    def __post_init__(self):
        self.w = as_f64(self.w)
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise ShapeError(f"similarity matrix must be square, got {self.w.shape}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(f"unknown channel mode {self.channel_mode!r}")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("similarity matrix contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.w.shape[0]


def oasis_score(model: OasisModel, q, r) -> float:
    q, r = as_f64(q), as_f64(r)
    if q.shape != (model.dim,) or r.shape != (model.dim,):
        raise ShapeError(
            f"score expects two ({model.dim},) vectors, got {q.shape} and {r.shape}"
        )
    return float(q @ model.w @ r)


def reduce_channels(mode: str, channel_matrix: Array) -> Array:
    """Collapse a (..., K, d) channel stack to (..., d) per the mode."""
    if mode == "single":
        return channel_matrix[..., 0, :]
    if mode == "average":
        return channel_matrix[..., :, :].mean(axis=-2)
    raise ValueError(f"unknown channel mode {mode!r}")


def oasis_rank(model: OasisModel, q_channels: Array, r_channels: Array):
    """Ranking of candidates (T, N, d) for a query (M, d): descending score,
    ties broken by ascending candidate index."""
    q = reduce_channels(model.channel_mode, q_channels)
    r = reduce_channels(model.channel_mode, r_channels)
    scores = r @ (model.w @ q)
    order = np.lexsort((np.arange(scores.size), -scores))
    return tuple(int(i) for i in order)


def oasis_step(model: OasisModel, q, r_pos, r_neg, lr: float) -> OasisModel:
    """One triplet update: W += lr * q (r+ - r-)^T when the unit margin is
    violated, otherwise W is untouched. Mutates and returns ``model``."""
    q, r_pos, r_neg = as_f64(q), as_f64(r_pos), as_f64(r_neg)
    margin = oasis_score(model, q, r_pos) - oasis_score(model, q, r_neg)
    if margin < 1.0:
        model.w += lr * np.outer(q, r_pos - r_neg)
    return model


def oasis_train(dataset: Dataset, *, epochs: int, batch_size: int, lr: float, rng,
                channel_mode: str = "single", channels=None) -> OasisModel:
    """Fit W on a dataset's episodes.

    Per epoch the episodes are shuffled, then processed in minibatches: every
    episode contributes the summed hinge gradient over all its
    (positive, negative) pairs at the batch-start W, and the batch applies
    the episode-averaged update. Deterministic given the rng.
    """
    q_all, r_all, _, rel, _ = episode_tensors(dataset, channels=channels)
    q_red = reduce_channels(channel_mode, q_all)          # (E, d)
    r_red = reduce_channels(channel_mode, r_all)          # (E, T, d)
    n_ep, _, d = r_red.shape
    model = OasisModel(w=np.eye(d), channel_mode=channel_mode)
    for _ in range(epochs):
        order = rng.permutation(n_ep)
        for lo in range(0, n_ep, batch_size):
            batch = order[lo:lo + batch_size]
            update = np.zeros_like(model.w)
            for e in batch:
                q = q_red[e]
                scores = r_red[e] @ (model.w @ q)
                pos = np.flatnonzero(rel[e] > 0)
                neg = np.flatnonzero(rel[e] == 0)
                if pos.size == 0 or neg.size == 0:
                    continue
                # margin s+ - s- < 1 activates the pair; accumulate both sides
                viol = (scores[pos][:, None] - scores[neg][None, :]) < 1.0
                pos_counts = viol.sum(axis=1)
                neg_counts = viol.sum(axis=0)
                diff = (r_red[e][pos] * pos_counts[:, None]).sum(axis=0) \
                    - (r_red[e][neg] * neg_counts[:, None]).sum(axis=0)
                update += np.outer(q, diff)
            model.w += (lr / max(1, len(batch))) * update
    return model
