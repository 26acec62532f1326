"""Minibatch SGD calibration, evaluation, channel sweeps, norm diagnostics.

Plain SGD, no momentum or weight decay: per epoch the episodes are shuffled
(seeded), losses and gradients are averaged over each minibatch's episodes,
and parameters take p <- p - lr * g. After every epoch the ranker is scored
on the validation split with beam inference, and the epoch with the best
validation MAP wins (ties to the earliest). Everything is a deterministic
function of (config, seed, data).
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as mdl
from .episodes import Dataset, channel_subset, episode_tensors
from .errors import NumericError
from .metrics import MetricReport, RunResult, evaluate_rankings
from .numerics import derive_rng
from .oasis import OasisModel, oasis_rank, reduce_channels
from .ranking import beam_on_scores

PAPER_DEFAULTS = {
    "mnist-style": {"batch_size": 100, "learning_rate": 0.001, "epochs": 20},
    "cifar-style": {"batch_size": 50, "learning_rate": 0.0005, "epochs": 20},
    "newsgroups-style": {"batch_size": 100, "learning_rate": 0.0001, "epochs": 50},
}


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "hinge"                  # "softmax" | "hinge"
    batch_size: int = 100
    learning_rate: float = 0.001
    epochs: int = 20
    beam_width: int = 3
    seed: int = 0
    pooling: str = "mean"
    channels: tuple | None = None        # channel subset; None = all
    d_z: int = 32
    h_att: int = 16
    init: str = "small-random"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        # 0 is allowed as the documented null-update case
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss not in ("softmax", "hinge"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_map: float
    norms: dict
    wall_time_s: float


@dataclass
class TrainLog:
    config: dict
    records: list = field(default_factory=list)
    best_epoch: int = 0

    def to_jsonl(self, include_timing: bool = False, run_manifest=None) -> str:
        """One epoch per line; wall time is omitted unless asked for, so two
        identical runs serialize byte-identically."""
        lines = []
        if run_manifest is not None:
            lines.append(json.dumps({"manifest": run_manifest}, sort_keys=True,
                                    separators=(",", ":")))
        lines.append(json.dumps({"config": self.config, "best_epoch": self.best_epoch},
                                sort_keys=True, separators=(",", ":")))
        for rec in self.records:
            doc = {
                "epoch": rec.epoch,
                "train_loss": rec.train_loss,
                "val_map": rec.val_map,
                "norms": rec.norms,
            }
            if include_timing:
                doc["wall_time_s"] = rec.wall_time_s
            lines.append(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"


def param_norms(params: mdl.RankerParams) -> dict:
    """Euclidean norm per parameter group (attention layers, decoder, the two
    match matrices, and each embedder layer)."""
    groups = {
        "query_attention": ("qatt_w", "qatt_b", "qatt_out"),
        "result_attention": ("ratt_w", "ratt_b", "ratt_out"),
        "decoder": ("dec_state", "dec_query", "dec_result", "dec_bias"),
        "match_query": ("match_query",),
        "match_state": ("match_state",),
    }
    out = {}
    for name, members in groups.items():
        sq = sum(float(np.sum(getattr(params, g) ** 2)) for g in members)
        out[name] = float(np.sqrt(sq))
    for k, emb in enumerate(params.embedders):
        for l in range(emb.n_layers):
            sq = float(np.sum(emb.weights[l] ** 2) + np.sum(emb.biases[l] ** 2))
            out[f"embedder{k}.layer{l}"] = float(np.sqrt(sq))
    return out


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def rank_dataset(params: mdl.RankerParams, ds: Dataset, *, beam_width: int = 3,
                 channels=None, chunk: int = 256, threads: int = 1):
    """Beam-ranked order for every episode, in dataset order."""
    orders = []
    n = len(ds.episodes)
    for lo in range(0, n, chunk):
        ids = range(lo, min(lo + chunk, n))
        q_t, r_t, _, _, _ = episode_tensors(ds, ids, channels)
        scores = mdl._forward(params, q_t, r_t).scores
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                chunk_orders = list(pool.map(lambda s: beam_on_scores(s, beam_width)[0], scores))
        else:
            chunk_orders = [beam_on_scores(s, beam_width)[0] for s in scores]
        orders.extend(chunk_orders)
    return orders


def evaluate_ranker(params: mdl.RankerParams, ds: Dataset, *, beam_width: int = 3,
                    channels=None, threshold: int | None = None,
                    threads: int = 1) -> RunResult:
    """Rank every episode with beam search and score MAP/NDCG3/NDCG5.

    ``threshold=None`` binarizes at the dataset's training threshold.
    """
    orders = rank_dataset(params, ds, beam_width=beam_width, channels=channels,
                          threads=threads)
    labels = [ep.labels for ep in ds.episodes]
    thr = ds.train_binarize_at if threshold is None else threshold
    return evaluate_rankings(labels, orders, threshold=thr)


def evaluate_oasis(model: OasisModel, ds: Dataset, *, channels=None,
                   threshold: int | None = None) -> RunResult:
    q_all, r_all, _, _, _ = episode_tensors(ds, channels=channels)
    orders = [oasis_rank(model, q_all[e], r_all[e]) for e in range(q_all.shape[0])]
    labels = [ep.labels for ep in ds.episodes]
    thr = ds.train_binarize_at if threshold is None else threshold
    return evaluate_rankings(labels, orders, threshold=thr)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

def train(config: TrainConfig, train_ds: Dataset, val_ds: Dataset,
          params: mdl.RankerParams | None = None):
    """Calibrate a ranker; returns (best params, TrainLog).

    The returned parameters are the snapshot from the epoch with the highest
    validation MAP. Aborts with ``NumericError`` carrying (epoch, batch)
    coordinates if the loss ever goes non-finite.
    """
    ch = channel_subset(train_ds, config.channels)
    q_all, r_all, orders_all, rel_all, _ = episode_tensors(train_ds, channels=ch)
    n_ep = q_all.shape[0]
    if params is None:
        dims = mdl.ModelDims(m=len(ch), n=len(ch), d_q=train_ds.pool.dim,
                             d_r=train_ds.pool.dim, d_z=config.d_z, h_att=config.h_att)
        params = mdl.init_params(dims, rng=derive_rng(config.seed, "init"),
                                 scheme=config.init, pooling=config.pooling)
    else:
        params = params.copy()

    log = TrainLog(config=asdict(config))
    best_map, best_epoch, best_params = -np.inf, 0, params.copy()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = derive_rng(config.seed, "epoch", epoch).permutation(n_ep)
        loss_sum = 0.0
        for bi, lo in enumerate(range(0, n_ep, config.batch_size)):
            batch = perm[lo:lo + config.batch_size]
            try:
                losses, grads, _, _ = mdl.batch_loss_and_grads(
                    params, q_all[batch], r_all[batch], orders_all[batch],
                    loss=config.loss, relevance=rel_all[batch], average=True,
                )
            except NumericError as exc:
                raise NumericError(f"diverged at epoch {epoch}, batch {bi}: {exc}") from exc
            loss_sum += float(losses.sum())
            mdl.apply_sgd(params, grads, config.learning_rate)
        val = evaluate_ranker(params, val_ds, beam_width=config.beam_width, channels=ch)
        val_map = val.mean("map")
        log.records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n_ep,
            val_map=val_map,
            norms=param_norms(params),
            wall_time_s=time.perf_counter() - t0,
        ))
        if val_map > best_map:
            best_map, best_epoch = val_map, epoch
            best_params = params.copy()
    log.best_epoch = best_epoch
    return best_params, log


def sweep_channels(config: TrainConfig, train_ds: Dataset, val_ds: Dataset,
                   test_ds: Dataset, channel_counts, seeds=(0, 1, 2, 3, 4)):
    """Error-versus-channel-count table.

    Trains one ranker per (channel count, seed) using the first k channels and
    the shared seed list; reports mean/sd of test error rates per count.
    """
    from .metrics import aggregate_runs

    rows = []
    for count in channel_counts:
        ch = tuple(range(int(count)))
        runs = []
        for seed in seeds:
            cfg = replace(config, channels=ch, seed=int(seed))
            best, _ = train(cfg, train_ds, val_ds)
            runs.append(evaluate_ranker(best, test_ds, beam_width=cfg.beam_width,
                                        channels=ch))
        report = MetricReport.from_runs(runs)
        row = {"channels": int(count)}
        for name, vals in report.metrics.items():
            row[f"{name}_error_mean"] = vals["error"]
            row[f"{name}_error_sd"] = vals["error_sd"]
        rows.append(row)
    return rows
