"""Episode construction protocols and the on-disk dataset format.

An episode is one query plus T candidates with integer relevance labels.
Episodes are built from an ItemPool: labeled items, each carrying the same
K channel embeddings whether it later serves as a query or as a candidate.

Two protocols:

* class retrieval ("mnist-style", and "cifar-style" which is the same
  construction over a different pool): per query, k ~ U{1..9} same-class
  candidates get label 1 and 30-k off-class candidates get label 0.
* topic retrieval ("newsgroups-style"): per query, a ~ U{3..7} same-topic
  candidates (label 2), b ~ U{3..7} same-superclass/other-topic (label 1),
  and 30-a-b cross-superclass (label 0). Training relevance binarizes at
  label 2 (topic level); evaluation may binarize at either threshold.

Candidate order is shuffled after construction so position never leaks
labels. The query item never appears among its own candidates. Generation
is a pure function of (seed, parameters, pool).

On disk a dataset is a directory: ``manifest.json`` (split, protocol, seed,
parameters, episode table) plus ``pool.emb1`` (channel matrices; labels and
superclasses ride in the EMB1 meta). The manifest schema is documented
field-by-field in docs/file-formats.md.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .embeddings import read_emb1, synth_class_matrix, write_emb1
from .errors import DataError, FormatError
from .numerics import Array

DATASET_FORMAT = "attnrank-dataset"
DATASET_VERSION = 1
POOL_FILE = "pool.emb1"
MANIFEST_FILE = "manifest.json"

VALID_LABELS = (0, 1, 2)
REDRAW_CAP = 100


# ----------------------------------------------------------------------
# pools
# ----------------------------------------------------------------------

@dataclass
class ItemPool:
    """Labeled items with K channel embeddings each.

    ``labels`` are class ids (or topic ids); ``superclass`` groups topics for
    the topic-retrieval protocol and is None otherwise.
    """

    labels: Array
    embeddings: Array              # (K, n_items, dim)
    superclass: Array | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 3:
            raise DataError(f"pool embeddings must be (channels, items, dim), got {self.embeddings.shape}")
        if self.embeddings.shape[1] != self.labels.size:
            raise DataError(
                f"pool has {self.labels.size} labels but {self.embeddings.shape[1]} embedded items"
            )
        if self.superclass is not None:
            self.superclass = np.asarray(self.superclass, dtype=np.int64)
            if self.superclass.shape != self.labels.shape:
                raise DataError("superclass array must align with labels")

    @property
    def n_items(self) -> int:
        return self.labels.size

    @property
    def n_channels(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    def class_counts(self) -> dict:
        vals, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))


def save_pool(pool: ItemPool, dest) -> None:
    meta = {
        "kind": "pool",
        "labels": pool.labels.tolist(),
        "superclass": None if pool.superclass is None else pool.superclass.tolist(),
    }
    meta.update(pool.meta)
    tensors = [(f"channel{k}", pool.embeddings[k]) for k in range(pool.n_channels)]
    write_emb1(dest, tensors, meta=meta)


def load_pool(src) -> ItemPool:
    tensors, manifest = read_emb1(src)
    meta = dict(manifest.get("meta", {}))
    if meta.get("kind") != "pool":
        raise FormatError(f"not an item pool: kind={meta.get('kind')!r}")
    labels = meta.pop("labels", None)
    if labels is None:
        raise FormatError("pool meta is missing 'labels'")
    superclass = meta.pop("superclass", None)
    meta.pop("kind")
    chans = []
    for k in range(len(tensors)):
        name = f"channel{k}"
        if name not in tensors:
            raise FormatError(f"pool is missing tensor {name!r}")
        chans.append(tensors[name])
    return ItemPool(labels=labels, embeddings=np.stack(chans), superclass=superclass, meta=meta)


def synth_class_pool(rng, n_items: int, n_classes: int, noise, sharpness: float = 5.0,
                     superclasses: int | None = None) -> ItemPool:
    """Synthetic pool: round-robin class labels, class-softmax channel
    embeddings with per-channel noise. With ``superclasses`` set, classes are
    treated as topics grouped contiguously into that many superclasses
    (class c belongs to superclass c * superclasses // n_classes)."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    labels = np.arange(n_items, dtype=np.int64) % n_classes
    emb = synth_class_matrix(rng, labels, n_classes, noise, sharpness)
    superclass = None
    meta = {"n_classes": n_classes, "noise": [float(s) for s in noise], "sharpness": sharpness}
    if superclasses is not None:
        if not 1 <= superclasses <= n_classes:
            raise ValueError(f"superclasses must be in 1..{n_classes}, got {superclasses}")
        superclass = labels * superclasses // n_classes
        meta["n_superclasses"] = int(superclasses)
    return ItemPool(labels=labels, embeddings=emb, superclass=superclass, meta=meta)


# ----------------------------------------------------------------------
# episodes and datasets
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class QueryEpisode:
    """One query with its T candidates (pool item ids) and labels."""

    episode_id: int
    query_item: int
    candidate_items: tuple
    labels: tuple

    def __post_init__(self):
        t = len(self.candidate_items)
        if t < 2:
            raise DataError(f"episode {self.episode_id}: needs >= 2 candidates, got {t}")
        if len(self.labels) != t:
            raise DataError(f"episode {self.episode_id}: {len(self.labels)} labels for {t} candidates")
        if any(l not in VALID_LABELS for l in self.labels):
            raise DataError(f"episode {self.episode_id}: labels must be in {VALID_LABELS}")
        if not any(l > 0 for l in self.labels):
            raise DataError(f"episode {self.episode_id}: needs at least one positive label")
        if len(set(self.candidate_items)) != t:
            raise DataError(f"episode {self.episode_id}: duplicate candidate items")
        if self.query_item in self.candidate_items:
            raise DataError(f"episode {self.episode_id}: query appears among its candidates")

    @property
    def t(self) -> int:
        return len(self.candidate_items)

    @property
    def canonical_order(self) -> tuple:
        """Positions sorted by (descending label, ascending position)."""
        return tuple(sorted(range(self.t), key=lambda i: (-self.labels[i], i)))


@dataclass
class Dataset:
    """One split's episodes plus the pool they index into."""

    split: str
    protocol: str
    seed: int
    pool: ItemPool
    episodes: list
    params: dict = field(default_factory=dict)
    train_binarize_at: int = 1

    def __post_init__(self):
        ids = [ep.episode_id for ep in self.episodes]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate episode ids in split {self.split!r}")

    def training_relevance(self, ep: QueryEpisode) -> tuple:
        return tuple(int(l >= self.train_binarize_at) for l in ep.labels)

    def training_order(self, ep: QueryEpisode) -> tuple:
        rel = self.training_relevance(ep)
        return tuple(sorted(range(ep.t), key=lambda i: (-rel[i], i)))


# ----------------------------------------------------------------------
# protocol builders
# ----------------------------------------------------------------------

def _query_ids(rng, pool: ItemPool, episodes: int | None):
    if episodes is None:
        return list(range(pool.n_items))
    return [int(i) for i in rng.integers(0, pool.n_items, size=episodes)]


def build_mnist_style(rng, pool: ItemPool, t: int = 30, episodes: int | None = None,
                      split: str = "train", protocol: str = "mnist-style",
                      seed: int | None = None) -> Dataset:
    """Class-retrieval episodes: k ~ U{1..9} same-class positives per query.

    With ``episodes=None`` every pool item is queried exactly once (the
    source protocol); otherwise queries are drawn uniformly with replacement.
    Draw order per episode: k, positive set, negative set, position shuffle.
    """
    counts = pool.class_counts()
    min_class = min(counts.values())
    if min_class < 10:
        raise DataError(
            f"class-retrieval needs >= 9 same-class items besides the query; "
            f"class counts: {counts}"
        )
    if pool.n_items - max(counts.values()) < t - 1:
        raise DataError(
            f"class-retrieval needs >= {t - 1} off-class items; class counts: {counts}"
        )
    by_class = {c: np.flatnonzero(pool.labels == c) for c in counts}
    k_hi = min(9, t - 1)   # U{1..9} presumes t=30; keep >= 1 negative at small t
    eps = []
    for eid, qid in enumerate(_query_ids(rng, pool, episodes)):
        qlab = int(pool.labels[qid])
        k = int(rng.integers(1, k_hi + 1))
        same = by_class[qlab][by_class[qlab] != qid]
        off = np.flatnonzero(pool.labels != qlab)
        if same.size < k or off.size < t - k:
            raise DataError(
                f"episode {eid}: pool too small for k={k} (same-class {same.size}, "
                f"off-class {off.size}, class counts {counts})"
            )
        pos = rng.choice(same, size=k, replace=False)
        neg = rng.choice(off, size=t - k, replace=False)
        cand = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(k, np.int64), np.zeros(t - k, np.int64)])
        order = rng.permutation(t)
        eps.append(QueryEpisode(
            episode_id=eid,
            query_item=int(qid),
            candidate_items=tuple(int(i) for i in cand[order]),
            labels=tuple(int(l) for l in labels[order]),
        ))
    return Dataset(split=split, protocol=protocol, seed=-1 if seed is None else int(seed),
                   pool=pool, episodes=eps, train_binarize_at=1,
                   params={"t": t, "episodes": episodes})


# cifar-style is the identical construction over a different pool; sharing the
# callable is asserted by tests.
build_cifar_style = build_mnist_style


def build_newsgroups_style(rng, pool: ItemPool, t: int = 30, episodes: int | None = None,
                           split: str = "train", protocol: str = "newsgroups-style",
                           seed: int | None = None) -> Dataset:
    """Topic-retrieval episodes with graded labels 2/1/0.

    Infeasible (a, b) draws (insufficient same-topic, same-superclass, or
    cross-superclass items) are redrawn up to 100 times, then rejected with a
    descriptive error. Training relevance binarizes at the topic level.
    """
    if pool.superclass is None:
        raise DataError("topic-retrieval needs a pool with superclass labels")
    eps = []
    for eid, qid in enumerate(_query_ids(rng, pool, episodes)):
        topic = int(pool.labels[qid])
        sup = int(pool.superclass[qid])
        same_topic = np.flatnonzero((pool.labels == topic) & (np.arange(pool.n_items) != qid))
        same_sup = np.flatnonzero((pool.superclass == sup) & (pool.labels != topic))
        cross = np.flatnonzero(pool.superclass != sup)
        chosen = None
        for _ in range(REDRAW_CAP):
            a = int(rng.integers(3, 8))
            b = int(rng.integers(3, 8))
            rest = t - a - b
            if same_topic.size >= a and same_sup.size >= b and cross.size >= rest and rest >= 0:
                chosen = (a, b, rest)
                break
        if chosen is None:
            raise DataError(
                f"episode {eid}: no feasible (a, b) draw in {REDRAW_CAP} tries "
                f"(same-topic {same_topic.size}, same-superclass {same_sup.size}, "
                f"cross-superclass {cross.size}, t={t})"
            )
        a, b, rest = chosen
        picks = [
            rng.choice(same_topic, size=a, replace=False),
            rng.choice(same_sup, size=b, replace=False),
            rng.choice(cross, size=rest, replace=False),
        ]
        cand = np.concatenate(picks)
        labels = np.concatenate([
            np.full(a, 2, np.int64), np.full(b, 1, np.int64), np.zeros(rest, np.int64)
        ])
        order = rng.permutation(t)
        eps.append(QueryEpisode(
            episode_id=eid,
            query_item=int(qid),
            candidate_items=tuple(int(i) for i in cand[order]),
            labels=tuple(int(l) for l in labels[order]),
        ))
    return Dataset(split=split, protocol=protocol, seed=-1 if seed is None else int(seed),
                   pool=pool, episodes=eps, train_binarize_at=2,
                   params={"t": t, "episodes": episodes})


PROTOCOLS = {
    "mnist-style": build_mnist_style,
    "cifar-style": build_cifar_style,
    "newsgroups-style": build_newsgroups_style,
}


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def write_dataset(ds: Dataset, path, run_manifest=None) -> None:
    os.makedirs(path, exist_ok=True)
    save_pool(ds.pool, os.path.join(path, POOL_FILE))
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "split": ds.split,
        "protocol": ds.protocol,
        "seed": ds.seed,
        "params": ds.params,
        "train_binarize_at": ds.train_binarize_at,
        "pool": {
            "file": POOL_FILE,
            "items": ds.pool.n_items,
            "channels": ds.pool.n_channels,
            "dim": ds.pool.dim,
        },
        "episodes": [
            {
                "id": ep.episode_id,
                "query": ep.query_item,
                "candidates": list(ep.candidate_items),
                "labels": list(ep.labels),
            }
            for ep in ds.episodes
        ],
    }
    if run_manifest is not None:
        doc["run"] = run_manifest
    with open(os.path.join(path, MANIFEST_FILE), "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def _need(doc, key, path):
    if key not in doc:
        raise DataError(f"dataset manifest missing {path}.{key}")
    return doc[key]


def read_dataset(path) -> Dataset:
    mpath = os.path.join(path, MANIFEST_FILE)
    if not os.path.exists(mpath):
        raise DataError(f"no {MANIFEST_FILE} under {path}")
    with open(mpath, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unparseable dataset manifest: {exc}") from exc
    if doc.get("format") != DATASET_FORMAT:
        raise FormatError(f"$.format is {doc.get('format')!r}, expected {DATASET_FORMAT!r}")
    if doc.get("version") != DATASET_VERSION:
        raise FormatError(f"$.version {doc.get('version')!r} unsupported")
    pool_ref = _need(doc, "pool", "$")
    pool = load_pool(os.path.join(path, pool_ref.get("file", POOL_FILE)))
    for key in ("items", "channels", "dim"):
        if int(pool_ref.get(key, -1)) != int(getattr(pool, {"items": "n_items", "channels": "n_channels", "dim": "dim"}[key])):
            raise FormatError(
                f"$.pool.{key} = {pool_ref.get(key)} does not match pool file "
                f"({getattr(pool, {'items': 'n_items', 'channels': 'n_channels', 'dim': 'dim'}[key])})"
            )
    episodes = []
    for i, rec in enumerate(_need(doc, "episodes", "$")):
        try:
            ep = QueryEpisode(
                episode_id=int(rec["id"]),
                query_item=int(rec["query"]),
                candidate_items=tuple(int(x) for x in rec["candidates"]),
                labels=tuple(int(x) for x in rec["labels"]),
            )
        except KeyError as exc:
            raise DataError(f"$.episodes[{i}] missing field {exc}") from exc
        except DataError as exc:
            raise DataError(f"$.episodes[{i}]: {exc}") from exc
        for item in (ep.query_item, *ep.candidate_items):
            if not 0 <= item < pool.n_items:
                raise DataError(f"$.episodes[{i}] references item {item} outside pool of {pool.n_items}")
        episodes.append(ep)
    return Dataset(
        split=_need(doc, "split", "$"),
        protocol=_need(doc, "protocol", "$"),
        seed=int(_need(doc, "seed", "$")),
        pool=pool,
        episodes=episodes,
        params=doc.get("params", {}),
        train_binarize_at=int(_need(doc, "train_binarize_at", "$")),
    )


# ----------------------------------------------------------------------
# tensor assembly for the model
# ----------------------------------------------------------------------

def channel_subset(ds: Dataset, channels=None) -> list:
    if channels is None:
        return list(range(ds.pool.n_channels))
    channels = [int(c) for c in channels]
    for c in channels:
        if not 0 <= c < ds.pool.n_channels:
            raise DataError(f"channel {c} out of range for pool with {ds.pool.n_channels}")
    return channels


def episode_tensors(ds: Dataset, episode_ids=None, channels=None):
    """Stacked (Q, R, train_orders, train_relevance, graded_labels) arrays.

    Q is (E, M, d), R is (E, T, N, d) with M = N = the chosen channels.
    Requires every selected episode to share T (protocol datasets do).
    """
    eps = ds.episodes if episode_ids is None else [ds.episodes[i] for i in episode_ids]
    if not eps:
        raise DataError("no episodes selected")
    t = eps[0].t
    if any(ep.t != t for ep in eps):
        raise DataError("episodes with differing T cannot be stacked")
    ch = channel_subset(ds, channels)
    emb = ds.pool.embeddings[ch]                     # (M, n_items, d)
    qids = np.array([ep.query_item for ep in eps])
    cands = np.array([ep.candidate_items for ep in eps])
    q_t = emb[:, qids].transpose(1, 0, 2)            # (E, M, d)
    r_t = emb[:, cands].transpose(1, 2, 0, 3)        # (E, T, N, d)
    orders = np.array([ds.training_order(ep) for ep in eps], dtype=np.int64)
    rel = np.array([ds.training_relevance(ep) for ep in eps], dtype=np.int64)
    labels = np.array([ep.labels for ep in eps], dtype=np.int64)
    return q_t, r_t, orders, rel, labels


def episode_bundle(ds: Dataset, ep: QueryEpisode, channels=None):
    from .embeddings import EmbeddingBundle

    ch = channel_subset(ds, channels)
    emb = ds.pool.embeddings[ch]
    q = emb[:, ep.query_item]                        # (M, d)
    r = emb[:, list(ep.candidate_items)].transpose(1, 0, 2)
    return EmbeddingBundle(query=q, candidates=r)
