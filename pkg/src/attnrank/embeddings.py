"""Embedding bundles, the EMB1 tensor container, MLP embedders, synthesis.

A ranking episode sees one query under M embedding channels and T candidates
under N channels. Channels typically come from distinct upstream models; here
they are either loaded from EMB1 files, produced by the synthetic class-softmax
generator, or computed by a jointly trainable MLP embedder.

EMB1 container
--------------
Little-endian layout, bit-exact:

    bytes 0..3   magic "EMB1" (0x45 0x4D 0x42 0x31)
    byte  4      version, 0x01
    bytes 5..8   uint32 manifest length L
    bytes 9..    manifest: UTF-8 JSON of L bytes
    then         row-major IEEE-754 matrices, in manifest order

The manifest is ``{"tensors": [{"name", "rows", "cols", "dtype", "frozen"}...],
"meta": {...}}`` with dtype "f64" or "f32". 32-bit payloads widen to float64
on load. ``meta`` is free-form and carries labels, dimensions, provenance.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .numerics import Array, as_f64, stable_softmax

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1

_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


# ----------------------------------------------------------------------
# EMB1 read/write
# ----------------------------------------------------------------------

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_emb1(dest, tensors, *, dtype: str = "f64", frozen=None, meta=None) -> None:
    """Write named 2-D matrices to ``dest`` (path or binary file object).

    ``tensors`` is a sequence of (name, matrix) pairs or a dict; payload order
    follows the manifest order. ``dtype`` applies to every tensor ("f64" or
    "f32"); ``frozen`` is an optional name->bool map recorded per tensor.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}, expected one of {sorted(_DTYPES)}")
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    frozen = frozen or {}
    entries = []
    payloads = []
    for name, arr in items:
        arr = as_f64(arr)
        if arr.ndim != 2:
            raise ShapeError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
        entries.append(
            {
                "name": str(name),
                "rows": int(arr.shape[0]),
                "cols": int(arr.shape[1]),
                "dtype": dtype,
                "frozen": bool(frozen.get(name, True)),
            }
        )
        payloads.append(np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes())
    manifest = _canonical_json({"tensors": entries, "meta": meta or {}})

    own = not hasattr(dest, "write")
    f = open(dest, "wb") if own else dest
    try:
        f.write(EMB1_MAGIC)
        f.write(bytes([EMB1_VERSION]))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for chunk in payloads:
            f.write(chunk)
    finally:
        if own:
            f.close()


def read_emb1(src):
    """Read an EMB1 container; returns (name -> float64 matrix, manifest dict).

    Raises ``FormatError`` naming the byte offset for bad magic/version,
    truncated manifests or payloads, and inconsistent declared dimensions.
    """
    own = not hasattr(src, "read")
    f = open(src, "rb") if own else src
    try:
        head = f.read(4)
        if head != EMB1_MAGIC:
            raise FormatError(f"bad magic {head!r} at byte 0, expected {EMB1_MAGIC!r}")
        ver = f.read(1)
        if len(ver) != 1 or ver[0] != EMB1_VERSION:
            raise FormatError(f"unsupported version {ver!r} at byte 4")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise FormatError("truncated manifest length at byte 5")
        (mlen,) = struct.unpack("<I", raw_len)
        mraw = f.read(mlen)
        if len(mraw) != mlen:
            raise FormatError(f"truncated manifest at byte 9: expected {mlen} bytes, got {len(mraw)}")
        try:
            manifest = json.loads(mraw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unparseable manifest at byte 9: {exc}") from exc

        entries = manifest.get("tensors")
        if not isinstance(entries, list):
            raise FormatError("manifest field 'tensors' missing or not a list")
        offset = 9 + mlen
        tensors: dict[str, Array] = {}
        for i, ent in enumerate(entries):
            try:
                name, rows, cols, dt = ent["name"], int(ent["rows"]), int(ent["cols"]), ent["dtype"]
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"manifest entry tensors[{i}] malformed: {exc}") from exc
            if dt not in _DTYPES:
                raise FormatError(f"tensors[{i}] ({name!r}) has unknown dtype {dt!r}")
            if rows < 0 or cols < 0:
                raise FormatError(f"tensors[{i}] ({name!r}) declares negative shape {rows}x{cols}")
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r} in manifest")
            nbytes = rows * cols * _DTYPES[dt].itemsize
            chunk = f.read(nbytes)
            if len(chunk) != nbytes:
                raise FormatError(
                    f"truncated payload for tensor {name!r} at byte {offset}: "
                    f"expected {nbytes} bytes, got {len(chunk)}"
                )
            mat = np.frombuffer(chunk, dtype=_DTYPES[dt]).reshape(rows, cols)
            tensors[name] = mat.astype(np.float64)
            offset += nbytes
        if f.read(1):
            raise FormatError(f"trailing bytes after declared payload at byte {offset}")
        return tensors, manifest
    finally:
        if own:
            f.close()


def emb1_bytes(tensors, **kw) -> bytes:
    buf = io.BytesIO()
    write_emb1(buf, tensors, **kw)
    return buf.getvalue()


# ----------------------------------------------------------------------
# embedding bundles
# ----------------------------------------------------------------------

@dataclass
class EmbeddingBundle:
    """One episode's embeddings: query (M, d_q) and candidates (T, N, d_r).

    Channels marked frozen never receive gradient updates; only MLP-backed
    channels can be unfrozen. Arrays are float64 and immutable by convention.
    """

    query: Array
    candidates: Array
    query_frozen: tuple = ()
    cand_frozen: tuple = ()

    def __post_init__(self):
        self.query = as_f64(self.query)
        self.candidates = as_f64(self.candidates)
        if self.query.ndim != 2:
            raise ShapeError(f"query embeddings must be (M, d_q), got {self.query.shape}")
        if self.candidates.ndim != 3:
            raise ShapeError(f"candidate embeddings must be (T, N, d_r), got {self.candidates.shape}")
        m = self.query.shape[0]
        t, n, _ = self.candidates.shape
        if m < 1 or n < 1:
            raise ValueError(f"need at least one channel per side, got M={m}, N={n}")
        if t < 2:
            raise ValueError(f"an episode needs at least 2 candidates, got T={t}")
        if not self.query_frozen:
            self.query_frozen = (True,) * m
        if not self.cand_frozen:
            self.cand_frozen = (True,) * n
        if len(self.query_frozen) != m or len(self.cand_frozen) != n:
            raise ShapeError("frozen flags must match channel counts")
        if not (np.all(np.isfinite(self.query)) and np.all(np.isfinite(self.candidates))):
            raise ValueError("bundle contains non-finite embeddings")

    @property
    def m(self) -> int:
        return self.query.shape[0]

    @property
    def n(self) -> int:
        return self.candidates.shape[1]

    @property
    def t(self) -> int:
        return self.candidates.shape[0]

    @property
    def d_q(self) -> int:
        return self.query.shape[1]

    @property
    def d_r(self) -> int:
        return self.candidates.shape[2]


def save_bundle(bundle: EmbeddingBundle, dest, *, dtype: str = "f64") -> None:
    t, n, d_r = bundle.candidates.shape
    meta = {
        "kind": "bundle",
        "t": t,
        "n": n,
        "query_frozen": [bool(x) for x in bundle.query_frozen],
        "cand_frozen": [bool(x) for x in bundle.cand_frozen],
    }
    write_emb1(
        dest,
        [("query", bundle.query), ("candidates", bundle.candidates.reshape(t * n, d_r))],
        dtype=dtype,
        meta=meta,
    )


def load_bundle(src) -> EmbeddingBundle:
    tensors, manifest = read_emb1(src)
    meta = manifest.get("meta", {})
    try:
        t, n = int(meta["t"]), int(meta["n"])
        query = tensors["query"]
        cands = tensors["candidates"]
    except KeyError as exc:
        raise FormatError(f"bundle file missing field {exc}") from exc
    if cands.shape[0] != t * n:
        raise FormatError(
            f"candidate tensor has {cands.shape[0]} rows but meta declares t*n = {t * n}"
        )
    return EmbeddingBundle(
        query=query,
        candidates=cands.reshape(t, n, cands.shape[1]),
        query_frozen=tuple(meta.get("query_frozen", ())),
        cand_frozen=tuple(meta.get("cand_frozen", ())),
    )


# ----------------------------------------------------------------------
# MLP embedder (optionally trained jointly with the ranker)
# ----------------------------------------------------------------------

_ACT = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (lambda x: 1.0 / (1.0 + np.exp(-x)), lambda y: y * (1.0 - y)),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(np.float64)),
}


@dataclass
class MlpEmbedder:
    """Feedforward embedder: hidden layers under ``activation``, then either a
    softmax head (the embedding is a probability vector over C categories) or
    the activation of the final affine layer ("last-hidden")."""

    weights: list
    biases: list
    activation: str = "tanh"
    output: str = "softmax"

    def __post_init__(self):
        self.weights = [as_f64(w) for w in self.weights]
        self.biases = [as_f64(b) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need equally many weight matrices and bias vectors, at least one")
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in ("softmax", "last-hidden"):
            raise ValueError(f"unknown output mode {self.output!r}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: weight {w.shape} and bias {b.shape} mismatch")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l} expects {w.shape[1]} inputs but layer {l - 1} emits "
                    f"{self.weights[l - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def random_mlp(rng, layer_dims, *, activation="tanh", output="softmax", scale=0.05) -> MlpEmbedder:
    """Embedder with Uniform(-scale, scale) weights; dims chain input->output."""
    ws, bs = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        ws.append(rng.uniform(-scale, scale, size=(d_out, d_in)))
        bs.append(rng.uniform(-scale, scale, size=d_out))
    return MlpEmbedder(ws, bs, activation=activation, output=output)


def mlp_forward(emb: MlpEmbedder, x0) -> Array:
    """Embed ``x0`` (a vector, or a batch with the feature axis last)."""
    out, _ = mlp_forward_tape(emb, x0)
    return out


def mlp_forward_tape(emb: MlpEmbedder, x0):
    """Forward pass keeping per-layer outputs for backprop."""
    x = as_f64(x0)
    if x.shape[-1] != emb.in_dim:
        raise ShapeError(
            f"embedder expects {emb.in_dim} input features, got {x.shape[-1]}"
        )
    act, _ = _ACT[emb.activation]
    layers = [x]
    for l, (w, b) in enumerate(zip(emb.weights, emb.biases)):
        pre = layers[-1] @ w.T + b
        last = l == emb.n_layers - 1
        if last and emb.output == "softmax":
            layers.append(stable_softmax(pre, axis=-1))
        else:
            layers.append(act(pre))
    return layers[-1], layers


def mlp_backward(emb: MlpEmbedder, layers, d_out):
    """Gradients of a scalar loss given d(loss)/d(output).

    Returns (dweights, dbiases, dx0); batch axes in ``layers`` are summed into
    the parameter gradients.
    """
    _, dact = _ACT[emb.activation]
    d_out = as_f64(d_out)
    grads_w = [None] * emb.n_layers
    grads_b = [None] * emb.n_layers
    for l in range(emb.n_layers - 1, -1, -1):
        y = layers[l + 1]
        if l == emb.n_layers - 1 and emb.output == "softmax":
            dot = np.sum(y * d_out, axis=-1, keepdims=True)
            dpre = y * (d_out - dot)
        else:
            dpre = d_out * dact(y)
        x = layers[l]
        flat_pre = dpre.reshape(-1, dpre.shape[-1])
        flat_x = x.reshape(-1, x.shape[-1])
        grads_w[l] = flat_pre.T @ flat_x
        grads_b[l] = flat_pre.sum(axis=0)
        d_out = dpre @ emb.weights[l]
    return grads_w, grads_b, d_out


# ----------------------------------------------------------------------
# synthetic class-softmax embeddings
# ----------------------------------------------------------------------

DEFAULT_SHARPNESS = 5.0


def synth_class_embedding(rng, label: int, n_classes: int, noise: float,
                          sharpness: float = DEFAULT_SHARPNESS) -> Array:
    """softmax(sharpness * one_hot(label) + noise * standard_normal).

    Mimics the confidence vector of a classifier: mass concentrates on the
    true class, with per-channel jitter. In the sharpness -> inf limit the
    output is exactly one-hot (off-class exponentials underflow). The normal
    draw is consumed even when noise == 0 so the stream advances uniformly.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    logits = np.zeros(n_classes)
    logits[int(label)] = sharpness
    logits += noise * rng.standard_normal(n_classes)
    return stable_softmax(logits)


def synth_class_bundle(rng, query_class: int, candidate_classes, n_classes: int,
                       query_noise, cand_noise,
                       sharpness: float = DEFAULT_SHARPNESS) -> EmbeddingBundle:
    """Synthetic episode bundle; pure function of the rng state and arguments.

    Draw order is fixed: query channels 0..M-1, then candidates in episode
    order with channels 0..N-1 inside each.
    """
    query_noise = [float(s) for s in query_noise]
    cand_noise = [float(s) for s in cand_noise]
    classes = [int(c) for c in candidate_classes]
    query = np.stack([
        synth_class_embedding(rng, query_class, n_classes, s, sharpness) for s in query_noise
    ])
    cands = np.stack([
        np.stack([
            synth_class_embedding(rng, c, n_classes, s, sharpness) for s in cand_noise
        ])
        for c in classes
    ])
    return EmbeddingBundle(query=query, candidates=cands)


def synth_class_matrix(rng, labels, n_classes: int, noise,
                       sharpness: float = DEFAULT_SHARPNESS) -> Array:
    """(K, n_items, n_classes) channel embeddings for a labeled item pool.

    Channel k uses noise[k]; draws run item-major, channel-minor.
    """
    labels = np.asarray(labels, dtype=np.int64)
    noise = [float(s) for s in noise]
    out = np.empty((len(noise), labels.size, n_classes))
    for i, lab in enumerate(labels):
        for k, s in enumerate(noise):
            out[k, i] = synth_class_embedding(rng, int(lab), n_classes, s, sharpness)
    return out
