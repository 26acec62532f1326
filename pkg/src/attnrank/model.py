"""Attention-based listwise ranker: forward recurrence, losses, gradients.

One episode ranks T candidates for a query. The query carries M embedding
channels q_1..q_M, each candidate carries N channels. Per step t:

    e_tm   = u_q . tanh(Wq [z_{t-1}; q_m; g; a_{t-1,m}; sort(b_{t-1})] + cq)
    f_tn   = u_r . tanh(Wr [z_{t-1}; h_n; qbar; b_{t-1,n}; sort(a_{t-1})] + cr)
    a_t    = softmax(e_t),  b_t = softmax(f_t)
    c_t    = sum_m a_tm q_m
    dbar_t = sum_n b_tn h_n
    z_t    = tanh(A z_{t-1} + B c_t + D dbar_t + bias)
    d_tk   = sum_n b_tn r_kn                      (context of candidate k)
    s_tk   = d_tk . (Wmatch c_t) + d_tk . (Vmatch z_t)

g pools every candidate channel, h_n pools channel n over candidates, qbar
pools the query channels; all three use one pooling mode (mean or max).
Selection at step t is a softmax of s_t over the not-yet-ranked candidates.

Two details are load-bearing:

* The recurrence sees only (z, a, b) and pooled embeddings, never the chosen
  prefix, so one forward pass yields the full step-by-candidate score matrix
  shared by every selection path (teacher forcing, greedy, any beam).
* Attention inputs encode the previous weights channel-anonymously: each
  channel gets its own previous weight as a scalar slot, and the other side's
  weights enter as a descending-sorted vector. Scores therefore cannot depend
  on channel numbering, which makes ranking equivariant under permutations of
  the query channels (and of candidate order).

Gradients are derived by hand and verified against central finite differences;
there is no autodiff anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .embeddings import EmbeddingBundle, MlpEmbedder, mlp_backward, mlp_forward_tape
from .errors import NumericError, ShapeError
from .numerics import Array, as_f64, logsumexp, stable_softmax

POOLING_MODES = ("mean", "max")
INIT_SCHEMES = ("paper-zeros", "small-random")


# ----------------------------------------------------------------------
# dimensions and parameters
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ModelDims:
    """Channel counts and layer widths; everything else derives from these."""

    m: int
    n: int
    d_q: int
    d_r: int
    d_z: int = 32
    h_att: int = 16

    @property
    def query_att_in(self) -> int:
        return self.d_z + self.d_q + self.d_r + 1 + self.n

    @property
    def result_att_in(self) -> int:
        return self.d_z + self.d_q + self.d_r + 1 + self.m

    def validate(self):
        if min(self.m, self.n, self.d_q, self.d_r, self.d_z, self.h_att) < 1:
            raise ValueError(f"all dimensions must be positive: {self}")


@dataclass
class RankerParams:
    """All trainable parameters of the ranker.

    ``embedders`` holds the optional jointly trained MLP channels; frozen
    channels simply never appear there. Arrays are float64 and owned.
    """

    dims: ModelDims
    pooling: str
    qatt_w: Array
    qatt_b: Array
    qatt_out: Array
    ratt_w: Array
    ratt_b: Array
    ratt_out: Array
    dec_state: Array
    dec_query: Array
    dec_result: Array
    dec_bias: Array
    match_query: Array    # (d_r, d_q), scores candidate context against c_t
    match_state: Array    # (d_r, d_z), scores candidate context against z_t
    embedders: list = field(default_factory=list)

    _CORE = (
        "qatt_w", "qatt_b", "qatt_out",
        "ratt_w", "ratt_b", "ratt_out",
        "dec_state", "dec_query", "dec_result", "dec_bias",
        "match_query", "match_state",
    )

    def named_arrays(self):
        """(name, array) pairs in a fixed order; embedder layers come last."""
        out = [(name, getattr(self, name)) for name in self._CORE]
        for k, emb in enumerate(self.embedders):
            for l in range(emb.n_layers):
                out.append((f"embedder{k}.w{l}", emb.weights[l]))
                out.append((f"embedder{k}.b{l}", emb.biases[l]))
        return out

    def copy(self) -> "RankerParams":
        dup = replace(self)
        for name in self._CORE:
            setattr(dup, name, getattr(self, name).copy())
        dup.embedders = [
            MlpEmbedder([w.copy() for w in e.weights], [b.copy() for b in e.biases],
                        activation=e.activation, output=e.output)
            for e in self.embedders
        ]
        return dup

    def to_vector(self) -> Array:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def from_vector(self, vec: Array) -> "RankerParams":
        """New params with the same structure and values taken from ``vec``."""
        vec = as_f64(vec)
        dup = self.copy()
        pos = 0
        for name, arr in dup.named_arrays():
            arr[...] = vec[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        if pos != vec.size:
            raise ShapeError(f"vector of length {vec.size} does not match {pos} parameters")
        return dup


def zero_grads(params: RankerParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.named_arrays()}


def grads_to_vector(params: RankerParams, grads: dict) -> Array:
    return np.concatenate([grads[name].ravel() for name, _ in params.named_arrays()])


def apply_sgd(params: RankerParams, grads: dict, lr: float) -> None:
    """In-place plain SGD step p <- p - lr * g."""
    for name, arr in params.named_arrays():
        arr -= lr * grads[name]


def init_params(dims: ModelDims, rng=None, scheme: str = "small-random",
                pooling: str = "mean", embedders=()) -> RankerParams:
    """Fresh parameters.

    "paper-zeros": the query-match matrix is the identity (requires
    d_r == d_q) and every other array is zero, which makes all attention
    weights exactly uniform on the first forward pass. "small-random" keeps
    the identity match matrix but draws everything else Uniform(-0.05, 0.05)
    from ``rng`` in ``named_arrays`` order, which lets the attention and
    decoder paths receive gradient from the start.
    """
    dims.validate()
    if pooling not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {pooling!r}")
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    shapes = {
        "qatt_w": (dims.h_att, dims.query_att_in),
        "qatt_b": (dims.h_att,),
        "qatt_out": (dims.h_att,),
        "ratt_w": (dims.h_att, dims.result_att_in),
        "ratt_b": (dims.h_att,),
        "ratt_out": (dims.h_att,),
        "dec_state": (dims.d_z, dims.d_z),
        "dec_query": (dims.d_z, dims.d_q),
        "dec_result": (dims.d_z, dims.d_r),
        "dec_bias": (dims.d_z,),
        "match_query": (dims.d_r, dims.d_q),
        "match_state": (dims.d_r, dims.d_z),
    }
    if scheme == "paper-zeros":
        if dims.d_r != dims.d_q:
            raise ValueError(
                f"paper-zeros needs matching context dims, got d_r={dims.d_r}, d_q={dims.d_q}"
            )
        arrays = {name: np.zeros(shape) for name, shape in shapes.items()}
        arrays["match_query"] = np.eye(dims.d_r)
    else:
        if rng is None:
            raise ValueError("small-random initialization needs an rng")
        arrays = {}
        for name, shape in shapes.items():
            if name == "match_query":
                continue
            arrays[name] = rng.uniform(-0.05, 0.05, size=shape)
        if dims.d_r == dims.d_q:
            arrays["match_query"] = np.eye(dims.d_r)
        else:
            arrays["match_query"] = rng.uniform(-0.05, 0.05, size=shapes["match_query"])
    return RankerParams(dims=dims, pooling=pooling, embedders=list(embedders), **arrays)


def dims_for(bundle: EmbeddingBundle, d_z: int = 32, h_att: int = 16) -> ModelDims:
    return ModelDims(m=bundle.m, n=bundle.n, d_q=bundle.d_q, d_r=bundle.d_r,
                     d_z=d_z, h_att=h_att)


# ----------------------------------------------------------------------
# pooling
# ----------------------------------------------------------------------

def _pool(arr: Array, axis: int, mode: str):
    """Reduce one axis by mean or max; max also returns argmax for backprop.

    Max ties route the gradient to the lowest index (numpy argmax rule).
    """
    if mode == "mean":
        return arr.mean(axis=axis), None
    if mode == "max":
        return arr.max(axis=axis), arr.argmax(axis=axis)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_results(bundle: EmbeddingBundle, mode: str) -> Array:
    """Pool every candidate channel vector into one d_r summary."""
    t, n, d_r = bundle.candidates.shape
    out, _ = _pool(bundle.candidates.reshape(t * n, d_r), 0, mode)
    return out


def pool_result_channel(bundle: EmbeddingBundle, channel: int, mode: str) -> Array:
    """Pool channel ``channel`` of every candidate into one d_r summary."""
    if not 0 <= channel < bundle.n:
        raise ShapeError(f"channel {channel} out of range for N={bundle.n}")
    out, _ = _pool(bundle.candidates[:, channel, :], 0, mode)
    return out


def pool_query(bundle: EmbeddingBundle, mode: str) -> Array:
    out, _ = _pool(bundle.query, 0, mode)
    return out


# ----------------------------------------------------------------------
# forward pass (batched over episodes with identical shapes)
# ----------------------------------------------------------------------

class _Tape:
    """Everything the backward pass needs, stored step-major."""

    __slots__ = (
        "Q", "R", "g", "g_src", "h", "h_src", "qbar", "qbar_src",
        "alpha", "beta", "z", "c", "dbar", "dmat",
        "qatt_in", "qatt_hid", "ratt_in", "ratt_hid",
        "sort_a_idx", "sort_b_idx", "scores",
    )


def _sorted_desc(v: Array):
    idx = np.argsort(-v, axis=-1, kind="stable")
    return np.take_along_axis(v, idx, axis=-1), idx


def _attention_inputs(z_prev, own, pooled_other, own_weight, sorted_other):
    """Concatenate [z | own-channel | pooled | own prev weight | sorted other]."""
    e, k = own.shape[:2]
    return np.concatenate(
        [
            np.broadcast_to(z_prev[:, None, :], (e, k, z_prev.shape[1])),
            own,
            np.broadcast_to(pooled_other[:, None, :], (e, k, pooled_other.shape[1])),
            own_weight[:, :, None],
            np.broadcast_to(sorted_other[:, None, :], (e, k, sorted_other.shape[1])),
        ],
        axis=2,
    )


def _forward(params: RankerParams, Q: Array, R: Array) -> _Tape:
    """Run the recurrence for a batch; Q is (E, M, d_q), R is (E, T, N, d_r)."""
    dims = params.dims
    e_sz, m, d_q = Q.shape
    _, t_sz, n, d_r = R.shape
    if (m, n, d_q, d_r) != (dims.m, dims.n, dims.d_q, dims.d_r):
        raise ShapeError(
            f"bundle with M={m}, N={n}, d_q={d_q}, d_r={d_r} does not fit model dims {dims}"
        )
    tp = _Tape()
    tp.Q, tp.R = Q, R
    flat = R.reshape(e_sz, t_sz * n, d_r)
    tp.g, tp.g_src = _pool(flat, 1, params.pooling)
    tp.h, tp.h_src = _pool(R, 1, params.pooling)          # (E, N, d_r)
    tp.qbar, tp.qbar_src = _pool(Q, 1, params.pooling)

    tp.alpha = np.empty((t_sz + 1, e_sz, m))
    tp.beta = np.empty((t_sz + 1, e_sz, n))
    tp.z = np.zeros((t_sz + 1, e_sz, dims.d_z))
    tp.alpha[0] = 1.0 / m
    tp.beta[0] = 1.0 / n
    tp.c = np.empty((t_sz, e_sz, d_q))
    tp.dbar = np.empty((t_sz, e_sz, d_r))
    tp.dmat = np.empty((t_sz, e_sz, t_sz, d_r))
    tp.qatt_in = np.empty((t_sz, e_sz, m, dims.query_att_in))
    tp.qatt_hid = np.empty((t_sz, e_sz, m, dims.h_att))
    tp.ratt_in = np.empty((t_sz, e_sz, n, dims.result_att_in))
    tp.ratt_hid = np.empty((t_sz, e_sz, n, dims.h_att))
    tp.sort_a_idx = np.empty((t_sz, e_sz, m), dtype=np.int64)
    tp.sort_b_idx = np.empty((t_sz, e_sz, n), dtype=np.int64)
    tp.scores = np.empty((e_sz, t_sz, t_sz))

    for ti in range(t_sz):
        z_prev, a_prev, b_prev = tp.z[ti], tp.alpha[ti], tp.beta[ti]
        sort_b, tp.sort_b_idx[ti] = _sorted_desc(b_prev)
        sort_a, tp.sort_a_idx[ti] = _sorted_desc(a_prev)

        qin = _attention_inputs(z_prev, Q, tp.g, a_prev, sort_b)
        qhid = np.tanh(qin @ params.qatt_w.T + params.qatt_b)
        evals = qhid @ params.qatt_out
        alpha = stable_softmax(evals, axis=-1)

        rin = _attention_inputs(z_prev, tp.h, tp.qbar, b_prev, sort_a)
        rhid = np.tanh(rin @ params.ratt_w.T + params.ratt_b)
        fvals = rhid @ params.ratt_out
        beta = stable_softmax(fvals, axis=-1)

        c = np.einsum("em,emd->ed", alpha, Q)
        dbar = np.einsum("en,end->ed", beta, tp.h)
        z_t = np.tanh(
            z_prev @ params.dec_state.T + c @ params.dec_query.T
            + dbar @ params.dec_result.T + params.dec_bias
        )
        dmat = np.einsum("en,eknd->ekd", beta, R)
        drive = c @ params.match_query.T + z_t @ params.match_state.T
        tp.scores[:, ti, :] = np.einsum("ekd,ed->ek", dmat, drive)

        tp.qatt_in[ti], tp.qatt_hid[ti] = qin, qhid
        tp.ratt_in[ti], tp.ratt_hid[ti] = rin, rhid
        tp.alpha[ti + 1], tp.beta[ti + 1], tp.z[ti + 1] = alpha, beta, z_t
        tp.c[ti], tp.dbar[ti], tp.dmat[ti] = c, dbar, dmat
    return tp


def _backward(params: RankerParams, tp: _Tape, dscores: Array):
    """Backprop through the full recurrence.

    ``dscores`` is d(loss)/d(score matrix), shape (E, T, T). Returns
    (core parameter grads, dQ, dR); embedding gradients are the callers'
    business (pool contributions are already folded into dQ/dR).
    """
    dims = params.dims
    e_sz, m, d_q = tp.Q.shape
    _, t_sz, n, d_r = tp.R.shape
    d_z = dims.d_z
    g = {name: np.zeros_like(getattr(params, name)) for name in RankerParams._CORE}
    dQ = np.zeros_like(tp.Q)
    dR = np.zeros_like(tp.R)
    dg = np.zeros((e_sz, d_r))
    dh = np.zeros((e_sz, n, d_r))
    dqbar = np.zeros((e_sz, d_q))
    carry_z = np.zeros((e_sz, d_z))
    carry_a = np.zeros((e_sz, m))
    carry_b = np.zeros((e_sz, n))

    for ti in range(t_sz - 1, -1, -1):
        alpha, beta, z_t = tp.alpha[ti + 1], tp.beta[ti + 1], tp.z[ti + 1]
        z_prev = tp.z[ti]
        c, dbar, dmat = tp.c[ti], tp.dbar[ti], tp.dmat[ti]
        ds = dscores[:, ti, :]

        # scores: s_tk = dmat_k . (Wmatch c + Vmatch z)
        drive = c @ params.match_query.T + z_t @ params.match_state.T
        u_d = np.einsum("ek,ekd->ed", ds, dmat)
        g["match_query"] += u_d.T @ c
        g["match_state"] += u_d.T @ z_t
        dc = u_d @ params.match_query
        carry_z = carry_z + u_d @ params.match_state
        ddmat = ds[:, :, None] * drive[:, None, :]
        carry_b = carry_b + np.einsum("ekd,eknd->en", ddmat, tp.R)
        dR += beta[:, None, :, None] * ddmat[:, :, None, :]

        # decoder: z_t = tanh(A z_prev + B c + D dbar + bias)
        uz = carry_z * (1.0 - z_t * z_t)
        g["dec_state"] += uz.T @ z_prev
        g["dec_query"] += uz.T @ c
        g["dec_result"] += uz.T @ dbar
        g["dec_bias"] += uz.sum(axis=0)
        dz_prev = uz @ params.dec_state
        dc += uz @ params.dec_query
        ddbar = uz @ params.dec_result

        # contexts
        carry_b += np.einsum("ed,end->en", ddbar, tp.h)
        dh += beta[:, :, None] * ddbar[:, None, :]
        carry_a = carry_a + np.einsum("ed,emd->em", dc, tp.Q)
        dQ += alpha[:, :, None] * dc[:, None, :]

        # softmax over attention logits
        de = alpha * (carry_a - np.sum(alpha * carry_a, axis=1, keepdims=True))
        df = beta * (carry_b - np.sum(beta * carry_b, axis=1, keepdims=True))

        # query attention layer
        qhid, qin = tp.qatt_hid[ti], tp.qatt_in[ti]
        g["qatt_out"] += np.einsum("em,emh->h", de, qhid)
        dpre = de[:, :, None] * (1.0 - qhid * qhid) * params.qatt_out
        g["qatt_w"] += np.einsum("emh,emi->hi", dpre, qin)
        g["qatt_b"] += dpre.sum(axis=(0, 1))
        din = np.einsum("emh,hi->emi", dpre, params.qatt_w)
        o = 0
        dz_att = din[:, :, o:o + d_z].sum(axis=1); o += d_z
        dQ += din[:, :, o:o + d_q]; o += d_q
        dg += din[:, :, o:o + d_r].sum(axis=1); o += d_r
        da_own = din[:, :, o]; o += 1
        dsort_b = din[:, :, o:o + n].sum(axis=1)

        # result attention layer (input layout: [z | h_n | qbar | b_n | sort a])
        rhid, rin = tp.ratt_hid[ti], tp.ratt_in[ti]
        g["ratt_out"] += np.einsum("en,enh->h", df, rhid)
        dpre = df[:, :, None] * (1.0 - rhid * rhid) * params.ratt_out
        g["ratt_w"] += np.einsum("enh,eni->hi", dpre, rin)
        g["ratt_b"] += dpre.sum(axis=(0, 1))
        din = np.einsum("enh,hi->eni", dpre, params.ratt_w)
        o = 0
        dz_att += din[:, :, o:o + d_z].sum(axis=1); o += d_z
        dh += din[:, :, o:o + d_r]; o += d_r
        dqbar += din[:, :, o:o + d_q].sum(axis=1); o += d_q
        db_own = din[:, :, o]; o += 1
        dsort_a = din[:, :, o:o + m].sum(axis=1)

        # carries toward the state produced at step ti-1
        carry_z = dz_prev + dz_att
        carry_a = da_own + _unsort(dsort_a, tp.sort_a_idx[ti])
        carry_b = db_own + _unsort(dsort_b, tp.sort_b_idx[ti])

    # pools (z_0, a_0, b_0 are constants; their carries are dropped)
    if params.pooling == "mean":
        dR += dg[:, None, None, :] / (t_sz * n)
        dR += dh[:, None, :, :] / t_sz
        dQ += dqbar[:, None, :] / m
    else:
        e_idx = np.arange(e_sz)
        dR_flat = dR.reshape(e_sz, t_sz * n, d_r)
        dR_flat[e_idx[:, None], tp.g_src, np.arange(d_r)] += dg
        dR[e_idx[:, None, None], tp.h_src, np.arange(n)[:, None], np.arange(d_r)] += dh
        dQ[e_idx[:, None], tp.qbar_src, np.arange(d_q)] += dqbar
    return g, dQ, dR


def _unsort(d_sorted: Array, idx: Array) -> Array:
    out = np.zeros_like(d_sorted)
    np.put_along_axis(out, idx, d_sorted, axis=-1)
    return out


# ----------------------------------------------------------------------
# selection losses on a score matrix
# ----------------------------------------------------------------------

def sequence_nll(scores: Array, orders: Array):
    """Teacher-forced negative log-likelihood of selecting ``orders``.

    ``scores`` is (E, T, T) (step, candidate), ``orders`` (E, T). At each step
    the selection softmax renormalizes over not-yet-ranked candidates only.
    Returns per-episode losses (E,) and d(loss)/d(scores).
    """
    e_sz, t_sz, _ = scores.shape
    e_idx = np.arange(e_sz)
    mask = np.ones((e_sz, t_sz), dtype=bool)
    loss = np.zeros(e_sz)
    dscores = np.zeros_like(scores)
    for ti in range(t_sz):
        row = np.where(mask, scores[:, ti, :], -np.inf)
        lse = logsumexp(row, axis=-1)
        tgt = orders[:, ti]
        loss += lse - scores[e_idx, ti, tgt]
        p = np.exp(row - lse[:, None])
        p[~mask] = 0.0
        dscores[:, ti, :] = p
        dscores[e_idx, ti, tgt] -= 1.0
        mask[e_idx, tgt] = False
    return loss, dscores


def sequence_hinge(scores: Array, orders: Array, relevance: Array):
    """Margin loss: at each step the forced pick must beat every strictly
    less relevant unranked candidate by 1. Subgradient 0 exactly at the kink.
    """
    e_sz, t_sz, _ = scores.shape
    e_idx = np.arange(e_sz)
    rel = np.asarray(relevance)
    mask = np.ones((e_sz, t_sz), dtype=bool)
    loss = np.zeros(e_sz)
    dscores = np.zeros_like(scores)
    for ti in range(t_sz):
        y = orders[:, ti]
        s_y = scores[e_idx, ti, y]
        pairs = mask & (rel < rel[e_idx, y][:, None])
        margins = 1.0 - s_y[:, None] + scores[:, ti, :]
        active = pairs & (margins > 0.0)
        loss += np.where(active, margins, 0.0).sum(axis=1)
        dscores[:, ti, :] += active
        dscores[e_idx, ti, y] -= active.sum(axis=1)
        mask[e_idx, y] = False
    return loss, dscores


def hinge_margins(scores: Array, orders: Array, relevance: Array) -> Array:
    """All counted pair margins, flattened; used to detect kink proximity."""
    e_sz, t_sz, _ = scores.shape
    e_idx = np.arange(e_sz)
    rel = np.asarray(relevance)
    mask = np.ones((e_sz, t_sz), dtype=bool)
    out = []
    for ti in range(t_sz):
        y = orders[:, ti]
        pairs = mask & (rel < rel[e_idx, y][:, None])
        margins = 1.0 - scores[e_idx, ti, y][:, None] + scores[:, ti, :]
        out.append(margins[pairs])
        mask[e_idx, y] = False
    return np.concatenate(out) if out else np.empty(0)


# ----------------------------------------------------------------------
# batched loss + gradient entry point
# ----------------------------------------------------------------------

def batch_loss_and_grads(params: RankerParams, Q: Array, R: Array, orders: Array,
                         *, loss: str = "softmax", relevance=None, average: bool = True):
    """Per-episode losses and parameter gradients for a stacked batch.

    With ``average`` the gradient is of mean(loss) over the batch, which makes
    a batch of B copies of one episode give exactly the batch-size-1 update.
    """
    Q, R = as_f64(Q), as_f64(R)
    orders = np.asarray(orders, dtype=np.int64)
    _check_orders(orders, R.shape[1])
    tp = _forward(params, Q, R)
    if loss == "softmax":
        losses, dscores = sequence_nll(tp.scores, orders)
    elif loss == "hinge":
        if relevance is None:
            raise ValueError("hinge loss needs relevance labels")
        losses, dscores = sequence_hinge(tp.scores, orders, relevance)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if not np.all(np.isfinite(losses)):
        bad = int(np.flatnonzero(~np.isfinite(losses))[0])
        raise NumericError(f"non-finite loss for batch episode {bad}")
    if average:
        dscores = dscores / Q.shape[0]
    grads, dQ, dR = _backward(params, tp, dscores)
    for k, emb in enumerate(params.embedders):
        for l in range(emb.n_layers):
            grads[f"embedder{k}.w{l}"] = np.zeros_like(emb.weights[l])
            grads[f"embedder{k}.b{l}"] = np.zeros_like(emb.biases[l])
    return losses, grads, dQ, dR


def _check_orders(orders: Array, t_sz: int):
    if orders.ndim != 2 or orders.shape[1] != t_sz:
        raise ValueError(f"orders must be (E, {t_sz}), got {orders.shape}")
    base = np.arange(t_sz)
    for row in orders:
        if not np.array_equal(np.sort(row), base):
            raise ValueError(f"order {row.tolist()} is not a permutation of 0..{t_sz - 1}")


# ----------------------------------------------------------------------
# single-episode surface
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionState:
    """Recurrence state after step ``t`` (t=0 is the start state)."""

    t: int
    alpha: Array
    beta: Array
    z: Array
    c: Array | None = None
    d_bar: Array | None = None


def initial_state(dims: ModelDims) -> AttentionState:
    return AttentionState(
        t=0,
        alpha=np.full(dims.m, 1.0 / dims.m),
        beta=np.full(dims.n, 1.0 / dims.n),
        z=np.zeros(dims.d_z),
    )


def attention_step(params: RankerParams, bundle: EmbeddingBundle, prev: AttentionState):
    """One attention step from ``prev``; returns (alpha, beta, c, d_bar)."""
    Q = bundle.query[None]
    g = pool_results(bundle, params.pooling)[None]
    h = np.stack([pool_result_channel(bundle, i, params.pooling) for i in range(bundle.n)])[None]
    qbar = pool_query(bundle, params.pooling)[None]
    z_prev = as_f64(prev.z)[None]
    a_prev = as_f64(prev.alpha)[None]
    b_prev = as_f64(prev.beta)[None]
    sort_b, _ = _sorted_desc(b_prev)
    sort_a, _ = _sorted_desc(a_prev)

    qin = _attention_inputs(z_prev, Q, g, a_prev, sort_b)
    alpha = stable_softmax(np.tanh(qin @ params.qatt_w.T + params.qatt_b) @ params.qatt_out, axis=-1)
    rin = _attention_inputs(z_prev, h, qbar, b_prev, sort_a)
    beta = stable_softmax(np.tanh(rin @ params.ratt_w.T + params.ratt_b) @ params.ratt_out, axis=-1)
    c = np.einsum("em,emd->ed", alpha, Q)
    d_bar = np.einsum("en,end->ed", beta, h)
    return alpha[0], beta[0], c[0], d_bar[0]


def decoder_step(params: RankerParams, z_prev, c, d_bar) -> Array:
    z_prev, c, d_bar = as_f64(z_prev), as_f64(c), as_f64(d_bar)
    if z_prev.shape != (params.dims.d_z,) or c.shape != (params.dims.d_q,) \
            or d_bar.shape != (params.dims.d_r,):
        raise ShapeError(
            f"decoder_step got z {z_prev.shape}, c {c.shape}, d_bar {d_bar.shape} "
            f"for dims {params.dims}"
        )
    return np.tanh(
        params.dec_state @ z_prev + params.dec_query @ c
        + params.dec_result @ d_bar + params.dec_bias
    )


def score_candidates(params: RankerParams, bundle: EmbeddingBundle,
                     state: AttentionState, unranked) -> dict:
    """Scores of the given unranked candidates under ``state``.

    Each candidate k gets context d_k = sum_n beta_n r_kn and score
    d_k . (Wmatch c + Vmatch z). Use ``selection_distribution`` for the
    step's softmax over these scores.
    """
    unranked = sorted(int(i) for i in unranked)
    if not unranked:
        raise ValueError("no unranked candidates left to score")
    if state.c is None:
        raise ValueError("state carries no query context; run attention_step first")
    drive = params.match_query @ state.c + params.match_state @ state.z
    out = {}
    for k in unranked:
        if not 0 <= k < bundle.t:
            raise ValueError(f"candidate index {k} out of range for T={bundle.t}")
        d_k = np.einsum("n,nd->d", state.beta, bundle.candidates[k])
        out[k] = float(d_k @ drive)
    return out


def selection_distribution(score_map: dict) -> dict:
    keys = sorted(score_map)
    probs = stable_softmax(np.array([score_map[k] for k in keys]))
    return dict(zip(keys, probs.tolist()))


@dataclass(frozen=True)
class RankingTrace:
    """Full record of one episode's forward pass."""

    states: list
    step_scores: list       # per step: {candidate: score} over the unranked set
    order: tuple            # emitted ranking r~_1..r~_T
    step_log_probs: Array   # log P(emitted_t | prefix) under the selection softmax

    @property
    def log_likelihood(self) -> float:
        return float(self.step_log_probs.sum())


def episode_scores(params: RankerParams, bundle: EmbeddingBundle) -> Array:
    """The (T, T) step-by-candidate score matrix for one episode."""
    return _forward(params, bundle.query[None], bundle.candidates[None]).scores[0]


def forward_episode(params: RankerParams, bundle: EmbeddingBundle,
                    target_order=None) -> RankingTrace:
    """Run all T steps; teacher-forced when ``target_order`` is given,
    otherwise greedy (argmax score, ties to the lowest candidate index)."""
    t_sz = bundle.t
    if target_order is not None:
        target_order = np.asarray(target_order, dtype=np.int64)
        _check_orders(target_order[None], t_sz)
    tp = _forward(params, bundle.query[None], bundle.candidates[None])
    scores = tp.scores[0]

    states = [
        AttentionState(
            t=ti + 1,
            alpha=tp.alpha[ti + 1, 0],
            beta=tp.beta[ti + 1, 0],
            z=tp.z[ti + 1, 0],
            c=tp.c[ti, 0],
            d_bar=tp.dbar[ti, 0],
        )
        for ti in range(t_sz)
    ]
    mask = np.ones(t_sz, dtype=bool)
    order = []
    logps = np.empty(t_sz)
    step_scores = []
    for ti in range(t_sz):
        row = np.where(mask, scores[ti], -np.inf)
        if target_order is not None:
            pick = int(target_order[ti])
        else:
            pick = int(np.argmax(row))
        logps[ti] = row[pick] - logsumexp(row)
        step_scores.append({int(k): float(scores[ti, k]) for k in np.flatnonzero(mask)})
        order.append(pick)
        mask[pick] = False
    return RankingTrace(states=states, step_scores=step_scores,
                        order=tuple(order), step_log_probs=logps)


def nll_loss(params: RankerParams, bundle: EmbeddingBundle, target_order):
    """Teacher-forced selection NLL and gradients for one episode."""
    losses, grads, _, _ = batch_loss_and_grads(
        params, bundle.query[None], bundle.candidates[None],
        np.asarray(target_order, dtype=np.int64)[None], loss="softmax", average=False,
    )
    return float(losses[0]), grads


def hinge_loss(params: RankerParams, bundle: EmbeddingBundle, target_order, relevance):
    """Teacher-forced margin loss and gradients for one episode."""
    losses, grads, _, _ = batch_loss_and_grads(
        params, bundle.query[None], bundle.candidates[None],
        np.asarray(target_order, dtype=np.int64)[None], loss="hinge",
        relevance=np.asarray(relevance)[None], average=False,
    )
    return float(losses[0]), grads


# ----------------------------------------------------------------------
# jointly trained embedder channels
# ----------------------------------------------------------------------

@dataclass
class JointChannel:
    """One embedding channel: fixed values, or an embedder index into
    ``params.embedders`` (plus a frozen flag that gates its updates)."""

    embedder: int | None = None
    values: Array | None = None
    frozen: bool = False


@dataclass
class JointEpisode:
    """Episode whose channels may be computed from raw features on the fly."""

    raw_query: Array | None
    raw_candidates: Array | None            # (T, d0)
    query_channels: list
    cand_channels: list

    def t(self) -> int:
        for ch in self.cand_channels:
            if ch.values is not None:
                return ch.values.shape[0]
        return self.raw_candidates.shape[0]


def joint_loss(params: RankerParams, ep: JointEpisode, target_order, *,
               loss: str = "softmax", relevance=None):
    """Loss and gradients with gradient flow into unfrozen embedder channels."""
    q_rows, q_tapes = [], []
    for ch in ep.query_channels:
        if ch.embedder is None:
            q_rows.append(as_f64(ch.values))
            q_tapes.append(None)
        else:
            out, layers = mlp_forward_tape(params.embedders[ch.embedder], ep.raw_query)
            q_rows.append(out)
            q_tapes.append(layers)
    r_cols, r_tapes = [], []
    for ch in ep.cand_channels:
        if ch.embedder is None:
            r_cols.append(as_f64(ch.values))
            r_tapes.append(None)
        else:
            out, layers = mlp_forward_tape(params.embedders[ch.embedder], ep.raw_candidates)
            r_cols.append(out)
            r_tapes.append(layers)
    Q = np.stack(q_rows)[None]                       # (1, M, d_q)
    R = np.stack(r_cols, axis=1)[None]               # (1, T, N, d_r)

    orders = np.asarray(target_order, dtype=np.int64)[None]
    rel = None if relevance is None else np.asarray(relevance)[None]
    losses, grads, dQ, dR = batch_loss_and_grads(
        params, Q, R, orders, loss=loss, relevance=rel, average=False,
    )
    for m_i, (ch, layers) in enumerate(zip(ep.query_channels, q_tapes)):
        if layers is None or ch.frozen:
            continue
        gw, gb, _ = mlp_backward(params.embedders[ch.embedder], layers, dQ[0, m_i])
        for l in range(len(gw)):
            grads[f"embedder{ch.embedder}.w{l}"] += gw[l]
            grads[f"embedder{ch.embedder}.b{l}"] += gb[l]
    for n_i, (ch, layers) in enumerate(zip(ep.cand_channels, r_tapes)):
        if layers is None or ch.frozen:
            continue
        gw, gb, _ = mlp_backward(params.embedders[ch.embedder], layers, dR[0, :, n_i, :])
        for l in range(len(gw)):
            grads[f"embedder{ch.embedder}.w{l}"] += gw[l]
            grads[f"embedder{ch.embedder}.b{l}"] += gb[l]
    return float(losses[0]), grads


# ----------------------------------------------------------------------
# checkpoints (same EMB1 container as embeddings)
# ----------------------------------------------------------------------

def save_params(params: RankerParams, dest, extra_meta=None) -> None:
    """Write a checkpoint; vectors are stored as single-row matrices."""
    from .embeddings import write_emb1

    tensors = [
        (name, arr if arr.ndim == 2 else arr[None, :])
        for name, arr in params.named_arrays()
    ]
    meta = {
        "kind": "ranker-checkpoint",
        "dims": {
            "m": params.dims.m, "n": params.dims.n,
            "d_q": params.dims.d_q, "d_r": params.dims.d_r,
            "d_z": params.dims.d_z, "h_att": params.dims.h_att,
        },
        "pooling": params.pooling,
        "embedders": [
            {
                "activation": e.activation,
                "output": e.output,
                "dims": [e.in_dim] + [w.shape[0] for w in e.weights],
            }
            for e in params.embedders
        ],
    }
    meta.update(extra_meta or {})
    write_emb1(dest, tensors, meta=meta)


def load_params(src) -> RankerParams:
    from .embeddings import read_emb1
    from .errors import FormatError

    tensors, manifest = read_emb1(src)
    meta = manifest.get("meta", {})
    if meta.get("kind") != "ranker-checkpoint":
        raise FormatError(f"not a ranker checkpoint: kind={meta.get('kind')!r}")
    d = meta["dims"]
    dims = ModelDims(m=int(d["m"]), n=int(d["n"]), d_q=int(d["d_q"]), d_r=int(d["d_r"]),
                     d_z=int(d["d_z"]), h_att=int(d["h_att"]))
    embedders = []
    for k, spec in enumerate(meta.get("embedders", [])):
        layer_dims = [int(x) for x in spec["dims"]]
        ws = [tensors[f"embedder{k}.w{l}"] for l in range(len(layer_dims) - 1)]
        bs = [tensors[f"embedder{k}.b{l}"].ravel() for l in range(len(layer_dims) - 1)]
        embedders.append(MlpEmbedder(ws, bs, activation=spec["activation"], output=spec["output"]))

    def grab(name, shape):
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        stored = tensors[name]
        if stored.size != int(np.prod(shape)):
            raise FormatError(f"tensor {name!r} has {stored.size} values, expected shape {shape}")
        return stored.ravel().reshape(shape).copy()

    h, d_z = dims.h_att, dims.d_z
    return RankerParams(
        dims=dims,
        pooling=meta["pooling"],
        qatt_w=grab("qatt_w", (h, dims.query_att_in)),
        qatt_b=grab("qatt_b", (h,)),
        qatt_out=grab("qatt_out", (h,)),
        ratt_w=grab("ratt_w", (h, dims.result_att_in)),
        ratt_b=grab("ratt_b", (h,)),
        ratt_out=grab("ratt_out", (h,)),
        dec_state=grab("dec_state", (d_z, d_z)),
        dec_query=grab("dec_query", (d_z, dims.d_q)),
        dec_result=grab("dec_result", (d_z, dims.d_r)),
        dec_bias=grab("dec_bias", (d_z,)),
        match_query=grab("match_query", (dims.d_r, dims.d_q)),
        match_state=grab("match_state", (dims.d_r, d_z)),
        embedders=embedders,
    )
