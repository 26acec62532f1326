"""Dense float64 numerics shared by every model module.

All model arithmetic is IEEE-754 double precision: the gradient checks this
package leans on need ~1e-4 relative agreement, which single precision cannot
deliver. Matrices are plain C-order ``numpy.ndarray``s.

Randomness: every stream is a numpy ``Generator`` over PCG64. Independent
streams for distinct purposes are derived from one root seed by mixing a
blake2b hash of the purpose tag into the seed sequence (see ``derive_rng``),
so a run is reproducible bit-for-bit from a single integer.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray

_U64 = (1 << 64) - 1


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


# ----------------------------------------------------------------------
# softmax / logsumexp
# ----------------------------------------------------------------------

def stable_softmax(v, axis: int = -1) -> Array:
    """Exp-normalize with max-subtraction, safe against overflow.

    Raises ``ValueError`` on empty input and ``NumericError`` on non-finite
    entries. Output entries are positive and sum to 1 along ``axis``.
    """
    v = as_f64(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax input contains non-finite entries")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    ev = np.exp(shifted)
    return ev / np.sum(ev, axis=axis, keepdims=True)


def logsumexp(v, axis: int = -1) -> Array:
    """log(sum(exp(v))) with max-subtraction; tolerates -inf entries."""
    v = as_f64(v)
    hi = np.max(v, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    out = np.log(np.sum(np.exp(v - hi), axis=axis, keepdims=True)) + hi
    return np.squeeze(out, axis=axis)


def masked_log_softmax(v: Array, mask: Array, axis: int = -1) -> Array:
    """Log-probabilities normalized over ``mask`` only; -inf elsewhere."""
    neg = np.where(mask, as_f64(v), -np.inf)
    return neg - np.expand_dims(logsumexp(neg, axis=axis), axis)


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------

def tanh_affine(x, weight, bias) -> Array:
    """tanh(weight @ x + bias) for a single vector ``x``."""
    x, weight, bias = as_f64(x), as_f64(weight), as_f64(bias)
    if weight.ndim != 2 or x.ndim != 1 or bias.ndim != 1:
        raise ShapeError(
            f"tanh_affine expects matrix/vector/vector, got weight {weight.shape}, "
            f"x {x.shape}, bias {bias.shape}"
        )
    if weight.shape[1] != x.shape[0] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(
            f"tanh_affine: weight {weight.shape} incompatible with x ({x.shape[0]},) "
            f"and bias ({bias.shape[0]},)"
        )
    return np.tanh(weight @ x + bias)


# ----------------------------------------------------------------------
# seeded randomness
# ----------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Root PCG64 stream for ``seed`` (taken modulo 2**64)."""
    return np.random.Generator(np.random.PCG64(int(seed) & _U64))


def derive_rng(seed: int, *purpose) -> np.random.Generator:
    """Independent PCG64 stream for (seed, purpose).

    The purpose parts are joined with '/' and hashed with blake2b; the 64-bit
    digest is appended to the seed sequence entropy. Same seed + same purpose
    gives the same stream; distinct purposes give statistically independent
    streams.
    """
    tag = "/".join(str(p) for p in purpose)
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    mixer = int.from_bytes(digest, "little")
    ss = np.random.SeedSequence([int(seed) & _U64, mixer])
    return np.random.Generator(np.random.PCG64(ss))


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------

def grad_check(f, p, analytic_grad, step: float = 1e-5) -> float:
    """Max relative error between ``analytic_grad`` and central differences.

    Per coordinate i: g_fd = (f(p + h e_i) - f(p - h e_i)) / 2h and the
    relative error is |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|). The 1e-8
    floor keeps dead coordinates (both gradients ~0) from dividing 0 by 0.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    p = as_f64(p).copy()
    g_an = as_f64(analytic_grad)
    if p.shape != g_an.shape:
        raise ShapeError(
            f"parameter vector {p.shape} and analytic gradient {g_an.shape} differ"
        )
    worst = 0.0
    for i in range(p.size):
        keep = p.flat[i]
        p.flat[i] = keep + step
        f_hi = float(f(p))
        p.flat[i] = keep - step
        f_lo = float(f(p))
        p.flat[i] = keep
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError(f"non-finite objective at coordinate {i}")
        g_fd = (f_hi - f_lo) / (2.0 * step)
        err = abs(g_fd - g_an.flat[i]) / max(1e-8, abs(g_fd) + abs(g_an.flat[i]))
        if err > worst:
            worst = err
    return worst
