"""Dense array helpers, stable softmax and normalized entropy.

Matrices are plain ``numpy.ndarray`` objects in row-major (C) order. The
elementwise helpers keep float32 inputs in float32 and promote everything
else to float64.
All randomness in the package flows through :func:`make_rng`, which pins the
PCG64 bit generator so a seed yields the same stream on every platform.
"""

import math

import numpy as np

from .exceptions import InvalidInputError, ShapeError

PROB_EPS = 1e-12


def make_rng(seed):
    """Return a PCG64-backed generator for ``seed``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_seed(rng):
    """Draw a fresh 63-bit seed from ``rng`` (hands randomness to a sub-task)."""
    return int(rng.integers(0, 2**63 - 1))


def as_float(x):
    """Array view of ``x`` in float32 or float64; anything else becomes float64."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return x


def _as_finite(x, name="input"):
    x = as_float(x)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def softmax(logits):
    """Softmax along the last axis, computed with max subtraction.

    Accepts a single logit vector or a batch (one row per sample).
    """
    z = _as_finite(logits, "logits")
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("softmax needs at least two logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = _as_finite(logits, "logits")
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("log_softmax needs at least two logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def validate_probs(p, atol=1e-6):
    p = _as_finite(p, "probabilities")
    if p.ndim == 0 or p.shape[-1] < 2:
        raise InvalidInputError("probability vectors need length >= 2")
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise InvalidInputError("probabilities must sum to 1")
    return p


def normalized_entropy(p):
    """Shannon entropy divided by ``log(n_classes)``, in [0, 1].

    Works on one vector or row-wise on a batch. Entries are clamped to
    ``PROB_EPS`` before the logarithm.
    """
    p = as_float(p)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise InvalidInputError("normalized entropy needs at least two classes")
    pc = np.maximum(p, PROB_EPS)
    h = -(pc * np.log(pc)).sum(axis=-1)
    return h / math.log(p.shape[-1])


def normalized_entropy_grad(p):
    """Gradient of :func:`normalized_entropy` with respect to ``p``.

    Uses the clamped probabilities, matching the forward value; entries below
    the clamp get zero gradient.
    """
    p = as_float(p)
    pc = np.maximum(p, PROB_EPS)
    g = -(np.log(pc) + 1.0) / math.log(p.shape[-1])
    return np.where(p > PROB_EPS, g, 0.0)


def softmax_backward(probs, grad_probs):
    """Pull a gradient w.r.t. softmax outputs back to the logits (row-wise)."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def _check_2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = _check_2d(a, "left operand")
    b = _check_2d(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a, b):
    a = _check_2d(a, "left operand")
    b = _check_2d(b, "right operand")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def scale(a, factor):
    return _check_2d(a, "operand") * float(factor)


def transpose(a):
    return np.ascontiguousarray(_check_2d(a, "operand").T)


def l2_normalize_rows(x, min_norm=1e-8):
    """Row-wise L2 normalisation along the last axis.

    Rows whose norm is below ``min_norm`` are replaced by the first basis
    vector. Returns ``(normalized, norms, degenerate_mask)``.
    """
    x = as_float(x)
    norms = np.linalg.norm(x, axis=-1)
    degenerate = norms < min_norm
    safe = np.where(degenerate, 1.0, norms)
    z = x / safe[..., None]
    if np.any(degenerate):
        z[degenerate] = 0.0
        z[degenerate, 0] = 1.0
    return z, norms, degenerate
