"""Small MLP classifier with a projection head and hand-written backprop.

Layout::

    x -> [W1, b1] -> ReLU -> [W2, b2] = features f
    f -> [Wc, bc] -> logits -> softmax -> probs
    f -> [Wp, bp] -> raw projection -> L2 normalise -> projection z

Weights are stored as ``(fan_in, fan_out)`` so a batch is ``x @ W + b``.

A state may also be *stacked*: every parameter gains a leading cell axis
(weights ``(C, fan_in, fan_out)``, biases ``(C, 1, fan_out)``) and all cells
see the same input batch. This lets many grid cells that share a model and a
stream advance in lockstep. Each cell's arithmetic is the same as for a
single state.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, NumericError, ShapeError
from .numerics import l2_normalize_rows, make_rng, softmax

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wc", "bc", "Wp", "bp")

CHECKPOINT_CONFIG_KEYS = (
    "input_dim",
    "hidden_dim",
    "feature_dim",
    "num_known_classes",
    "projection_dim",
)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    hidden_dim: int = 64
    feature_dim: int = 64
    num_known_classes: int = 6
    projection_dim: int = 128

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "feature_dim", "projection_dim"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.num_known_classes < 2:
            raise InvalidInputError("num_known_classes must be >= 2")

    def shapes(self):
        return {
            "W1": (self.input_dim, self.hidden_dim),
            "b1": (self.hidden_dim,),
            "W2": (self.hidden_dim, self.feature_dim),
            "b2": (self.feature_dim,),
            "Wc": (self.feature_dim, self.num_known_classes),
            "bc": (self.num_known_classes,),
            "Wp": (self.feature_dim, self.projection_dim),
            "bp": (self.projection_dim,),
        }


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.velocity:
            self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def dtype(self):
        return self.params["W1"].dtype

    def astype(self, dtype):
        """Copy with parameters and velocity converted to ``dtype``."""
        return ModelState(
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.velocity.items()},
        )

    @property
    def num_cells(self):
        """Number of stacked cells, or ``None`` for a plain state."""
        w = self.params["W1"]
        return w.shape[0] if w.ndim == 3 else None

    def copy(self):
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.velocity.items()},
        )

    def reset_velocity(self):
        for v in self.velocity.values():
            v[...] = 0.0

    def stack(self, n):
        """``n`` independent copies of this (plain) state along a new cell axis."""
        if self.num_cells is not None:
            raise InvalidInputError("state is already stacked")

        def rep(a):
            a = a if a.ndim == 2 else a[None, :]
            return np.repeat(a[None], n, axis=0)

        return ModelState(
            self.config,
            {k: rep(v) for k, v in self.params.items()},
            {k: rep(v) for k, v in self.velocity.items()},
        )

    def cell(self, i):
        """Plain state holding a copy of stacked cell ``i``."""
        if self.num_cells is None:
            raise InvalidInputError("state is not stacked")
        shapes = self.config.shapes()
        return ModelState(
            self.config,
            {k: v[i].reshape(shapes[k]).copy() for k, v in self.params.items()},
            {k: v[i].reshape(shapes[k]).copy() for k, v in self.velocity.items()},
        )


@dataclass(frozen=True)
class ForwardRecord:
    inputs: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    projection_raw: np.ndarray | None = None
    projection_norms: np.ndarray | None = None
    projection_degenerate: np.ndarray | None = None
    projections: np.ndarray | None = None


def _t(a):
    return np.swapaxes(a, -1, -2)


def init_model(config, rng):
    """Draw weights from N(0, 1/fan_in); biases and velocities start at zero."""
    rng = make_rng(rng)
    params = {}
    for name, shape in config.shapes().items():
        if name.startswith("W"):
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            params[name] = np.zeros(shape)
    return ModelState(config, params)


def forward(state, batch_features, with_projection=True):
    x = np.asarray(batch_features).astype(state.dtype, copy=False)
    if x.ndim != 2 or x.shape[1] != state.config.input_dim:
        raise ShapeError(
            f"expected features of shape (n, {state.config.input_dim}), got {x.shape}"
        )
    p = state.params
    a1 = x @ p["W1"] + p["b1"]
    h1 = np.maximum(a1, 0.0)
    f = h1 @ p["W2"] + p["b2"]
    logits = f @ p["Wc"] + p["bc"]
    if not with_projection:
        return ForwardRecord(x, a1, h1, f, logits, softmax(logits))
    u = f @ p["Wp"] + p["bp"]
    z, norms, degenerate = l2_normalize_rows(u)
    return ForwardRecord(
        inputs=x,
        hidden_pre=a1,
        hidden=h1,
        features=f,
        logits=logits,
        probs=softmax(logits),
        projection_raw=u,
        projection_norms=norms,
        projection_degenerate=degenerate,
        projections=z,
    )


def backward(state, record, grad_logits, grad_projections=None):
    """Gradients of a scalar objective given its gradients at both heads.

    ``grad_projections`` is taken w.r.t. the *normalised* projections; the
    normalisation Jacobian is applied here. Returns a dict keyed like
    ``state.params``; ``Wp``/``bp`` are omitted when no projection gradient
    is given (they would be zero).
    """
    gl = np.asarray(grad_logits).astype(state.dtype, copy=False)
    if gl.shape != record.logits.shape:
        raise ShapeError(f"grad_logits must have shape {record.logits.shape}, got {gl.shape}")
    p = state.params
    f = record.features
    grads = {"Wc": _t(f) @ gl, "bc": gl.sum(axis=-2).reshape(p["bc"].shape)}
    gf = gl @ _t(p["Wc"])

    if grad_projections is not None:
        if record.projections is None:
            raise ShapeError("record was computed without projections")
        gz = np.asarray(grad_projections).astype(state.dtype, copy=False)
        z = record.projections
        if gz.shape != z.shape:
            raise ShapeError(f"grad_projections must have shape {z.shape}, got {gz.shape}")
        # d z / d u = (I - z z^T) / |u|; degenerate rows get no gradient
        radial = (gz * z).sum(axis=-1, keepdims=True)
        norms = np.where(record.projection_degenerate, 1.0, record.projection_norms)
        gu = (gz - z * radial) / norms[..., None]
        gu[record.projection_degenerate] = 0.0
        grads["Wp"] = _t(f) @ gu
        grads["bp"] = gu.sum(axis=-2).reshape(p["bp"].shape)
        gf = gf + gu @ _t(p["Wp"])

    grads["W2"] = _t(record.hidden) @ gf
    grads["b2"] = gf.sum(axis=-2).reshape(p["b2"].shape)
    ga1 = (gf @ _t(p["W2"])) * (record.hidden_pre > 0)
    grads["W1"] = record.inputs.T @ ga1
    grads["b1"] = ga1.sum(axis=-2).reshape(p["b1"].shape)
    return grads


def sgd_step(state, gradients, optim):
    """Heavy-ball momentum update, in place: ``v = m*v + g; theta -= lr*v``.

    Parameters missing from ``gradients`` get a zero gradient.
    """
    for name, g in gradients.items():
        if g.shape != state.params[name].shape:
            raise ShapeError(
                f"gradient {name} has shape {g.shape}, parameter has {state.params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}", tensor_name=name)
    for name in PARAM_NAMES:
        v = state.velocity[name]
        g = gradients.get(name)
        if g is None and not v.any():
            continue
        v *= optim.momentum
        if g is not None:
            v += g
        state.params[name] -= optim.learning_rate * v
    return state


def cross_entropy_grad(probs, labels):
    """Mean CE over hard labels; returns ``(loss, grad_logits)``."""
    n = probs.shape[0]
    picked = np.maximum(probs[np.arange(n), labels], 1e-12)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(-np.log(picked).mean()), grad / n


def pretrain_source(config, features, labels, rng, epochs=30, batch_size=64, optim=None):
    """Supervised source training with plain cross-entropy.

    The returned parameters are rounded to float32 so that a checkpoint
    round trip reproduces the in-memory model exactly.
    """
    rng = make_rng(rng)
    optim = optim or OptimConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= config.num_known_classes):
        raise InvalidInputError("source labels must index known classes")
    state = init_model(config, rng)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            rec = forward(state, x[idx], with_projection=False)
            _, gl = cross_entropy_grad(rec.probs, y[idx])
            sgd_step(state, backward(state, rec, gl), optim)
    state.params = {k: v.astype(np.float32).astype(np.float64) for k, v in state.params.items()}
    state.reset_velocity()
    return state


def save_checkpoint(state, path):
    """Write parameters as little-endian float32 arrays in a ``.npz`` archive.

    Entries: ``config`` (int64 array in ``CHECKPOINT_CONFIG_KEYS`` order) and
    one ``<f4`` array per parameter name. Optimizer velocity is not stored.
    """
    if state.num_cells is not None:
        raise InvalidInputError("cannot checkpoint a stacked state")
    cfg = state.config
    arrays = {
        "config": np.array([getattr(cfg, k) for k in CHECKPOINT_CONFIG_KEYS], dtype="<i8")
    }
    for name in PARAM_NAMES:
        arrays[name] = np.ascontiguousarray(state.params[name], dtype="<f4")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        values = (int(v) for v in data["config"])
        config = ModelConfig(**dict(zip(CHECKPOINT_CONFIG_KEYS, values)))
        params = {}
        for name, shape in config.shapes().items():
            arr = data[name]
            if arr.shape != shape:
                raise ShapeError(f"checkpoint entry {name} has shape {arr.shape}, expected {shape}")
            params[name] = arr.astype(np.float64)
    return ModelState(config, params)
