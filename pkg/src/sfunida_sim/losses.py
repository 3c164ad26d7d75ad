"""Adaptation objectives and their analytic gradients.

Two families:

* ``contrastive``: sample-vs-prototype softmax contrast in projection space
  plus ``lambda_balance`` times an entropy separation term on the classifier
  outputs (low entropy for known pseudo-labels, high for unknown).
* ``cross_entropy``: CE on the classifier, with a uniform target vector for
  samples pseudo-labelled unknown.

All functions take a :class:`~sfunida_sim.plsim.PseudoLabels` batch result;
unselected samples contribute nothing. Inputs may carry a leading cell axis
(stacked runs); each cell is then an independent problem and ``loss`` is an
array with one value per cell.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError
from .numerics import PROB_EPS, as_float, normalized_entropy, normalized_entropy_grad, softmax_backward
from .plsim import UNKNOWN, PseudoLabels

LOSS_KINDS = ("contrastive", "cross_entropy")
BALANCED_TERMS = ("separation", "contrastive")
UNKNOWN_HANDLING = ("prototype", "repel", "exclude")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "contrastive"
    temperature: float = 0.1
    lambda_balance: float = 0.3
    prototype_momentum: float = 0.9
    unknown_handling: str = "repel"
    balanced_term: str = "separation"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidInputError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.unknown_handling not in UNKNOWN_HANDLING:
            raise InvalidInputError(f"unknown_handling must be one of {UNKNOWN_HANDLING}")
        if self.balanced_term not in BALANCED_TERMS:
            raise InvalidInputError(f"balanced_term must be one of {BALANCED_TERMS}")
        if not self.temperature > 0:
            raise InvalidInputError("temperature must be > 0")
        if self.lambda_balance < 0:
            raise InvalidInputError("lambda_balance must be >= 0")
        if not 0.0 <= self.prototype_momentum <= 1.0:
            raise InvalidInputError("prototype_momentum must lie in [0, 1]")


@dataclass
class LossResult:
    loss: float
    grad_logits: np.ndarray
    grad_projections: np.ndarray | None = None
    empty: bool = False
    parts: dict = field(default_factory=dict)


@dataclass
class PrototypeBank:
    """Unit vectors per known class, with one extra row (the last) for unknown.

    ``vectors`` is ``(K + 1, P)``, or ``(C, K + 1, P)`` for stacked cells.
    """

    vectors: np.ndarray
    initialized: np.ndarray

    @classmethod
    def empty(cls, num_known_classes, projection_dim, cells=None, dtype=np.float64):
        lead = () if cells is None else (cells,)
        return cls(
            np.zeros(lead + (num_known_classes + 1, projection_dim), dtype=dtype),
            np.zeros(lead + (num_known_classes + 1,), dtype=bool),
        )

    @property
    def num_known_classes(self):
        return self.vectors.shape[-2] - 1

    def row(self, label):
        return self.num_known_classes if label == UNKNOWN else int(label)

    def rows(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        return np.where(labels == UNKNOWN, self.num_known_classes, labels)

    def copy(self):
        return PrototypeBank(self.vectors.copy(), self.initialized.copy())

    def cell(self, i):
        return PrototypeBank(self.vectors[i].copy(), self.initialized[i].copy())


def _lift(pseudo):
    """(single, stacked view) of a pseudo-label result."""
    if pseudo.selected.ndim == 2:
        return False, pseudo
    return True, PseudoLabels(*(a[None] for a in (
        pseudo.entropy, pseudo.distance, pseudo.selected, pseudo.labels, pseudo.correct)))


def _out(single, a):
    if a is None or not single:
        return a
    return float(a[0]) if np.ndim(a) == 1 else a[0]


def _bank3(bank):
    if bank.vectors.ndim == 2:
        return bank.vectors[None], bank.initialized[None]
    return bank.vectors, bank.initialized


def contrastive_loss(projections, pseudo, bank, cfg):
    """Mean over contributing samples of ``-log softmax(z . mu / T)[label]``.

    Only initialised prototypes form the denominator; samples whose label has
    no prototype yet are skipped. Prototypes are constants for the gradient.

    With ``unknown_handling="repel"`` an unknown-labelled sample has no
    prototype of its own: its positive is a fixed zero logit, giving
    ``log(1 + sum_c exp(z . mu_c / T))`` over the known prototypes.
    """
    single, ps = _lift(pseudo)
    z = as_float(projections)
    z = z[None] if single else z
    V, init = _bank3(bank)
    K = V.shape[-2] - 1
    T = cfg.temperature
    C, B = ps.selected.shape

    unk = ps.labels == UNKNOWN
    rows = np.where(unk, K, np.maximum(ps.labels, 0))
    active = init.copy()
    if cfg.unknown_handling == "repel":
        active[:, K] = False
    has_pos = np.take_along_axis(init, rows, axis=-1)
    if cfg.unknown_handling == "prototype":
        proto = ps.selected & has_pos
        null = np.zeros_like(proto)
    else:
        proto = ps.selected & ~unk & has_pos
        null = ps.selected & unk
        if cfg.unknown_handling == "exclude":
            null = np.zeros_like(null)
        else:
            null &= active.any(axis=-1, keepdims=True)
    contrib = proto | null
    n = contrib.sum(axis=-1)
    grad = np.zeros_like(z)
    loss = np.zeros(C)
    if n.any():
        s = z @ np.swapaxes(V, -1, -2) / T
        # extra column: the zero logit positive of repelled unknown samples
        s_ext = np.concatenate([s, np.zeros((C, B, 1), dtype=s.dtype)], axis=-1)
        allowed = np.concatenate(
            [np.broadcast_to(active[:, None, :], s.shape), null[..., None]], axis=-1)
        allowed &= contrib[..., None]
        s_ext = np.where(allowed, s_ext, -np.inf)
        s_ext[~contrib] = 0.0
        s_max = s_ext.max(axis=-1, keepdims=True)
        e = np.exp(s_ext - s_max)
        log_norm = s_max[..., 0] + np.log(e.sum(axis=-1))
        pos = np.where(null, K + 1, rows)
        s_pos = np.take_along_axis(s_ext, pos[..., None], axis=-1)[..., 0]
        per = np.where(contrib, log_norm - s_pos, 0.0)
        nn = np.maximum(n, 1)
        loss = per.sum(axis=-1) / nn
        w = np.exp(s_ext - log_norm[..., None])
        np.put_along_axis(w, pos[..., None],
                          np.take_along_axis(w, pos[..., None], axis=-1) - 1.0, axis=-1)
        w = w[..., :-1] * (contrib / (T * nn[:, None])).astype(z.dtype)[..., None]
        grad = w @ V
    empty = n == 0
    return LossResult(_out(single, loss), None, _out(single, grad),
                      empty=bool(empty[0]) if single else empty)


def separation_loss(probs, pseudo):
    """Mean ``I(p)`` over known pseudo-labels plus mean ``1 - I(p)`` over unknown ones.

    The gradient is returned w.r.t. the logits.
    """
    single, ps = _lift(pseudo)
    p = as_float(probs)
    p = p[None] if single else p
    ent = normalized_entropy(p)
    dent = normalized_entropy_grad(p)
    known = ps.selected & (ps.labels != UNKNOWN)
    unknown = ps.selected & (ps.labels == UNKNOWN)
    nk, nu = known.sum(axis=-1), unknown.sum(axis=-1)
    wk = (known / np.maximum(nk, 1)[:, None]).astype(p.dtype)
    wu = (unknown / np.maximum(nu, 1)[:, None]).astype(p.dtype)
    loss = (ent * wk).sum(axis=-1) + ((1.0 - ent) * wu).sum(axis=-1)
    grad_p = dent * (wk - wu)[..., None]
    empty = nk + nu == 0
    return LossResult(_out(single, loss), _out(single, softmax_backward(p, grad_p)), None,
                      empty=bool(empty[0]) if single else empty)


def combined_contrastive_objective(probs, projections, pseudo, bank, cfg):
    """``L_con + lambda_balance * L_sep`` with gradients for both heads.

    With ``cfg.balanced_term == "contrastive"`` the factor moves to the other
    term: ``lambda_balance * L_con + L_sep``.
    """
    con = contrastive_loss(projections, pseudo, bank, cfg)
    sep = separation_loss(probs, pseudo)
    lam = cfg.lambda_balance
    w_con, w_sep = (1.0, lam) if cfg.balanced_term == "separation" else (lam, 1.0)
    return LossResult(
        w_con * con.loss + w_sep * sep.loss,
        w_sep * sep.grad_logits,
        w_con * con.grad_projections,
        empty=con.empty & sep.empty,
        parts={"contrastive": con.loss, "separation": sep.loss},
    )


def cross_entropy_targets(labels, num_classes, dtype=np.float64):
    """One-hot rows for known labels, uniform rows for ``UNKNOWN``, zeros otherwise."""
    labels = np.asarray(labels, dtype=np.int64)
    known = labels >= 0
    t = (np.arange(num_classes) == np.where(known, labels, -1)[..., None]).astype(dtype)
    t[labels == UNKNOWN] = 1.0 / num_classes
    return t


def cross_entropy_loss(probs, pseudo):
    """Mean CE over selected samples; unknown pseudo-labels target the uniform vector."""
    single, ps = _lift(pseudo)
    p = as_float(probs)
    p = p[None] if single else p
    t = cross_entropy_targets(np.where(ps.selected, ps.labels, -2), p.shape[-1], p.dtype)
    n = ps.selected.sum(axis=-1)
    w = (ps.selected / np.maximum(n, 1)[:, None]).astype(p.dtype)
    per = -(t * np.log(np.maximum(p, PROB_EPS))).sum(axis=-1)
    loss = (per * w).sum(axis=-1)
    grad = (p - t) * w[..., None]
    empty = n == 0
    return LossResult(_out(single, loss), _out(single, grad), None,
                      empty=bool(empty[0]) if single else empty)


def update_prototypes(bank, projections, pseudo, cfg):
    """Class-wise EMA of normalised batch means, in place; returns ``bank``."""
    single, ps = _lift(pseudo)
    z = as_float(projections)
    z = z[None] if single else z
    V, init = _bank3(bank)
    K = V.shape[-2] - 1
    m = cfg.prototype_momentum
    unk = ps.labels == UNKNOWN
    rows = np.where(ps.selected, np.where(unk, K, ps.labels), -1)
    R = K + 1 if cfg.unknown_handling == "prototype" else K
    onehot = rows[:, None, :] == np.arange(R)[None, :, None]
    cnt = onehot.sum(axis=-1)
    if not cnt.any():
        return bank
    mean = (onehot.astype(z.dtype) @ z) / np.maximum(cnt, 1)[..., None].astype(z.dtype)
    norm = np.linalg.norm(mean, axis=-1)
    ok = (cnt > 0) & (norm >= 1e-8)
    mean = mean / np.where(ok, norm, 1.0)[..., None]
    old = V[:, :R]
    mixed = m * old + (1.0 - m) * mean
    mixed_norm = np.linalg.norm(mixed, axis=-1)
    was = init[:, :R]
    mixed = mixed / np.where(mixed_norm < 1e-8, 1.0, mixed_norm)[..., None]
    ok &= ~(was & (mixed_norm < 1e-8))
    upd = np.where(was[..., None], mixed, mean)
    V[:, :R] = np.where(ok[..., None], upd, old)
    init[:, :R] |= ok
    return bank
