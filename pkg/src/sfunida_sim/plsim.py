"""Pseudo-labels of prescribed quantity and quality.

Given the model's predictions on a batch (before any update on it) and the
ground truth, choose which samples adapt and which label each receives:

1. normalized entropy ``I`` per sample and its distance to the nearest
   extreme, ``d = min(I, 1 - I)``;
2. the ``q`` percent of the batch with the smallest ``d`` is selected;
3. the ``a`` percent of the selection with the smallest ``d`` gets its true
   label, the rest a deliberately wrong one chosen from the predictions.

Everything here is deterministic; ties on ``d`` go to the lower index.
"""

import csv
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .exceptions import InvalidInputError
from .numerics import normalized_entropy, validate_probs

UNKNOWN = -1
EXCLUDED = -2


@dataclass(frozen=True)
class PseudoLabelConfig:
    quantity_q: float = 100.0
    quality_a: float = 100.0
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("quantity_q", "quality_a"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise InvalidInputError(f"{name} must be a percentage in [0, 100], got {v}")
        if self.alpha < 0:
            raise InvalidInputError("alpha must be >= 0")


@dataclass(frozen=True)
class PseudoLabelAssignment:
    sample_index: int
    selected: bool
    label: int | None
    intended_correct: bool


@dataclass(frozen=True)
class PseudoLabels:
    """Batch-level result of :func:`simulate_pseudo_labels`.

    ``labels`` holds a known class index, ``UNKNOWN``, or ``EXCLUDED`` for
    samples that were not selected.
    """

    entropy: np.ndarray
    distance: np.ndarray
    selected: np.ndarray
    labels: np.ndarray
    correct: np.ndarray

    @property
    def n_selected(self):
        n = self.selected.sum(axis=-1)
        return int(n) if np.ndim(n) == 0 else n

    @property
    def n_correct(self):
        n = self.correct.sum(axis=-1)
        return int(n) if np.ndim(n) == 0 else n

    def cell(self, i):
        """One cell of a stacked result."""
        return PseudoLabels(self.entropy[i], self.distance[i], self.selected[i],
                            self.labels[i], self.correct[i])

    def assignments(self):
        return [
            PseudoLabelAssignment(
                sample_index=i,
                selected=bool(self.selected[i]),
                label=int(self.labels[i]) if self.selected[i] else None,
                intended_correct=bool(self.correct[i]),
            )
            for i in range(len(self.labels))
        ]


@lru_cache(maxsize=4096)
def round_half_up_count(percent, n):
    """``round(percent / 100 * n)`` with halves rounded up, computed exactly."""
    frac = Fraction(str(percent)) * int(n) / 100
    return int((frac + Fraction(1, 2)) // 1)


def confidence_distance(entropy):
    i = np.clip(np.asarray(entropy, dtype=np.float64), 0.0, 1.0)
    d = np.minimum(i, 1.0 - i)
    return float(d) if d.ndim == 0 else d


def _order(distances):
    # stable sort keeps ascending index among equal distances
    return np.argsort(np.asarray(distances, dtype=np.float64), kind="stable")


def select_for_adaptation(distances, q):
    """Indices of the ``round(q% * B)`` smallest distances, in rank order."""
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("distances must be finite")
    k = round_half_up_count(q, d.shape[0])
    return _order(d)[:k]


def split_by_quality(selected, distances, a):
    """Split ``selected`` into (correct, incorrect) index arrays.

    The ``round(a% * k)`` selected samples with the smallest distance are
    the correct ones.
    """
    selected = np.asarray(selected, dtype=np.int64)
    d = np.asarray(distances, dtype=np.float64)[selected]
    ranked = selected[_order(d)]
    m = round_half_up_count(a, selected.shape[0])
    return ranked[:m], ranked[m:]


def assign_incorrect_labels(probs, true_labels, alpha=1.0):
    """Row-wise wrong label for each sample (vectorised form).

    Truly unknown samples get their most probable known class. Known samples
    get the most probable *other* class unless its probability falls below
    ``alpha * I(p)``, in which case they become ``UNKNOWN``.

    ``probs`` may carry a leading cell axis ``(C, n, K)``; ``alpha`` may then
    be one value per cell.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    t = np.atleast_1d(np.asarray(true_labels, dtype=np.int64))
    n, n_classes = p.shape[-2:]
    known = t != UNKNOWN
    if n_classes < 2 and np.any(known):
        raise InvalidInputError("no incorrect known class exists with fewer than 2 classes")
    masked = p.copy()
    kidx = np.flatnonzero(known)
    masked[..., kidx, t[kidx]] = -np.inf
    runner_up = np.argmax(masked, axis=-1)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim:
        alpha = alpha[:, None]
    tau = alpha * normalized_entropy(p)
    p_runner = np.take_along_axis(p, runner_up[..., None], axis=-1)[..., 0]
    return np.where(known & (p_runner < tau), UNKNOWN, runner_up).astype(np.int64)


def assign_incorrect_label(p, true_label, alpha=1.0):
    p = validate_probs(p)
    if p.ndim != 1:
        raise InvalidInputError("expected a single probability vector")
    if true_label != UNKNOWN and not 0 <= true_label < p.shape[0]:
        raise InvalidInputError(f"true label {true_label} is not a known class")
    return int(assign_incorrect_labels(p[None, :], [true_label], alpha)[0])


def _check_truth(t, n, n_classes):
    t = np.asarray(t, dtype=np.int64)
    if t.shape != (n,):
        raise InvalidInputError("truth must carry one label per sample")
    if np.any((t != UNKNOWN) & ((t < 0) | (t >= n_classes))):
        raise InvalidInputError("truth contains labels outside the known classes")
    return t


def _simulate(p, t, qs, as_, alphas):
    # p: (C, n, K); per-cell quantity, quality and alpha
    n = p.shape[-2]
    entropy = normalized_entropy(p)
    distance = confidence_distance(entropy)
    order = np.argsort(distance, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[None, :].repeat(p.shape[0], 0), axis=-1)
    k = np.array([round_half_up_count(q, n) for q in qs])
    m = np.array([round_half_up_count(a, kk) for a, kk in zip(as_, k)])
    selected = rank < k[:, None]
    correct = rank < m[:, None]
    wrong = assign_incorrect_labels(p, t, alphas)
    labels = np.where(selected, np.where(correct, t, wrong), EXCLUDED)
    return PseudoLabels(entropy, distance, selected, labels.astype(np.int64), correct)


def simulate_pseudo_labels(probs, truth, cfg):
    """Pseudo-label one batch.

    ``probs`` are the predictions of the current model before it is updated on
    this batch; ``truth`` uses ``UNKNOWN`` for target-private samples.
    """
    p = validate_probs(np.atleast_2d(probs))
    t = _check_truth(truth, p.shape[0], p.shape[1])
    res = _simulate(p[None], t, [cfg.quantity_q], [cfg.quality_a], [cfg.alpha])
    return res.cell(0)


def simulate_pseudo_labels_stacked(probs, truth, cfgs):
    """Pseudo-label the same batch for many cells at once.

    ``probs`` has shape ``(C, n, K)`` and ``cfgs`` holds one config per cell.
    Cell ``i`` of the result equals ``simulate_pseudo_labels(probs[i], truth, cfgs[i])``.
    """
    p = validate_probs(np.asarray(probs, dtype=np.float64))
    if p.ndim != 3 or p.shape[0] != len(cfgs):
        raise InvalidInputError("expected probs of shape (len(cfgs), n, K)")
    t = _check_truth(truth, p.shape[1], p.shape[2])
    return _simulate(
        p, t,
        [c.quantity_q for c in cfgs], [c.quality_a for c in cfgs], [c.alpha for c in cfgs],
    )


def dump_csv(path, pseudo, offset=0, append=False):
    """Write one row per sample: index, entropy, distance, selected, label, correct."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["index", "entropy", "distance", "selected", "label", "correct"])
        for i in range(len(pseudo.labels)):
            label = "" if not pseudo.selected[i] else (
                "unknown" if pseudo.labels[i] == UNKNOWN else int(pseudo.labels[i])
            )
            writer.writerow([
                offset + i,
                repr(float(pseudo.entropy[i])),
                repr(float(pseudo.distance[i])),
                int(pseudo.selected[i]),
                label,
                int(pseudo.correct[i]),
            ])
