"""Category-shift scenarios on a synthetic Gaussian-cluster problem.

Class ids ``0 .. num_classes-1`` are global. The model only knows the source
classes (shared plus source-private), re-indexed ``0 .. K-1`` in ascending
global id order; target-private samples carry ``UNKNOWN``.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, ParseError, ShapeError
from .numerics import make_rng
from .plsim import UNKNOWN

SHIFT_KINDS = ("PDA", "ODA", "OPDA")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    num_classes: int
    shared: tuple
    source_private: tuple
    target_private: tuple

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise InvalidInputError(f"unknown shift kind {self.kind!r}")
        sets = [set(self.shared), set(self.source_private), set(self.target_private)]
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise InvalidInputError("class partitions must be disjoint")
        if any(c < 0 or c >= self.num_classes for s in sets for c in s):
            raise InvalidInputError("class ids must lie in [0, num_classes)")
        if self.kind == "PDA" and self.target_private:
            raise InvalidInputError("PDA has no target-private classes")
        if self.kind == "ODA" and self.source_private:
            raise InvalidInputError("ODA has no source-private classes")
        if len(self.known_classes) < 2:
            raise InvalidInputError("at least two known classes are required")

    @property
    def known_classes(self):
        return tuple(sorted(self.shared + self.source_private))

    @property
    def target_classes(self):
        return tuple(sorted(self.shared + self.target_private))

    @property
    def num_known_classes(self):
        return len(self.known_classes)

    def model_label(self, class_id):
        """Map a global class id to the model's label space."""
        known = self.known_classes
        if class_id in known:
            return known.index(class_id)
        return UNKNOWN


@dataclass(frozen=True)
class DomainShiftConfig:
    input_dim: int = 32
    class_mean_radius: float = 6.0
    within_class_std: float = 1.0
    rotation_strength: float = 0.8
    mean_offset: float = 1.5
    noise_scale_ratio: float = 1.25

    def __post_init__(self):
        if self.input_dim < 2:
            raise InvalidInputError("input_dim must be >= 2")
        if self.rotation_strength < 0 or self.mean_offset < 0:
            raise InvalidInputError("shift strengths must be >= 0")
        for name in ("class_mean_radius", "within_class_std", "noise_scale_ratio"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    domain: str = "target"
    class_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("need exactly one label per feature row")
        if self.class_ids is None:
            self.class_ids = self.labels.copy()

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]


def split_sizes(kind, num_classes):
    if num_classes < 4:
        raise InvalidInputError("need at least 4 classes to build a category-shift split")
    shared = num_classes // 2
    rest = num_classes - shared
    if kind == "PDA":
        return shared, rest, 0
    if kind == "ODA":
        return shared, 0, rest
    if kind == "OPDA":
        return shared, rest // 2, rest - rest // 2
    raise InvalidInputError(f"unknown shift kind {kind!r}")


def make_splits(kind, num_classes=12, rng=0):
    """Shared / source-private / target-private partition by seeded shuffle.

    With 12 classes: PDA 6/6/0, ODA 6/0/6, OPDA 6/3/3.
    """
    n_shared, n_src, n_tgt = split_sizes(kind, num_classes)
    perm = [int(c) for c in make_rng(rng).permutation(num_classes)]
    return ScenarioSpec(
        kind=kind,
        num_classes=num_classes,
        shared=tuple(sorted(perm[:n_shared])),
        source_private=tuple(sorted(perm[n_shared : n_shared + n_src])),
        target_private=tuple(sorted(perm[n_shared + n_src : n_shared + n_src + n_tgt])),
    )


def random_rotation(dim, angle, rng):
    """Orthogonal map rotating ``dim // 2`` random disjoint planes by ``angle``."""
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    block = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        block[i, i], block[i, i + 1] = c, -s
        block[i + 1, i], block[i + 1, i + 1] = s, c
    return basis @ block @ basis.T


def _sample(spec, means, classes, per_class, std, rng, domain):
    counts = np.full(len(classes), per_class) if np.isscalar(per_class) else np.asarray(per_class)
    if np.any(counts < 1):
        raise InvalidInputError("per-class sample counts must be >= 1")
    class_ids = np.repeat(np.asarray(classes, dtype=np.int64), counts)
    noise = rng.standard_normal((class_ids.shape[0], means.shape[1])) * std
    x = means[class_ids] + noise
    order = rng.permutation(class_ids.shape[0])
    class_ids, x = class_ids[order], x[order]
    labels = np.array([spec.model_label(int(c)) for c in class_ids], dtype=np.int64)
    return LabeledDataset(x, labels, domain=domain, class_ids=class_ids)


def generate_domains(spec, shift=None, sizes=(200, 3000), rng=0):
    """Source and target datasets for ``spec``.

    Class means sit on a sphere of radius ``class_mean_radius``. Target data
    uses rotated class means plus a common offset and wider noise.
    ``sizes`` is ``(source_per_class, target_per_class)``.
    """
    shift = shift or DomainShiftConfig()
    rng = make_rng(rng)
    dim = shift.input_dim
    directions = rng.standard_normal((spec.num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = shift.class_mean_radius * directions

    rotation = random_rotation(dim, shift.rotation_strength, rng)
    offset = rng.standard_normal(dim)
    offset *= shift.mean_offset / np.linalg.norm(offset)
    target_means = means @ rotation.T + offset

    src_rng, tgt_rng = (make_rng(s) for s in rng.integers(0, 2**63 - 1, size=2))
    source = _sample(spec, means, spec.known_classes, sizes[0],
                     shift.within_class_std, src_rng, "source")
    target = _sample(spec, target_means, spec.target_classes, sizes[1],
                     shift.within_class_std * shift.noise_scale_ratio, tgt_rng, "target")
    return source, target


def save_feature_file(dataset, path, num_known_classes):
    """Plain-text features: header ``N D`` then ``label v1 ... vD`` per row.

    ``UNKNOWN`` is written as ``num_known_classes``. Floats use ``repr`` so
    values survive a round trip exactly.
    """
    with open(path, "w") as fh:
        n, d = dataset.features.shape
        fh.write(f"{n} {d}\n")
        for label, row in zip(dataset.labels, dataset.features):
            out = num_known_classes if label == UNKNOWN else int(label)
            fh.write(" ".join([str(out)] + [repr(float(v)) for v in row]) + "\n")


def load_feature_file(path, num_known_classes, input_dim=None, domain="target"):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty feature file", line=1)
    header = lines[0].split()
    try:
        if len(header) != 2:
            raise ValueError
        n, d = int(header[0]), int(header[1])
    except ValueError:
        raise ParseError(f"bad header {lines[0]!r}; expected 'N D'", line=1) from None
    if n < 0 or d < 1:
        raise ParseError("header counts must be positive", line=1)
    if input_dim is not None and d != input_dim:
        raise ShapeError(f"feature dimension {d} does not match model input_dim {input_dim}")
    body = [ln for ln in lines[1:]]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise ParseError(f"header promises {n} rows, found {len(body)}", line=len(lines) + 1)
    x = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(parts)}", line=i + 2)
        try:
            lab = int(parts[0])
            x[i] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=i + 2) from None
        if lab < 0:
            raise ParseError(f"negative label {lab}", line=i + 2)
        labels[i] = UNKNOWN if lab >= num_known_classes else lab
    return LabeledDataset(x, labels, domain=domain)
