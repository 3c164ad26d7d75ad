"""Online adaptation loop and stream metrics.

Target data is consumed once, in order, ``batch_size`` rows at a time. For
each batch the model is first evaluated without any update; those same
probabilities feed the pseudo-label simulator, and one optimizer step is
taken on the configured loss.

Grid cells that share a model, a stream and all settings except quantity and
quality are run in lockstep on a stacked model state (see ``model``).
Adaptation computes in ``RunConfig.compute_dtype`` (float32 by default;
pretrained models are float32-exact, so nothing is lost on entry).
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import InvalidInputError, ShapeError
from .losses import (
    LossConfig,
    PrototypeBank,
    combined_contrastive_objective,
    cross_entropy_loss,
    update_prototypes,
)
from .model import OptimConfig, backward, forward, sgd_step
from .numerics import as_float, normalized_entropy
from .plsim import UNKNOWN, PseudoLabelConfig, dump_csv, simulate_pseudo_labels_stacked

EVAL_TIMINGS = ("pre_update", "post_update")
COMPUTE_DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class RunConfig:
    batch_size: int = 64
    eval_timing: str = "pre_update"
    rejection_threshold: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    adapt: bool = True
    dump_path: str | None = None
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.eval_timing not in EVAL_TIMINGS:
            raise InvalidInputError(f"eval_timing must be one of {EVAL_TIMINGS}")
        if not 0.0 <= self.rejection_threshold <= 1.0:
            raise InvalidInputError("rejection_threshold must lie in [0, 1]")
        if self.compute_dtype not in COMPUTE_DTYPES:
            raise InvalidInputError(f"compute_dtype must be one of {COMPUTE_DTYPES}")


@dataclass
class StreamMetrics:
    accuracy: float
    acc_known: float
    acc_unknown: float
    h_score: float
    per_class_accuracy: dict
    batch_selected: list
    batch_correct: list
    n_known: int
    n_unknown: int

    def primary(self, kind):
        """Accuracy for PDA, H-score for ODA/OPDA."""
        return self.accuracy if kind == "PDA" else self.h_score

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def predict(probs, threshold=0.5):
    """Argmax class, or ``UNKNOWN`` when normalized entropy >= ``threshold``."""
    p = as_float(probs)
    labels = np.argmax(p, axis=-1)
    rejected = normalized_entropy(p) >= threshold
    out = np.where(rejected, UNKNOWN, labels)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


def h_score(acc_k, acc_u):
    if acc_k + acc_u == 0:
        return 0.0
    return 2.0 * acc_k * acc_u / (acc_k + acc_u)


def stream_metrics(predictions, truth, class_ids=None, batch_selected=(), batch_correct=()):
    pred = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    class_ids = truth if class_ids is None else np.asarray(class_ids)
    hit = pred == truth
    known = truth != UNKNOWN
    n_known, n_unknown = int(known.sum()), int((~known).sum())
    acc_k = float(hit[known].mean()) if n_known else 0.0
    acc_u = float(hit[~known].mean()) if n_unknown else 0.0
    per_class = {
        str(int(c)): float(hit[class_ids == c].mean()) for c in np.unique(class_ids)
    }
    return StreamMetrics(
        accuracy=float(hit.mean()) if hit.size else 0.0,
        acc_known=acc_k,
        acc_unknown=acc_u,
        h_score=h_score(acc_k, acc_u),
        per_class_accuracy=per_class,
        batch_selected=[int(v) for v in batch_selected],
        batch_correct=[int(v) for v in batch_correct],
        n_known=n_known,
        n_unknown=n_unknown,
    )


def adaptation_step(state, record, pseudo, bank, cfg):
    """One optimizer step on the configured loss; returns the loss value(s).

    The step is always taken, so momentum carries over a batch where nothing
    was selected (its gradient is zero). Works on plain or stacked states.
    """
    if cfg.loss.kind == "cross_entropy":
        res = cross_entropy_loss(record.probs, pseudo)
    else:
        res = combined_contrastive_objective(
            record.probs, record.projections, pseudo, bank, cfg.loss
        )
    sgd_step(state, backward(state, record, res.grad_logits, res.grad_projections), cfg.optim)
    if cfg.loss.kind == "contrastive":
        update_prototypes(bank, record.projections, pseudo, cfg.loss)
    return res.loss


def _check_target(model, target):
    if len(target) == 0:
        raise InvalidInputError("target stream is empty")
    if target.input_dim != model.config.input_dim:
        raise ShapeError(
            f"target features have {target.input_dim} columns, model expects {model.config.input_dim}"
        )


def _group_key(cfg):
    return replace(cfg, pseudo=PseudoLabelConfig(), seed=0, dump_path=None)


def _run_lockstep(model, target, cfgs):
    """Run cells sharing everything but the pseudo-label settings together."""
    cfg = cfgs[0]
    C = len(cfgs)
    state = model.astype(cfg.compute_dtype).stack(C)
    contrastive = cfg.loss.kind == "contrastive"
    bank = PrototypeBank.empty(
        state.config.num_known_classes, state.config.projection_dim, cells=C,
        dtype=state.dtype,
    )
    x, truth = target.features, target.labels
    n = len(target)
    predictions = np.empty((C, n), dtype=np.int64)
    selected, correct = [], []
    adapt = cfg.adapt and any(c.pseudo.quantity_q > 0 for c in cfgs)
    pcfgs = [c.pseudo for c in cfgs]
    dump = cfg.dump_path if C == 1 else None

    for start in range(0, n, cfg.batch_size):
        stop = min(start + cfg.batch_size, n)
        record = forward(state, x[start:stop], with_projection=adapt and contrastive)
        if cfg.eval_timing == "pre_update":
            predictions[:, start:stop] = predict(record.probs, cfg.rejection_threshold)
        if adapt:
            pseudo = simulate_pseudo_labels_stacked(record.probs, truth[start:stop], pcfgs)
            if dump:
                dump_csv(dump, pseudo.cell(0), offset=start, append=start > 0)
            adaptation_step(state, record, pseudo, bank, cfg)
            selected.append(pseudo.n_selected)
            correct.append(pseudo.n_correct)
        else:
            selected.append(np.zeros(C, dtype=np.int64))
            correct.append(np.zeros(C, dtype=np.int64))
        if cfg.eval_timing == "post_update":
            predictions[:, start:stop] = predict(
                forward(state, x[start:stop], with_projection=False).probs,
                cfg.rejection_threshold,
            )

    sel = np.array(selected).T
    cor = np.array(correct).T
    metrics = [
        stream_metrics(predictions[i], truth, target.class_ids, sel[i], cor[i])
        for i in range(C)
    ]
    return metrics, state


def _cell_state(model, stacked, i, metrics):
    # a cell that never selected a sample never moved: hand back the exact input
    if sum(metrics.batch_selected) == 0:
        return model.copy()
    return stacked.cell(i).astype(model.dtype)


def run_streams(model, target, configs, return_states=False):
    """Adapt a fresh copy of ``model`` on ``target`` once per config.

    Configs that differ only in their pseudo-label settings run in lockstep
    on a stacked state. Each result is identical to a separate
    :func:`run_stream` call with that config.
    """
    _check_target(model, target)
    configs = list(configs)
    groups = {}
    for i, c in enumerate(configs):
        key = (i,) if c.dump_path else _group_key(c)
        groups.setdefault(key, []).append(i)
    results = [None] * len(configs)
    states = [None] * len(configs)
    for idx in groups.values():
        metrics, state = _run_lockstep(model, target, [configs[i] for i in idx])
        for j, i in enumerate(idx):
            results[i] = metrics[j]
            if return_states:
                states[i] = _cell_state(model, state, j, metrics[j])
    return (results, states) if return_states else results


def run_stream(model, target, cfg, inplace=False, return_state=False):
    """Adapt ``model`` online on ``target`` and score every prediction.

    The model is left untouched unless ``inplace`` is set, in which case its
    parameters are replaced by the adapted ones. With ``return_state`` the
    adapted state is returned alongside the metrics.
    """
    _check_target(model, target)
    metrics, stacked = _run_lockstep(model, target, [cfg])
    metrics = metrics[0]
    state = _cell_state(model, stacked, 0, metrics)
    if inplace:
        model.params, model.velocity = state.params, state.velocity
        state = model
    return (metrics, state) if return_state else metrics


def evaluate_source_only(model, target, cfg):
    """Stream metrics with every update disabled."""
    return run_stream(model, target, replace(cfg, adapt=False, eval_timing="pre_update"))


def run_record(metrics, *, scenario, loss, quality, quantity, seed, extra=None):
    record = {
        "scenario": scenario,
        "loss": loss,
        "quality": quality,
        "quantity": quantity,
        "seed": seed,
        "metrics": metrics.to_dict(),
    }
    if extra:
        record.update(extra)
    return record


def dump_record(record, path):
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_record(path):
    with open(path) as fh:
        return json.load(fh)
