"""Quality x quantity sweeps over scenarios, losses and seeds.

Repeat ``r`` uses seed ``base_seed + r``. A seed fixes the category split,
the generated domains and the source pretraining, each drawn from its own
child of ``numpy.random.SeedSequence(seed)``. Pretrained models live in a
checkpoint directory (one file per scenario and seed) and every grid cell of
that scenario and seed starts from the same checkpoint.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import Settings
from .exceptions import InvalidInputError, MissingCheckpointError
from .harness import StreamMetrics, dump_record, evaluate_source_only, run_record, run_streams
from .losses import LOSS_KINDS
from .model import load_checkpoint, pretrain_source, save_checkpoint
from .scenario import SHIFT_KINDS, generate_domains, make_splits


def _percent_list(values, name):
    values = tuple(float(v) for v in values)
    if not values:
        raise InvalidInputError(f"{name} list is empty")
    if any(not 0.0 <= v <= 100.0 for v in values):
        raise InvalidInputError(f"{name} values must lie in [0, 100]")
    return values


@dataclass(frozen=True)
class GridSpec:
    qualities: tuple = tuple(range(0, 101, 10))
    quantities: tuple = tuple(range(10, 101, 10))
    scenarios: tuple = SHIFT_KINDS
    losses: tuple = LOSS_KINDS
    repeats: int = 3
    base_seed: int = 0
    include_zero_quantity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "qualities", _percent_list(self.qualities, "quality"))
        quantities = _percent_list(self.quantities, "quantity")
        if self.include_zero_quantity and 0.0 not in quantities:
            quantities = (0.0,) + quantities
        object.__setattr__(self, "quantities", quantities)
        if not self.scenarios or any(s not in SHIFT_KINDS for s in self.scenarios):
            raise InvalidInputError(f"scenarios must be a nonempty subset of {SHIFT_KINDS}")
        if not self.losses or any(l not in LOSS_KINDS for l in self.losses):
            raise InvalidInputError(f"losses must be a nonempty subset of {LOSS_KINDS}")
        if self.repeats < 1:
            raise InvalidInputError("repeats must be >= 1")

    @property
    def seeds(self):
        return tuple(self.base_seed + r for r in range(self.repeats))

    def cells(self):
        return [(q, a) for q in self.quantities for a in self.qualities]


@dataclass
class GridCellResult:
    scenario: str
    loss: str
    quality: float
    quantity: float
    seeds: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    @property
    def values(self):
        return [m.primary(self.scenario) for m in self.metrics]

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def key(self):
        return (self.scenario, self.loss, self.quality, self.quantity)


def seed_streams(seed):
    """Independent generators for (split, domains, pretraining)."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(int(seed)).spawn(3)]


def scenario_data(kind, seed, settings=None):
    """Category split plus source and target datasets for one seed."""
    settings = settings or Settings()
    split_rng, data_rng, _ = seed_streams(seed)
    spec = make_splits(kind, settings.data.num_classes, split_rng)
    source, target = generate_domains(
        spec, settings.shift,
        (settings.data.source_per_class, settings.data.target_per_class), data_rng,
    )
    return spec, source, target


def pretrain_for(kind, seed, settings=None):
    settings = settings or Settings()
    spec, source, _ = scenario_data(kind, seed, settings)
    return pretrain_source(
        settings.model_config(spec.num_known_classes), source.features, source.labels,
        seed_streams(seed)[2], epochs=settings.data.pretrain_epochs, optim=settings.optim,
    )


def checkpoint_path(checkpoint_dir, kind, seed):
    return os.path.join(checkpoint_dir, f"{kind}_seed{seed}.npz")


def pretrain_checkpoints(scenarios, seeds, settings, checkpoint_dir, threads=1):
    """Pretrain and save one model per (scenario, seed); returns the paths."""
    os.makedirs(checkpoint_dir, exist_ok=True)

    def job(item):
        kind, seed = item
        path = checkpoint_path(checkpoint_dir, kind, seed)
        save_checkpoint(pretrain_for(kind, seed, settings), path)
        return path

    items = [(k, s) for k in scenarios for s in seeds]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(job, items))


def load_pretrained(checkpoint_dir, kind, seed):
    path = checkpoint_path(checkpoint_dir, kind, seed)
    if not os.path.exists(path):
        raise MissingCheckpointError(
            f"no pretrained model at {path}; create it with "
            f"`sfunida-sim pretrain --scenario {kind} --seed {seed} --out-dir <dir>`"
        )
    return load_checkpoint(path)


def record_name(scenario, loss, quality, quantity, seed):
    return f"{scenario}_{loss}_q{quantity:g}_a{quality:g}_seed{seed}.json"


def run_grid(spec, settings=None, checkpoint_dir="checkpoints", threads=1, record_dir=None):
    """Run every cell of ``spec``; returns ``(cells, baselines)``.

    ``cells`` is ordered by scenario, loss, quantity, quality. ``baselines``
    maps each scenario to the source-only primary metric per seed. Work is
    split into one task per (scenario, seed, loss), run on a thread pool;
    results do not depend on the number of threads.
    """
    settings = settings or Settings()
    models = {}
    for kind in spec.scenarios:
        for seed in spec.seeds:
            models[kind, seed] = load_pretrained(checkpoint_dir, kind, seed)
    if record_dir:
        os.makedirs(record_dir, exist_ok=True)
    cells = spec.cells()

    def job(task):
        kind, seed, loss = task
        model = models[kind, seed]
        _, _, target = scenario_data(kind, seed, settings)
        if loss is None:
            return evaluate_source_only(model, target, settings.run_config(seed=seed))
        cfgs = [settings.run_config(loss, a, q, seed) for q, a in cells]
        return run_streams(model, target, cfgs)

    tasks = [(k, s, l) for k in spec.scenarios for s in spec.seeds for l in (None,) + spec.losses]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        outputs = dict(zip(tasks, pool.map(job, tasks)))

    baselines = {
        kind: {seed: outputs[kind, seed, None].primary(kind) for seed in spec.seeds}
        for kind in spec.scenarios
    }
    results = []
    for kind in spec.scenarios:
        for loss in spec.losses:
            for i, (q, a) in enumerate(cells):
                cell = GridCellResult(kind, loss, a, q)
                for seed in spec.seeds:
                    m = outputs[kind, seed, loss][i]
                    cell.seeds.append(seed)
                    cell.metrics.append(m)
                    if record_dir:
                        rec = run_record(m, scenario=kind, loss=loss, quality=a,
                                         quantity=q, seed=seed)
                        dump_record(rec, os.path.join(record_dir,
                                                      record_name(kind, loss, a, q, seed)))
                results.append(cell)
    return results, baselines


def cells_from_records(records):
    """Rebuild grid cells from per-run record dicts (e.g. loaded from disk)."""
    cells = {}
    for rec in sorted(records, key=lambda r: r["seed"]):
        key = (rec["scenario"], rec["loss"], float(rec["quality"]), float(rec["quantity"]))
        cell = cells.setdefault(key, GridCellResult(*key))
        cell.seeds.append(rec["seed"])
        cell.metrics.append(StreamMetrics.from_dict(rec["metrics"]))
    return list(cells.values())
