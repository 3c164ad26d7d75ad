import glob
import json
import os

import numpy as np
import pytest

from sfunida_sim.exceptions import InvalidInputError, MissingCheckpointError, ReportError
from sfunida_sim.grid import (
    GridCellResult,
    GridSpec,
    cells_from_records,
    load_pretrained,
    pretrain_checkpoints,
    run_grid,
    scenario_data,
)
from sfunida_sim.harness import load_record, run_stream, stream_metrics
from sfunida_sim.report import (
    BANDS,
    band_index,
    band_name,
    emit_reports,
    grid_matrix,
    read_csv,
    render_ansi,
    render_svg,
    trend_summary,
    write_csv,
)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory, tiny_settings):
    d = str(tmp_path_factory.mktemp("ckpt"))
    pretrain_checkpoints(("PDA", "OPDA"), (0, 1), tiny_settings, d, threads=2)
    return d


def test_grid_counting():
    spec = GridSpec(scenarios=("ODA",), losses=("contrastive",))
    assert len(spec.cells()) == 110
    assert len(spec.cells()) * len(spec.seeds) == 330
    assert spec.seeds == (0, 1, 2)
    assert len(GridSpec(include_zero_quantity=True).cells()) == 121


def test_grid_spec_validation():
    for bad in (dict(qualities=()), dict(quantities=(120,)), dict(scenarios=("UDA",)),
                dict(losses=("mse",)), dict(repeats=0)):
        with pytest.raises(InvalidInputError):
            GridSpec(**bad)


def test_one_cell_grid_equals_run_stream(ckpt, tiny_settings):
    spec = GridSpec(qualities=(70,), quantities=(60,), scenarios=("OPDA",),
                    losses=("cross_entropy",), repeats=1)
    cells, baselines = run_grid(spec, tiny_settings, ckpt)
    assert len(cells) == 1
    model = load_pretrained(ckpt, "OPDA", 0)
    _, _, target = scenario_data("OPDA", 0, tiny_settings)
    direct = run_stream(model, target, tiny_settings.run_config("cross_entropy", 70, 60, 0))
    assert cells[0].metrics == [direct]
    assert cells[0].mean == direct.h_score


def test_records_recompute_means(ckpt, tiny_settings, tmp_path):
    spec = GridSpec(qualities=(0, 50, 100), quantities=(50, 100), scenarios=("PDA", "OPDA"),
                    repeats=2)
    cells, _ = run_grid(spec, tiny_settings, ckpt, record_dir=str(tmp_path))
    paths = sorted(glob.glob(str(tmp_path / "*.json")))
    assert len(paths) == 2 * 2 * 6 * 2
    # independent recomputation straight from the JSON files
    groups = {}
    for p in paths:
        with open(p) as fh:
            rec = json.load(fh)
        m = rec["metrics"]
        v = m["accuracy"] if rec["scenario"] == "PDA" else m["h_score"]
        groups.setdefault((rec["scenario"], rec["loss"], rec["quality"], rec["quantity"]),
                          []).append(v)
    for c in cells:
        assert abs(sum(groups[c.key]) / len(groups[c.key]) - c.mean) <= 1e-12
    rebuilt = {c.key: c for c in cells_from_records([load_record(p) for p in paths])}
    for c in cells:
        assert rebuilt[c.key].metrics == c.metrics and rebuilt[c.key].seeds == c.seeds


def test_thread_count_does_not_change_results(ckpt, tiny_settings):
    spec = GridSpec(qualities=(30, 100), quantities=(40, 100), scenarios=("PDA", "OPDA"),
                    repeats=2)
    one = run_grid(spec, tiny_settings, ckpt, threads=1)
    eight = run_grid(spec, tiny_settings, ckpt, threads=8)
    assert one[1] == eight[1]
    assert [(c.key, c.metrics) for c in one[0]] == [(c.key, c.metrics) for c in eight[0]]


def test_missing_checkpoint_message(tmp_path, tiny_settings):
    with pytest.raises(MissingCheckpointError) as err:
        run_grid(GridSpec(scenarios=("ODA",), repeats=1, base_seed=4), tiny_settings,
                 str(tmp_path))
    assert "sfunida-sim pretrain --scenario ODA --seed 4" in str(err.value)


@pytest.mark.parametrize("value,band", [
    (29.99, "red"), (30.0, "orange"), (39.99, "orange"), (40.0, "yellow"),
    (50.0, "yellowgreen"), (60.0, "green"), (69.99, "green"), (70.0, "darkgreen"),
    (100.0, "darkgreen"), (0.0, "red"),
])
def test_band_boundaries(value, band):
    assert band_name(value, 30.0) == band


def test_band_order():
    assert [b[0] for b in BANDS] == ["red", "orange", "yellow", "yellowgreen", "green",
                                    "darkgreen"]
    assert band_index(-5.0, -5.0) == 1


def _fake_cells(values, scenario="ODA", loss="contrastive"):
    cells = []
    for (q, a), v in values.items():
        m = stream_metrics([0], [0])
        m.h_score = m.accuracy = v
        cells.append(GridCellResult(scenario, loss, a, q, [0], [m]))
    return cells


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    values = {(q, a): float(rng.random()) for q in (10.0, 20.0) for a in (0.0, 50.0, 100.0)}
    q, a, m = grid_matrix(_fake_cells(values), "ODA", "contrastive")
    path = tmp_path / "g.csv"
    write_csv(path, q, a, m)
    assert path.read_text().splitlines()[0] == "quantity\\quality,0,50,100"
    q2, a2, m2 = read_csv(path)
    assert (q2, a2) == (q, a)
    assert m2.tobytes() == m.tobytes()
    assert m[1, 2] == 100.0 * values[20.0, 100.0]


def test_ragged_grid_is_rejected():
    cells = _fake_cells({(10.0, 0.0): 0.5, (10.0, 50.0): 0.5, (20.0, 0.0): 0.5})
    with pytest.raises(ReportError, match="quantity 20, quality 50"):
        grid_matrix(cells, "ODA", "contrastive")
    with pytest.raises(ReportError):
        grid_matrix(cells, "PDA", "contrastive")


def test_renderings_agree_with_csv(tmp_path):
    values = {(10.0, 0.0): 0.20, (10.0, 50.0): 0.30, (20.0, 0.0): 0.45, (20.0, 50.0): 0.80}
    cells = _fake_cells(values)
    paths = emit_reports(cells, {"ODA": {0: 0.30}}, str(tmp_path))
    assert sorted(os.path.basename(p) for p in paths) == [
        "ODA_contrastive.ansi", "ODA_contrastive.csv", "ODA_contrastive.svg",
        "baselines.json", "trends.json"]
    q, a, m = read_csv(tmp_path / "ODA_contrastive.csv")
    svg = (tmp_path / "ODA_contrastive.svg").read_text()
    bands = [s.split('data-band="')[1].split('"')[0] for s in svg.split("<rect")[1:]]
    assert bands == [band_name(v, 30.0) for v in m.ravel()]
    assert bands == ["red", "orange", "yellow", "darkgreen"]
    ansi = (tmp_path / "ODA_contrastive.ansi").read_text()
    codes = [int(s.split("m")[0]) for s in ansi.split("\x1b[48;5;")[1:]]
    assert codes == [BANDS[band_index(v, 30.0)][2] for v in m.ravel()]
    assert render_svg(q, a, m, 30.0) == render_svg(q, a, m, 30.0)
    assert "20.0" in render_ansi(q, a, m, 30.0)


def test_trend_summary_flags():
    grid = {}
    for a in range(0, 101, 10):
        grid[100.0, float(a)] = 0.3 + 0.005 * a
    grid[50.0, 100.0] = 0.75
    cells = _fake_cells(grid, "ODA", "contrastive")
    ce = dict(grid)
    ce[100.0, 100.0] = 0.81
    cells += _fake_cells(ce, "ODA", "cross_entropy")
    out = trend_summary(cells, {"ODA": {0: 0.5}})
    checks = out["checks"]
    assert all(c["passed"] for c in checks["upper_bound"])
    assert all(c["passed"] for c in checks["monotonicity"])
    assert checks["quality_vs_quantity"][0]["passed"]
    assert out["all_passed"]
    bad = trend_summary(cells, {"ODA": {0: 0.75}})
    assert not bad["all_passed"]
