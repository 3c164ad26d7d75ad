from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfunida_sim.exceptions import InvalidInputError, ShapeError
from sfunida_sim.harness import (
    RunConfig,
    StreamMetrics,
    dump_record,
    evaluate_source_only,
    h_score,
    load_record,
    predict,
    run_record,
    run_stream,
    run_streams,
    stream_metrics,
)
from sfunida_sim.losses import (
    LossConfig,
    PrototypeBank,
    combined_contrastive_objective,
    cross_entropy_loss,
    update_prototypes,
)
from sfunida_sim.model import PARAM_NAMES, OptimConfig, backward, forward, sgd_step
from sfunida_sim.plsim import UNKNOWN, PseudoLabelConfig, simulate_pseudo_labels
from sfunida_sim.scenario import LabeledDataset


def make_target(n=40, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(-1, 3, size=n)
    return LabeledDataset(rng.normal(size=(n, dim)) * 2, labels)


def cfg(loss="cross_entropy", q=100, a=100, **kw):
    kw.setdefault("optim", OptimConfig(learning_rate=0.05, momentum=0.9))
    return RunConfig(loss=LossConfig(kind=loss), pseudo=PseudoLabelConfig(q, a), **kw)


def test_h_score_examples():
    assert h_score(0.8, 0.6) == pytest.approx(0.96 / 1.4, abs=1e-12)
    assert h_score(0.8, 0.6) == pytest.approx(0.6857, abs=1e-4)
    assert h_score(0.0, 0.0) == 0.0
    assert h_score(1.0, 0.0) == 0.0
    assert h_score(0.5, 0.5) == pytest.approx(0.5)


def test_predict_examples():
    assert predict([0.9, 0.05, 0.05]) == 0
    assert predict(np.full(3, 1 / 3)) == UNKNOWN
    assert predict(np.eye(4)[2]) == 2
    assert predict([0.6, 0.3, 0.1]) == UNKNOWN
    # normalized entropy exactly 0.5 is rejected
    assert predict([0.5, 0.5, 0.0, 0.0]) == UNKNOWN
    assert predict([[0.02, 0.96, 0.02], [0.4, 0.3, 0.3]]).tolist() == [1, UNKNOWN]


def test_stream_metrics_hand_example():
    pred = [0, 1, UNKNOWN, UNKNOWN, 2]
    truth = [0, 2, UNKNOWN, 1, UNKNOWN]
    m = stream_metrics(pred, truth)
    assert m.acc_known == pytest.approx(1 / 3) and m.acc_unknown == pytest.approx(0.5)
    assert m.accuracy == pytest.approx(0.4)
    assert m.h_score == pytest.approx(h_score(1 / 3, 0.5))
    assert (m.n_known, m.n_unknown) == (3, 2)
    assert m.per_class_accuracy == {"-1": 0.5, "0": 1.0, "1": 0.0, "2": 0.0}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-1, 3), st.integers(-1, 3)), min_size=1, max_size=30))
def test_metric_invariants(pairs):
    pred, truth = map(list, zip(*pairs))
    m = stream_metrics(pred, truth)
    for v in (m.accuracy, m.acc_known, m.acc_unknown, m.h_score):
        assert 0.0 <= v <= 1.0
    assert m.h_score <= max(m.acc_known, m.acc_unknown) + 1e-12
    assert m.h_score >= min(m.acc_known, m.acc_unknown) - 1e-12 or m.h_score == 0.0
    assert m.n_known + m.n_unknown == len(pred)


@pytest.mark.parametrize("loss", ["cross_entropy", "contrastive"])
def test_zero_quantity_is_a_fixed_point(small_model, loss):
    target = make_target()
    before = {k: v.copy() for k, v in small_model.params.items()}
    metrics, state = run_stream(small_model, target, cfg(loss, q=0), return_state=True)
    for k in PARAM_NAMES:
        assert state.params[k].tobytes() == before[k].tobytes()
        assert small_model.params[k].tobytes() == before[k].tobytes()
    ref = evaluate_source_only(small_model, target, cfg(loss))
    assert metrics == replace(ref)
    assert sum(metrics.batch_selected) == 0


def test_run_is_deterministic_and_does_not_touch_input(small_model):
    target = make_target()
    before = {k: v.copy() for k, v in small_model.params.items()}
    a = run_stream(small_model, target, cfg("contrastive", 70, 60))
    b = run_stream(small_model, target, cfg("contrastive", 70, 60))
    assert a == b
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(small_model.params[k], before[k])


def _oracle(model, target, rc):
    """The online loop written out batch by batch on a plain state."""
    state = model.astype(np.float64)
    K, P = state.config.num_known_classes, state.config.projection_dim
    bank = PrototypeBank.empty(K, P)
    preds = []
    for start in range(0, len(target), rc.batch_size):
        x = target.features[start:start + rc.batch_size]
        t = target.labels[start:start + rc.batch_size]
        rec = forward(state, x)
        preds.extend(predict(rec.probs, rc.rejection_threshold).tolist())
        pl = simulate_pseudo_labels(rec.probs, t, rc.pseudo)
        if rc.loss.kind == "cross_entropy":
            res = cross_entropy_loss(rec.probs, pl)
        else:
            res = combined_contrastive_objective(rec.probs, rec.projections, pl, bank, rc.loss)
        grads = backward(state, rec, res.grad_logits, res.grad_projections)
        sgd_step(state, grads, rc.optim)
        if rc.loss.kind == "contrastive":
            update_prototypes(bank, rec.projections, pl, rc.loss)
    return np.array(preds), state


@pytest.mark.parametrize("loss", ["cross_entropy", "contrastive"])
def test_matches_straight_line_oracle(small_model, loss):
    target = make_target(n=24)
    rc = cfg(loss, 75, 50, batch_size=12, compute_dtype="float64")
    metrics, state = run_stream(small_model, target, rc, return_state=True)
    preds, ref = _oracle(small_model, target, rc)
    assert metrics == stream_metrics(preds, target.labels, target.class_ids,
                                     metrics.batch_selected, metrics.batch_correct)
    assert metrics.batch_selected == [9, 9] and metrics.batch_correct == [5, 5]
    for k in PARAM_NAMES:
        np.testing.assert_allclose(state.params[k], ref.params[k], rtol=1e-12, atol=1e-14)
    assert any(not np.array_equal(state.params[k], small_model.params[k]) for k in PARAM_NAMES)


def test_float32_compute_tracks_float64(small_model):
    target = make_target(n=64)
    m32 = run_stream(small_model, target, cfg("contrastive", 80, 80, batch_size=16))
    m64 = run_stream(small_model, target, cfg("contrastive", 80, 80, batch_size=16,
                                              compute_dtype="float64"))
    assert abs(m32.accuracy - m64.accuracy) <= 2 / 64


def test_run_streams_equals_run_stream(small_model):
    target = make_target(n=50)
    cfgs = [cfg(l, q, a, batch_size=16) for l in ("cross_entropy", "contrastive")
            for q, a in ((0, 100), (30, 100), (100, 0), (60, 40))]
    cfgs.append(cfg("contrastive", 50, 50, batch_size=16, eval_timing="post_update"))
    many, states = run_streams(small_model, target, cfgs, return_states=True)
    for c, m, s in zip(cfgs, many, states):
        one, s1 = run_stream(small_model, target, c, return_state=True)
        assert m == one
        for k in PARAM_NAMES:
            assert s.params[k].tobytes() == s1.params[k].tobytes()


def test_post_update_timing_differs(small_model):
    target = make_target(n=32)
    pre = run_stream(small_model, target, cfg(batch_size=32))
    post = run_stream(small_model, target, cfg(batch_size=32, eval_timing="post_update"))
    src = evaluate_source_only(small_model, target, cfg(batch_size=32))
    # pre-update predictions on a single batch are the source model's
    assert replace(pre, batch_selected=[0], batch_correct=[0]) == src
    assert post != pre


def test_inplace_updates_model(small_model):
    target = make_target()
    copy = small_model.copy()
    m1, s1 = run_stream(copy, target, cfg(), return_state=True)
    run_stream(small_model, target, cfg(), inplace=True)
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(small_model.params[k], s1.params[k])


def test_shape_error_before_any_update(small_model):
    before = {k: v.copy() for k, v in small_model.params.items()}
    bad = make_target(dim=4)
    with pytest.raises(ShapeError):
        run_stream(small_model, bad, cfg(), inplace=True)
    with pytest.raises(ShapeError):
        run_streams(small_model, bad, [cfg(), cfg(q=50)])
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(small_model.params[k], before[k])
    with pytest.raises(InvalidInputError):
        run_stream(small_model, LabeledDataset(np.zeros((0, 5)), []), cfg())


def test_run_config_validation():
    for bad in (dict(batch_size=0), dict(eval_timing="never"), dict(rejection_threshold=1.5),
                dict(compute_dtype="float16")):
        with pytest.raises(InvalidInputError):
            RunConfig(**bad)


def test_pseudo_dump(small_model, tmp_path):
    path = tmp_path / "pl.csv"
    target = make_target(n=20)
    run_stream(small_model, target, cfg(q=50, batch_size=8, dump_path=str(path)))
    rows = path.read_text().splitlines()
    assert len(rows) == 21
    assert rows[0] == "index,entropy,distance,selected,label,correct"
    assert [r.split(",")[0] for r in rows[1:]] == [str(i) for i in range(20)]
    assert sum(int(r.split(",")[3]) for r in rows[1:]) == 4 + 4 + 2


def test_record_round_trip(small_model, tmp_path):
    m = run_stream(small_model, make_target(), cfg(q=40))
    rec = run_record(m, scenario="ODA", loss="cross_entropy", quality=100, quantity=40, seed=2)
    dump_record(rec, tmp_path / "r.json")
    back = load_record(tmp_path / "r.json")
    assert back == rec
    assert StreamMetrics.from_dict(back["metrics"]) == m
    assert m.primary("PDA") == m.accuracy and m.primary("ODA") == m.h_score
