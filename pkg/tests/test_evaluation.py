import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tamcl.errors import CompletenessError, DegenerateReferenceError, RoutingError
from tamcl.evaluation import (
    AccuracyMatrix,
    ForgettingReport,
    build_report,
    difficulty_score,
    evaluate,
    forgetting_rate,
)
from tamcl.tasks import generate_task
from tamcl.trainer import ContinualTrainer, TrainConfig

from conftest import small_model, small_specs


def test_no_forgetting():
    assert forgetting_rate(80.0, 80.0, 4) == 0.0


def test_total_forgetting():
    assert forgetting_rate(80.0, 25.0, 4) == 1.0


def test_published_example():
    assert abs(forgetting_rate(76.09, 66.09, 430) - 0.1318) < 1e-3


def test_negative_forgetting_kept():
    assert forgetting_rate(60.0, 70.0, 2) == pytest.approx(-1.0)


def test_degenerate_reference():
    with pytest.raises(DegenerateReferenceError):
        forgetting_rate(50.0, 40.0, 2)
    with pytest.raises(DegenerateReferenceError):
        forgetting_rate(20.0, 10.0, 4)


@settings(max_examples=100, deadline=None)
@given(st.floats(55, 100), st.floats(0, 100), st.floats(0.1, 10), st.floats(-50, 50))
def test_affine_invariance(s_a, s_after, scale, shift):
    s_r = 50.0
    base = (s_a - s_after) / (s_a - s_r)
    moved = ((scale * s_a + shift) - (scale * s_after + shift)) / ((scale * s_a + shift) - (scale * s_r + shift))
    assert forgetting_rate(s_a, s_after, 2) == pytest.approx(base)
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(30, 100), st.floats(0, 20), st.floats(0.01, 20))
def test_monotone_in_drop(s_a, drop, extra):
    assert forgetting_rate(s_a, s_a - drop - extra, 5) > forgetting_rate(s_a, s_a - drop, 5)


def test_difficulty():
    assert difficulty_score(80000, 2) == 40000
    assert round(difficulty_score(18032, 2910), 2) == 6.2
    assert abs(difficulty_score(18032, 2910) - 6.197) < 1e-3
    assert difficulty_score(7, 7) == 1


def matrix(n_tasks, values=None):
    m = AccuracyMatrix()
    rng = np.random.default_rng(0)
    for t in range(1, n_tasks + 1):
        m.add_task(t, 2 + t)
    for (j, i) in m.pairs():
        m.set(j, i, values[(j, i)] if values else float(rng.uniform(60, 100)))
    return m


def test_single_task_report_has_no_forgetting():
    rep = build_report(matrix(1))
    assert rep.forgetting == {}
    assert "Forgetting" not in rep.to_text()


def test_three_task_pair_count():
    assert len(build_report(matrix(3)).forgetting) == 3


def test_five_task_pair_count():
    rep = build_report(matrix(5))
    assert len(rep.forgetting) == 10
    assert len(rep.matrix.pairs()) == 15


def test_missing_entry():
    m = matrix(3)
    del m.acc[(1, 3)]
    with pytest.raises(CompletenessError, match=r"\(1, 3\)"):
        build_report(m)


def test_report_recomputable_from_csv():
    rep = build_report(matrix(4), difficulty={1: 10.0})
    rows = [r.split(",") for r in rep.forgetting_csv().strip().split("\n")[1:]]
    for j, i, s_a, s_after, chance, value in rows:
        recomputed = (float(s_a) - float(s_after)) / (float(s_a) - float(chance))
        assert abs(recomputed - float(value)) < 1e-12
        assert float(s_a) == rep.matrix.get(int(j), int(j))


def test_json_round_trip():
    rep = build_report(matrix(3), difficulty={1: 5.0, 2: 2.5}, metadata={"seed": 3}, names={1: "a"})
    back = ForgettingReport.from_json(rep.to_json())
    assert back.to_json() == rep.to_json()
    assert back.forgetting == rep.forgetting and back.matrix.acc == rep.matrix.acc


def test_degenerate_reference_in_report_is_nan():
    m = AccuracyMatrix()
    m.add_task(1, 2)
    m.add_task(2, 2)
    for (j, i), v in {(1, 1): 45.0, (1, 2): 40.0, (2, 2): 90.0}.items():
        m.set(j, i, v)
    rep = build_report(m)
    assert np.isnan(rep.forgetting[(1, 2)]) and rep.undefined == [1]
    assert "n/a" in rep.to_text()


def test_matrix_rejects_bad_values():
    m = AccuracyMatrix()
    m.add_task(1, 2)
    m.add_task(2, 2)
    with pytest.raises(ValueError):
        m.set(1, 1, 101.0)
    with pytest.raises(ValueError):
        m.set(2, 1, 50.0)


def test_evaluate_chance_at_init():
    spec = small_specs(1, n_test=600, labels=(3,))[0]
    _, test = generate_task(spec)
    accs = []
    for seed in range(5):
        m = small_model(seed=seed)
        m.add_task(1, 3)
        accs.append(evaluate(m, 1, test))
    # mean over 5 random inits of a 3-way balanced set; sd of a single run is at most ~20 points
    assert abs(np.mean(accs) - 100 / 3) < 20


def test_evaluate_memorised_set_and_shuffle_invariance():
    spec = small_specs(1, n_train=10, labels=(2,), cross_modal=False)[0]
    train, _ = generate_task(spec)
    m = small_model()
    ContinualTrainer(m, TrainConfig(lr=3e-3, epochs=80, batch_size=10)).train_task(1, train, 2)
    assert evaluate(m, 1, train) == 100.0
    perm = np.random.default_rng(0).permutation(len(train))
    assert evaluate(m, 1, train.subset(perm), batch_size=3) == evaluate(m, 1, train)


def test_evaluate_unknown_task():
    spec = small_specs(1)[0]
    _, test = generate_task(spec)
    with pytest.raises(RoutingError):
        evaluate(small_model(), 1, test)
