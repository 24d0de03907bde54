import numpy as np
import pytest

from sture.associator import (
    AffinityTable, Candidate, CosineScorer, HeadScorer, assign, build_table, gate_candidates, score_affinity,
)
from sture.errors import ContractViolation, DimensionError
from sture.geometry import BoundingBox
from sture.mutual_trainer import AffinityHead


def _table(values, track_ids=None, detection_indices=None):
    values = np.asarray(values, dtype=np.float64)
    track_ids = track_ids or list(range(values.shape[0]))
    detection_indices = detection_indices or list(range(values.shape[1]))
    return AffinityTable(track_ids, detection_indices, values)


def test_greedy_takes_the_best_pair_first():
    table = _table([[0.9, 0.85], [0.88, 0.2]])
    assert assign(table, 0.8) == {0: 0}


def test_greedy_breaks_ties_by_track_then_detection():
    table = _table([[0.9, 0.9], [0.9, 0.9]])
    assert assign(table, 0.8) == {0: 0, 1: 1}


def test_threshold_is_inclusive():
    assert assign(_table([[0.8]]), 0.8) == {0: 0}
    assert assign(_table([[0.79]]), 0.8) == {}


def test_hungarian_maximizes_the_total():
    table = _table([[0.9, 0.85], [0.88, 0.2]])
    assert assign(table, 0.8, "hungarian") == {0: 1, 1: 0}


def test_hungarian_drops_pairs_under_threshold():
    table = _table([[0.95, 0.1], [0.9, 0.3]])
    assert assign(table, 0.8, "hungarian") == {0: 0}


def test_assignment_uses_track_and_detection_ids():
    table = _table([[0.3, 0.95]], track_ids=[7], detection_indices=[11, 12])
    assert assign(table, 0.8) == {7: 12}
    assert assign(AffinityTable.empty(), 0.8) == {}
    assert assign(AffinityTable.empty(), 0.8, "hungarian") == {}


def test_unknown_method():
    with pytest.raises(ContractViolation):
        assign(_table([[1.0]]), 0.5, "auction")


def test_table_rejects_non_finite_values():
    with pytest.raises(ContractViolation):
        _table([[np.nan]])


def test_gate_keeps_nearby_free_detections():
    predicted = BoundingBox(0, 0, 30, 40)  # diagonal 50
    near = BoundingBox(60, 0, 30, 40)
    far = BoundingBox(200, 0, 30, 40)
    covered = BoundingBox(0, 50, 30, 40)
    candidates = gate_candidates(predicted, [near, far, covered], [covered], tau_d=2.0, tau_o=0.5,
                                 indices=[4, 5, 6])
    assert [c.index for c in candidates] == [4]
    assert candidates[0].gate_distance == pytest.approx(60.0)


def test_gate_limit_is_inclusive():
    predicted = BoundingBox(0, 0, 30, 40)
    edge = BoundingBox(100, 0, 30, 40)
    assert len(gate_candidates(predicted, [edge], [], tau_d=2.0, tau_o=0.5)) == 1


def test_cosine_scorer():
    scorer = CosineScorer(T=4, attention=False)
    history = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
    assert scorer.score(history, np.array([2.0, 0.0])) == pytest.approx(1.0)
    assert scorer.score(history, np.array([-1.0, 0.0])) == 0.0
    assert scorer.score(history, np.array([0.0, 0.0])) == 0.0
    assert score_affinity(history, np.array([1.0, 1.0]), scorer) == pytest.approx(np.sqrt(0.5))
    with pytest.raises(ContractViolation):
        scorer.score([], np.array([1.0, 0.0]))
    with pytest.raises(DimensionError):
        scorer.score(history, np.array([1.0, 0.0, 0.0]))


def test_scorer_pools_only_the_last_t_embeddings():
    scorer = CosineScorer(T=2, attention=False)
    history = [np.array([0.0, 1.0])] * 5 + [np.array([1.0, 0.0])] * 2
    assert scorer.score(history, np.array([1.0, 0.0])) == pytest.approx(1.0)


def test_head_scorer_returns_a_probability(rng):
    scorer = HeadScorer(AffinityHead(3, rng), T=4)
    value = scorer.score([rng.standard_normal(3) for _ in range(6)], rng.standard_normal(3))
    assert 0.0 <= value <= 1.0


def test_build_table_zero_fills_ungated_pairs():
    box = BoundingBox(0, 0, 1, 1)
    histories = {1: [np.array([1.0, 0.0])], 2: [np.array([0.0, 1.0])]}
    gated = {
        1: [Candidate(10, box, np.array([1.0, 0.0]), 0.0)],
        2: [Candidate(11, box, np.array([0.0, 1.0]), 0.0)],
    }
    table = build_table(histories, gated, CosineScorer(T=8, attention=False))
    assert table.track_ids == [1, 2]
    assert table.detection_indices == [10, 11]
    np.testing.assert_allclose(table.values, [[1.0, 0.0], [0.0, 1.0]])
    assert assign(table, 0.8) == {1: 10, 2: 11}


def test_build_table_without_candidates_is_empty():
    histories = {1: [np.array([1.0, 0.0])], 2: [np.array([0.0, 1.0])]}
    table = build_table(histories, {1: [], 2: []}, CosineScorer(T=8, attention=False))
    assert table.track_ids == [] and table.detection_indices == []
    assert table.values.shape == (0, 0)
    assert assign(table, 0.8) == {}


def test_build_table_scores_like_score_affinity(rng):
    box = BoundingBox(0, 0, 1, 1)
    scorer = HeadScorer(AffinityHead(3, rng), T=4)
    history = [rng.standard_normal(3) for _ in range(5)]
    embedding = rng.standard_normal(3)
    table = build_table({4: history}, {4: [Candidate(9, box, embedding, 0.0)]}, scorer)
    assert table.values[0, 0] == score_affinity(history, embedding, scorer)


@pytest.mark.parametrize("method", ["greedy", "hungarian"])
@pytest.mark.parametrize("seed", range(15))
def test_assignment_ignores_row_and_column_order(seed, method):
    rng = np.random.default_rng(seed)
    rows, cols = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    values = rng.uniform(0.5, 1.0, size=(rows, cols))
    track_ids = [int(t) for t in rng.choice(100, size=rows, replace=False)]
    detection_indices = [int(d) for d in rng.choice(100, size=cols, replace=False)]
    expected = assign(AffinityTable(track_ids, detection_indices, values), 0.7, method)

    row_order, col_order = rng.permutation(rows), rng.permutation(cols)
    shuffled = AffinityTable(
        [track_ids[i] for i in row_order], [detection_indices[j] for j in col_order],
        values[np.ix_(row_order, col_order)],
    )
    assert assign(shuffled, 0.7, method) == expected


@pytest.mark.parametrize("seed", range(15))
def test_wider_gate_keeps_every_candidate_of_a_narrower_one(seed):
    rng = np.random.default_rng(seed)
    predicted = BoundingBox(0, 0, 30, 40)
    boxes = [BoundingBox(x, y, 30, 40) for x, y in rng.uniform(-200, 200, size=(8, 2))]
    tracked = [BoundingBox(x, y, 30, 40) for x, y in rng.uniform(-200, 200, size=(2, 2))]
    previous = set()
    for tau_d in (0.5, 1.0, 2.0, 4.0, 8.0):
        kept = {c.index for c in gate_candidates(predicted, boxes, tracked, tau_d, 0.5)}
        assert previous <= kept
        previous = kept
