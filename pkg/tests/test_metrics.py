import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radcon.metrics import MetricsError, MetricsReport, average_precision, evaluate, instance_iou, map_at_iou, mean_coverage

from oracles import ap_reference, coverage_reference, random_scene


def test_iou_examples():
    assert instance_iou([1, 2, 3], [2, 3, 4]) == 0.5
    assert instance_iou([1, 2], [1, 2]) == 1.0
    assert instance_iou([1], [2]) == 0.0
    with pytest.raises(MetricsError):
        instance_iou([], [1])


def test_perfect_prediction_scores_one():
    gt = [[(0, [0, 1, 2]), (1, [3, 4])], [(2, [0])]]
    pred = [[(c, idx, 0.9) for c, idx in frame] for frame in gt]
    assert mean_coverage(gt, pred)[1] == 1.0
    assert map_at_iou(gt, pred)[1] == 1.0


def test_empty_and_wrong_class_score_zero():
    gt = [[(0, [0, 1, 2]), (1, [3, 4])]]
    assert mean_coverage(gt, [[]])[1] == 0.0
    assert map_at_iou(gt, [[]])[1] == 0.0
    wrong = [[(1, [0, 1, 2], 0.9), (0, [3, 4], 0.8)]]
    assert mean_coverage(gt, wrong)[1] == 0.0
    assert map_at_iou(gt, wrong)[1] == 0.0


def test_ap_all_points_interpolation():
    # TP, FP, TP with 2 GT: precision 1, 1/2, 2/3 -> 0.5*1 + 0.5*2/3
    assert average_precision(np.array([1, 0, 1]), 2) == pytest.approx(0.5 + 1 / 3)
    with pytest.raises(MetricsError):
        average_precision(np.array([1]), 0)


def test_duplicate_predictions_count_once():
    gt = [[(0, [0, 1, 2, 3])]]
    pred = [[(0, [0, 1, 2, 3], 0.9), (0, [0, 1, 2], 0.8)]]
    ap, _ = map_at_iou(gt, pred)
    assert ap[0] == 1.0
    assert map_at_iou(gt, [[(0, [0, 1, 2], 0.7), (0, [0, 1, 2, 3], 0.9)]])[0][0] == 1.0


@pytest.mark.parametrize("seed", range(50))
def test_matches_exhaustive_evaluator(seed):
    gt, pred = random_scene(np.random.default_rng(seed), n_frames=3)
    cov, mcov = mean_coverage(gt, pred)
    ref_cov, ref_mcov = coverage_reference(gt, pred)
    assert abs(mcov - ref_mcov) < 1e-12
    for c in ref_cov:
        assert abs(cov[c] - ref_cov[c]) < 1e-12
    ap, mean_ap = map_at_iou(gt, pred)
    ref_ap, ref_map = ap_reference(gt, pred)
    assert abs(mean_ap - ref_map) < 1e-12
    for c in ref_ap:
        assert abs(ap[c] - ref_ap[c]) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_invariant_to_frame_and_prediction_order(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_scene(rng, n_frames=3)
    order = rng.permutation(3)
    gt2 = [gt[i] for i in order]
    pred2 = [[p[i] for i in rng.permutation(len(p))] for p in (pred[i] for i in order)]
    assert mean_coverage(gt, pred)[1] == pytest.approx(mean_coverage(gt2, pred2)[1], abs=1e-12)
    # distinct confidences make the ranking order-free
    if all(len({c for *_, c in p}) == len(p) for p in pred):
        confs = [c for p in pred for *_, c in p]
        if len(set(confs)) == len(confs):
            assert map_at_iou(gt, pred)[1] == pytest.approx(map_at_iou(gt2, pred2)[1], abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_extra_predictions_never_lower_coverage(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_scene(rng, n_frames=2)
    more = [p + [(int(rng.integers(0, 3)), [0], 0.1)] for p in pred]
    assert mean_coverage(gt, more)[1] >= mean_coverage(gt, pred)[1]


def test_report_roundtrip(tmp_path):
    gt, pred = random_scene(np.random.default_rng(1), n_frames=4)
    report = evaluate(gt, pred)
    report.write(tmp_path / "m.jsonl")
    back = MetricsReport.read(tmp_path / "m.jsonl")
    assert back == report
    assert "mAP0.5" in report.summary()
