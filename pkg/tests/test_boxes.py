import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nightlift.boxes import BoxSet, EvalConfig, average_precision, evaluate, iou, nms
from nightlift.errors import ConfigError
from oracles import brute_force_ap


def test_iou_cases():
    a = [0, 0, 2, 2]
    assert iou(a, a) == 1.0
    assert iou(a, [3, 3, 4, 4]) == 0.0
    assert iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        iou([0, 0, 0, 1], a)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 20), min_size=8, max_size=8))
def test_iou_symmetric_and_bounded(v):
    a = [min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 0.5, max(v[2], v[3]) + 0.5]
    b = [min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 0.5, max(v[6], v[7]) + 0.5]
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0


def test_iou_monotone_under_shrinking_intersection():
    a = [0, 0, 10, 10]
    values = [iou(a, [s, 0, s + 10, 10]) for s in range(0, 11)]
    assert all(x >= y for x, y in zip(values, values[1:]))


def test_boxset_validation():
    with pytest.raises(ValueError):
        BoxSet([[2, 0, 1, 1]])
    with pytest.raises(ValueError):
        BoxSet([[0, 0, 1, 1]], [0], [0.5, 0.4])
    bs = BoxSet.from_rows([[0, 0, 4, 5, 0], [1, 1, 3, 3, 2]])
    assert bs.to_rows() == [[0.0, 0.0, 4.0, 5.0, 0], [1.0, 1.0, 3.0, 3.0, 2]]


def test_eval_config_bounds():
    with pytest.raises(ConfigError):
        EvalConfig(iou_threshold=1.0)


def test_perfect_and_half_recall():
    gt = BoxSet([[0, 0, 10, 10]])
    assert average_precision([BoxSet([[0, 0, 10, 10]], [0], [0.9])], [gt]) == 1.0
    gt2 = BoxSet([[0, 0, 10, 10], [20, 20, 30, 30]])
    assert average_precision([BoxSet([[0, 0, 10, 10]], [0], [0.9])], [gt2]) == pytest.approx(0.5)


def test_empty_cases():
    assert average_precision([BoxSet()], [BoxSet()]) == 1.0
    assert average_precision([BoxSet([[0, 0, 1, 1]], [0], [0.3])], [BoxSet()]) == 0.0
    assert average_precision([BoxSet()], [BoxSet([[0, 0, 1, 1]])]) == 0.0


def test_eleven_point_mode():
    gt = BoxSet([[0, 0, 10, 10], [20, 20, 30, 30]])
    pred = BoxSet([[0, 0, 10, 10]], [0], [0.9])
    assert average_precision([pred], [gt], EvalConfig(eleven_point=True)) == pytest.approx(6 / 11)


def random_scene(rng, max_boxes=8, n_classes=2):
    n_gt = int(rng.integers(0, max_boxes + 1))
    xy = rng.uniform(0, 40, size=(n_gt, 2))
    wh = rng.uniform(4, 15, size=(n_gt, 2))
    gt = BoxSet(np.hstack([xy, xy + wh]), rng.integers(0, n_classes, n_gt))
    preds = []
    for b, c in zip(gt.boxes, gt.classes):
        if rng.random() < 0.7:
            preds.append((b + rng.normal(0, 2, 4), c))
    for _ in range(int(rng.integers(0, 4))):
        p = rng.uniform(0, 40, 2)
        preds.append((np.hstack([p, p + rng.uniform(4, 15, 2)]), int(rng.integers(0, n_classes))))
    preds = preds[:max_boxes]
    boxes = np.array([p[0] for p in preds]).reshape(-1, 4)
    boxes[:, 2:] = np.maximum(boxes[:, 2:], boxes[:, :2] + 0.5)
    pred = BoxSet(boxes, [p[1] for p in preds], rng.random(len(preds)))
    return pred, gt


def to_oracle(preds, gts):
    p = [[(b, int(c), float(s)) for b, c, s in zip(x.boxes, x.classes, x.scores)] for x in preds]
    g = [[(b, int(c)) for b, c in zip(x.boxes, x.classes)] for x in gts]
    return p, g


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    scenes = [random_scene(rng) for _ in range(int(rng.integers(1, 5)))]
    preds, gts = [s[0] for s in scenes], [s[1] for s in scenes]
    result = evaluate(preds, gts)
    op, og = to_oracle(preds, gts)
    for cls, ap in result["per_class"].items():
        assert ap == pytest.approx(brute_force_ap(op, og, 0.5, cls), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_false_positive_never_helps_true_positive_never_hurts(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_scene(rng, n_classes=1)
    base = average_precision([pred], [gt])
    assert 0.0 <= base <= 1.0
    # a far-away false positive at a random score
    fp = BoxSet(np.vstack([pred.boxes, [[100, 100, 110, 110]]]), np.append(pred.classes, 0),
                np.append(pred.scores, rng.random()))
    assert average_precision([fp], [gt]) <= base + 1e-12
    # an exact hit on an unmatched GT at the lowest score
    if len(gt):
        tp = BoxSet(np.vstack([pred.boxes, gt.boxes[:1]]), np.append(pred.classes, 0),
                    np.append(pred.scores, pred.scores.min() / 2 if len(pred) else 0.5))
        assert average_precision([tp], [gt]) >= base - 1e-12


def test_nms_removes_duplicates():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [20, 20, 30, 30]], dtype=float)
    keep = nms(boxes, np.array([0.9, 0.9, 0.5]), 0.5)
    assert keep.tolist() == [0, 2]
