from __future__ import annotations

import io
import random
from fractions import Fraction

import pytest

from _builders import index_from
from _oracles import box_iou, brute_force_ap, brute_force_match, random_corpus
from cxraudit.annotations import LESION_LABELS, BBox, InvalidBox, MalformedRow, get_label
from cxraudit.detection_eval import (
    APResult,
    NoEvaluableClasses,
    Prediction,
    average_precision,
    evaluate_detections,
    evaluate_label,
    iou,
    match_detections,
    mean_ap,
    parse_prediction_csv,
    pool_ground_truth,
    serialize_prediction_csv,
)

ILD = get_label("ILD")


def P(score, box, image="i", label=ILD):
    return Prediction(image, label, score, BBox(*box))


def test_iou_cases():
    a = BBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    assert abs(iou(a, BBox(5, 0, 15, 10)) - 1 / 3) <= 1e-12
    assert iou(a, BBox(10, 0, 20, 10)) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_iou_properties(seed):
    rng = random.Random(seed)
    for _ in range(50):
        x0, y0 = rng.uniform(0, 50), rng.uniform(0, 50)
        a = BBox(x0, y0, x0 + rng.uniform(0.1, 30), y0 + rng.uniform(0.1, 30))
        x0, y0 = rng.uniform(0, 50), rng.uniform(0, 50)
        b = BBox(x0, y0, x0 + rng.uniform(0.1, 30), y0 + rng.uniform(0.1, 30))
        assert iou(a, b) == iou(b, a)
        assert 0 <= iou(a, b) <= 1
        assert abs(iou(a, b) - box_iou(a, b)) <= 1e-12
        assert abs(iou(a, a) - 1) <= 1e-12


def test_single_exact_match():
    out = match_detections([P(0.9, (0, 0, 10, 10))], [BBox(0, 0, 10, 10)])
    assert out.is_tp == (True,) and out.best_iou == (1.0,)


def test_two_preds_one_gt():
    out = match_detections([P(0.3, (0, 0, 10, 10)), P(0.8, (1, 0, 11, 10))], [BBox(0, 0, 10, 10)])
    assert out.is_tp == (False, True)
    assert out.gt_matched_by == (1,)


def test_threshold_is_inclusive():
    gt = [BBox(0, 0, 10, 10)]
    pred = [P(0.5, (0, 0, 10, 4))]  # IoU exactly 0.4
    assert match_detections(pred, gt, 0.4).is_tp == (True,)
    assert match_detections(pred, gt, 0.41).is_tp == (False,)


@pytest.mark.parametrize("seed", range(40))
def test_matching_against_enumeration(seed):
    rng = random.Random(seed)
    gts = []
    for _ in range(rng.randint(0, 5)):
        x, y = rng.randint(0, 20), rng.randint(0, 20)
        gts.append(BBox(x, y, x + rng.randint(4, 15), y + rng.randint(4, 15)))
    preds = []
    for _ in range(rng.randint(0, 5)):
        x, y = rng.randint(0, 20), rng.randint(0, 20)
        preds.append(P(rng.choice([0.2, 0.5, 0.5, 0.8]), (x, y, x + rng.randint(4, 15), y + rng.randint(4, 15))))
    out = match_detections(preds, gts, 0.3)
    assert list(out.matched_gt) == brute_force_match(preds, gts, 0.3)
    assert out.n_tp <= min(len(preds), len(gts))


def test_ap_five_ninths():
    r = average_precision([0.9, 0.8, 0.7, 0.6, 0.5], [True, False, True, False, False], 3)
    assert r.ap_exact == Fraction(5, 9)
    assert brute_force_ap([0.9, 0.8, 0.7, 0.6, 0.5], [True, False, True, False, False], 3) == Fraction(5, 9)


def test_ap_trivial_cases():
    assert average_precision([0.9, 0.1], [True, True], 2).ap_exact == 1
    assert average_precision([], [], 4).ap_exact == 0
    assert average_precision([0.5], [False], 0).ap_exact == 0


@pytest.mark.parametrize("seed", range(30))
def test_ap_against_envelope_oracle(seed):
    rng = random.Random(seed)
    n = rng.randint(0, 15)
    scores = [rng.choice([0.1, 0.2, 0.5, 0.9]) for _ in range(n)]
    flags = [rng.random() < 0.5 for _ in range(n)]
    n_gt = sum(flags) + rng.randint(0, 3)
    assert average_precision(scores, flags, n_gt).ap_exact == brute_force_ap(scores, flags, n_gt)


@pytest.mark.parametrize("seed", range(10))
def test_ap_invariant_under_monotone_rescoring(seed):
    rng = random.Random(seed)
    index, preds = random_corpus(rng)
    moved = [Prediction(p.image_id, p.label, p.score ** 3 / 2, p.bbox) for p in preds]
    a = evaluate_detections(preds, index)
    b = evaluate_detections(moved, index)
    assert {l: r.ap_exact for l, r in a.per_class.items()} == {l: r.ap_exact for l, r in b.per_class.items()}


@pytest.mark.parametrize("seed", range(20))
def test_ap_monotone_in_iou_threshold(seed):
    index, preds = random_corpus(random.Random(seed))
    previous = None
    for t in (0.1, 0.3, 0.4, 0.5, 0.7, 0.9):
        aps = {l: r.ap_exact for l, r in evaluate_detections(preds, index, t).per_class.items()}
        if previous:
            assert all(aps[l] <= previous[l] for l in aps)
        previous = aps


def test_pool_ground_truth_is_union():
    b1 = (0, 0, 10, 10)
    idx = index_from({"i": {"A": [("ILD", b1)], "B": [("ILD", b1)], "C": []}})
    assert pool_ground_truth(idx["i"], ILD) == [BBox(*b1), BBox(*b1)]
    assert pool_ground_truth(idx["i"], get_label("Atelectasis")) == []
    assert pool_ground_truth(None, ILD) == []


def test_predictions_on_unknown_or_clear_images_are_fp():
    idx = index_from({"i": {"A": [("ILD", (0, 0, 10, 10))]}, "j": {"A": []}})
    preds = [P(0.9, (0, 0, 10, 10)), P(0.95, (0, 0, 10, 10), image="j"), P(0.99, (0, 0, 5, 5), image="zz")]
    r = evaluate_label(preds, idx, ILD)
    assert (r.n_tp, r.n_pred, r.n_gt) == (1, 3, 1)
    assert r.ap_exact == Fraction(1, 3)


def test_perfect_detector_map():
    idx = index_from({"i": {"A": [("ILD", (0, 0, 10, 10))], "B": [("ILD", (0, 0, 10, 10)), ("Atelectasis", (5, 5, 9, 9))]},
                      "j": {"A": []}})
    preds = [Prediction(i, l, 1.0, b) for i, ann in idx.items() for r in ann.annotators for l, b in ann.boxes[r]]
    rep = evaluate_detections(preds, idx)
    assert rep.map.value == 1.0
    assert [l.name for l in rep.map.included] == ["Atelectasis", "ILD"]
    assert len(rep.map.excluded) == 12


def test_mean_ap_arithmetic():
    labels = LESION_LABELS
    res = {}
    res[labels[0]] = APResult(labels[0], Fraction(1, 5), 3, 0, 0, (), ())
    res[labels[1]] = APResult(labels[1], Fraction(2, 5), 3, 0, 0, (), ())
    for l in labels[2:]:
        res[l] = APResult(l, Fraction(0), 0, 0, 0, (), ())
    assert mean_ap(res).value == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(NoEvaluableClasses):
        mean_ap({l: APResult(l, Fraction(0), 0, 0, 0, (), ()) for l in labels})


def test_prediction_csv_round_trip_and_errors():
    preds = [P(0.25, (1.5, 2, 3, 4)), P(1.0, (0, 0, 1, 1), image="k", label=get_label("Other lesion"))]
    buf = io.StringIO()
    serialize_prediction_csv(preds, buf)
    assert parse_prediction_csv(io.StringIO(buf.getvalue())) == preds
    head = "image_id,class_name,score,x_min,y_min,x_max,y_max\n"
    for body, err, row in [("a,ILD,1.5,0,0,1,1\n", MalformedRow, 2),
                           ("a,ILD,x,0,0,1,1\n", MalformedRow, 2),
                           ("a,ILD,0.5,0,0,1,1\na,No finding,0.5,,,,\n", MalformedRow, 3),
                           ("a,ILD,0.5,3,0,1,1\n", InvalidBox, 2)]:
        with pytest.raises(err) as info:
            parse_prediction_csv(io.StringIO(head + body))
        assert info.value.row == row
