"""Detection scoring against pooled multi-annotator ground truth."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence, TextIO

from .annotations import (
    LESION_LABELS,
    BBox,
    ClassLabel,
    ImageAnnotations,
    ImageIndex,
    InvalidBox,
    MalformedRow,
    UnknownClassName,
    UnknownLabel,
    format_float,
    get_label,
    iter_rows,
    parse_coords,
)

DEFAULT_IOU_THRESHOLD = 0.4


def iou(a: BBox, b: BBox) -> float:
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Prediction:
    image_id: str
    label: ClassLabel
    score: float
    bbox: BBox

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite and in [0, 1], got {self.score}")
        if not self.label.is_lesion:
            raise ValueError("predictions cannot carry the 'No finding' label")


PREDICTION_COLUMNS = ("image_id", "class_name", "score", "x_min", "y_min", "x_max", "y_max")


def parse_prediction_csv(stream: TextIO) -> list[Prediction]:
    preds = []
    for line, row in iter_rows(stream, PREDICTION_COLUMNS):
        image_id = row["image_id"].strip()
        if not image_id:
            raise MalformedRow("image_id must be non-empty", line)
        name = row["class_name"].strip()
        try:
            label = get_label(name)
        except UnknownLabel:
            raise UnknownClassName(f"{name!r} is not in the taxonomy", line) from None
        if not label.is_lesion:
            raise MalformedRow("predictions cannot use 'No finding'", line)
        try:
            score = float(row["score"])
        except ValueError:
            raise MalformedRow(f"score {row['score']!r} is not a number", line) from None
        if not math.isfinite(score) or not 0.0 <= score <= 1.0:
            raise MalformedRow(f"score {score} outside [0, 1]", line)
        bbox = parse_coords(row, line)
        if bbox is None:
            raise InvalidBox("prediction has no coordinates", line)
        preds.append(Prediction(image_id, label, score, bbox))
    return preds


def serialize_prediction_csv(preds: Iterable[Prediction], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PREDICTION_COLUMNS)
    for p in preds:
        writer.writerow([p.image_id, p.label.name, format_float(p.score),
                         *(format_float(c) for c in p.bbox.as_tuple())])


def load_predictions(path) -> list[Prediction]:
    with open(path, newline="", encoding="utf-8") as fp:
        return parse_prediction_csv(fp)


def pool_ground_truth(image_annotations: Optional[ImageAnnotations], label: ClassLabel) -> list[BBox]:
    """Every annotator's boxes of ``label``, concatenated without merging."""
    if image_annotations is None:
        return []
    pool = []
    for rad in image_annotations.annotators:
        pool.extend(image_annotations.boxes_of(rad, label))
    return pool


@dataclass(frozen=True)
class MatchOutcome:
    """Per-prediction results are in the caller's input order."""

    is_tp: tuple[bool, ...]
    matched_gt: tuple[Optional[int], ...]
    best_iou: tuple[float, ...]
    gt_matched_by: tuple[Optional[int], ...]

    @property
    def n_tp(self) -> int:
        return sum(self.is_tp)


def match_detections(preds: Sequence[Prediction], gt_pool: Sequence[BBox],
                     iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> MatchOutcome:
    """Greedy one-to-one matching in descending score order.

    Ties in score keep input order. Each prediction takes the still-unmatched
    box with the largest IoU at or above the threshold (lowest index on ties).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    is_tp = [False] * len(preds)
    matched: list[Optional[int]] = [None] * len(preds)
    best = [0.0] * len(preds)
    taken: list[Optional[int]] = [None] * len(gt_pool)
    for i in order:
        overlaps = [iou(preds[i].bbox, g) for g in gt_pool]
        best[i] = max(overlaps, default=0.0)
        choice, choice_iou = None, -1.0
        for j, v in enumerate(overlaps):
            if taken[j] is None and v >= iou_threshold and v > choice_iou:
                choice, choice_iou = j, v
        if choice is not None:
            taken[choice] = i
            matched[i] = choice
            is_tp[i] = True
            best[i] = choice_iou
    return MatchOutcome(tuple(is_tp), tuple(matched), tuple(best), tuple(taken))


@dataclass(frozen=True)
class APResult:
    label: Optional[ClassLabel]
    ap_exact: Fraction
    n_gt: int
    n_pred: int
    n_tp: int
    recall: tuple[float, ...]
    precision: tuple[float, ...]

    @property
    def ap(self) -> float:
        return float(self.ap_exact)

    @property
    def evaluable(self) -> bool:
        return self.n_gt > 0 or self.n_pred > 0


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int,
                      label: Optional[ClassLabel] = None) -> APResult:
    """All-points interpolated AP over score-ranked outcomes.

    Ranking is by descending score with input position breaking ties. The
    envelope replaces each precision by the best precision at any later
    rank; the area is summed over recall steps with exact rationals.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    flags = [bool(is_tp[i]) for i in order]
    n = len(flags)
    tp_cum = []
    tp = 0
    for f in flags:
        tp += f
        tp_cum.append(tp)
    if n_gt == 0 or tp == 0:
        recall = tuple(0.0 if n_gt == 0 else c / n_gt for c in tp_cum)
        precision = tuple(c / (k + 1) for k, c in enumerate(tp_cum))
        return APResult(label, Fraction(0), n_gt, n, tp, recall, precision)

    envelope: list[Fraction] = [Fraction(0)] * n
    running = Fraction(0)
    for k in range(n - 1, -1, -1):
        p = Fraction(tp_cum[k], k + 1)
        if p > running:
            running = p
        envelope[k] = running
    area = Fraction(0)
    prev_recall_count = 0
    for k in range(n):
        step = tp_cum[k] - prev_recall_count
        if step:
            area += step * envelope[k]
            prev_recall_count = tp_cum[k]
    ap = area / n_gt
    recall = tuple(c / n_gt for c in tp_cum)
    precision = tuple(c / (k + 1) for k, c in enumerate(tp_cum))
    return APResult(label, ap, n_gt, n, tp, recall, precision)


class NoEvaluableClasses(ValueError):
    pass


@dataclass(frozen=True)
class MeanAP:
    value: float
    included: tuple[ClassLabel, ...]
    excluded: tuple[ClassLabel, ...]


def mean_ap(results: Mapping[ClassLabel, APResult]) -> MeanAP:
    """Unweighted mean over classes that have ground truth or predictions."""
    included = sorted(l for l, r in results.items() if r.evaluable)
    excluded = sorted(l for l, r in results.items() if not r.evaluable)
    if not included:
        raise NoEvaluableClasses("no class has ground truth or predictions")
    total = sum((results[l].ap_exact for l in included), Fraction(0))
    return MeanAP(float(total / len(included)), tuple(included), tuple(excluded))


def evaluate_label(preds: Sequence[Prediction], index: ImageIndex, label: ClassLabel,
                   iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> APResult:
    """Match per image, then sweep the corpus-wide ranking for one class.

    Predictions on images without any box of the class (including images
    missing from the index) are false positives.
    """
    by_image: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(preds):
        if p.label == label:
            by_image[p.image_id].append(i)
    n_gt = sum(len(pool_ground_truth(ann, label)) for ann in index.values())
    scores, flags = [], []
    for image_id in sorted(by_image):
        members = by_image[image_id]
        outcome = match_detections([preds[i] for i in members],
                                   pool_ground_truth(index.get(image_id), label),
                                   iou_threshold)
        for i, tp in zip(members, outcome.is_tp):
            scores.append((preds[i].score, i))
            flags.append(tp)
    # re-rank by (score desc, global input position)
    order = sorted(range(len(scores)), key=lambda k: (-scores[k][0], scores[k][1]))
    return average_precision([scores[k][0] for k in order], [flags[k] for k in order],
                             n_gt, label)


@dataclass(frozen=True)
class DetectionReport:
    iou_threshold: float
    per_class: dict
    map: Optional[MeanAP]


def evaluate_detections(preds: Sequence[Prediction], index: ImageIndex,
                        iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                        labels: Iterable[ClassLabel] = LESION_LABELS) -> DetectionReport:
    per_class = {l: evaluate_label(preds, index, l, iou_threshold) for l in labels}
    try:
        summary = mean_ap(per_class)
    except NoEvaluableClasses:
        summary = None
    return DetectionReport(iou_threshold, per_class, summary)
