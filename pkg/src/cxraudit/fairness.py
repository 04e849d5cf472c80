"""Image-level parity audit over age and sex subgroups."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from .annotations import LESION_LABELS, ClassLabel, ImageIndex
from .detection_eval import Prediction
from .dicom_meta import DicomHeader, SexCategory, normalize_sex, parse_age

DEFAULT_AGE_SPLIT = 50
DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_GAP_THRESHOLD = 0.1
DEFAULT_MIN_SUPPORT = 30

AGE_GROUPS = ("missing", "young", "old")
SEX_GROUPS = tuple(c.value for c in SexCategory)
FEATURES = ("age", "sex")
METRICS = ("ppv", "tpr", "fpr", "positive_rate")


def age_group(header: Optional[DicomHeader], age_split: int = DEFAULT_AGE_SPLIT) -> str:
    """Out-of-range and malformed ages count as missing."""
    if header is None:
        return "missing"
    parsed = parse_age(header.patient_age_raw)
    if not parsed.valid:
        return "missing"
    return "young" if parsed.years < age_split else "old"


def sex_group(header: Optional[DicomHeader]) -> str:
    if header is None:
        return SexCategory.MISSING.value
    return normalize_sex(header.patient_sex_raw).value


def subgroup_assign(header: Optional[DicomHeader], feature: str,
                    age_split: int = DEFAULT_AGE_SPLIT) -> str:
    if feature == "age":
        return age_group(header, age_split)
    if feature == "sex":
        return sex_group(header)
    raise ValueError(f"unknown feature {feature!r}")


def feature_groups(feature: str) -> tuple[str, ...]:
    return AGE_GROUPS if feature == "age" else SEX_GROUPS


def binarize_image_level(preds: Iterable[Prediction], index: ImageIndex, label: ClassLabel,
                         score_threshold: float = DEFAULT_SCORE_THRESHOLD) -> dict[str, tuple[bool, bool]]:
    """(predicted, actual) per indexed image; box locations are ignored."""
    hit = {p.image_id for p in preds if p.label == label and p.score >= score_threshold}
    return {
        image_id: (image_id in hit, label in ann.labels)
        for image_id, ann in index.items()
    }


def _ratio(num: int, den: int) -> Optional[Fraction]:
    return Fraction(num, den) if den else None


@dataclass(frozen=True)
class SubgroupMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def support(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def ppv(self) -> Optional[Fraction]:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def tpr(self) -> Optional[Fraction]:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> Optional[Fraction]:
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def positive_rate(self) -> Optional[Fraction]:
        return _ratio(self.tp + self.fp, self.support)

    def denominators(self) -> dict[str, int]:
        return {
            "ppv": self.tp + self.fp,
            "tpr": self.tp + self.fn,
            "fpr": self.fp + self.tn,
            "positive_rate": self.support,
        }

    def metric(self, name: str) -> Optional[Fraction]:
        return getattr(self, name)

    def __add__(self, other: "SubgroupMetrics") -> "SubgroupMetrics":
        return SubgroupMetrics(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def parity_metrics(pairs: Mapping[str, tuple[bool, bool]],
                   subgroups: Mapping[str, str]) -> dict[str, SubgroupMetrics]:
    counts = defaultdict(lambda: [0, 0, 0, 0])
    for image_id, (predicted, actual) in pairs.items():
        cell = counts[subgroups[image_id]]
        if predicted and actual:
            cell[0] += 1
        elif predicted:
            cell[1] += 1
        elif actual:
            cell[3] += 1
        else:
            cell[2] += 1
    return {g: SubgroupMetrics(*counts[g]) for g in sorted(counts)}


@dataclass(frozen=True)
class ParityReport:
    score_threshold: float
    min_support: int
    age_split: int
    # label -> feature -> subgroup -> metrics
    cells: dict

    def gaps(self, label: ClassLabel, feature: str) -> dict[str, Optional[tuple]]:
        """Per metric: (gap, (low_group, low), (high_group, high)) or None.

        Only subgroups with support >= min_support and a defined metric take part.
        """
        groups = self.cells[label][feature]
        out = {}
        for metric in METRICS:
            vals = [(g, m.metric(metric)) for g, m in groups.items()
                    if m.support >= self.min_support and m.metric(metric) is not None]
            if len(vals) < 2:
                out[metric] = None
                continue
            low = min(vals, key=lambda gv: (gv[1], gv[0]))
            high = max(vals, key=lambda gv: (gv[1], gv[0]))
            out[metric] = (high[1] - low[1], low, high)
        return out


def audit_fairness(preds: Sequence[Prediction], index: ImageIndex,
                   headers: Mapping[str, Optional[DicomHeader]],
                   score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                   min_support: int = DEFAULT_MIN_SUPPORT,
                   age_split: int = DEFAULT_AGE_SPLIT,
                   labels: Iterable[ClassLabel] = LESION_LABELS) -> ParityReport:
    """Run the per-class binary check for every lesion class and feature.

    Images with no header land in the missing subgroups.
    """
    groups = {
        feature: {i: subgroup_assign(headers.get(i), feature, age_split) for i in index}
        for feature in FEATURES
    }
    cells = {}
    for label in labels:
        pairs = binarize_image_level(preds, index, label, score_threshold)
        cells[label] = {f: parity_metrics(pairs, groups[f]) for f in FEATURES}
    return ParityReport(score_threshold, min_support, age_split, cells)


@dataclass(frozen=True)
class ParityFlag:
    label: ClassLabel
    feature: str
    metric: str
    gap: Fraction
    low_group: str
    low_value: Fraction
    high_group: str
    high_value: Fraction

    @property
    def message(self) -> str:
        return (f"{self.label.name}: {self.metric} gap {float(self.gap):.3f} across {self.feature} "
                f"({self.low_group} {float(self.low_value):.3f} vs "
                f"{self.high_group} {float(self.high_value):.3f})")


def parity_flags(report: ParityReport, gap_threshold: float = DEFAULT_GAP_THRESHOLD,
                 min_support: Optional[int] = None) -> list[ParityFlag]:
    if min_support is not None and min_support != report.min_support:
        report = ParityReport(report.score_threshold, min_support, report.age_split, report.cells)
    threshold = Fraction(gap_threshold)
    flags = []
    for label in sorted(report.cells):
        for feature in FEATURES:
            for metric, gap in report.gaps(label, feature).items():
                if gap is None or gap[0] <= threshold:
                    continue
                (value, (lg, lv), (hg, hv)) = gap
                flags.append(ParityFlag(label, feature, metric, value, lg, lv, hg, hv))
    return flags
