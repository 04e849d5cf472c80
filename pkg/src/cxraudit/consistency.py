"""Annotator workload, label-set agreement, class overlap and box granularity."""

from __future__ import annotations

import csv
import random
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Mapping, Optional, TextIO

import numpy as np

from .annotations import (
    LESION_LABELS,
    NO_FINDING,
    BBox,
    ClassLabel,
    ImageIndex,
    Taxonomy,
    all_annotators,
    rad_sort_key,
)
from .detection_eval import iou
from .dicom_meta import DicomHeader
from .fairness import AGE_GROUPS, DEFAULT_AGE_SPLIT, SEX_GROUPS, age_group, sex_group

DEFAULT_COLOCATION_IOU = 0.5
DEFAULT_CONTAINMENT = 0.9
DEFAULT_REVIEW_N = 10


@dataclass
class RadWorkload:
    total: int = 0
    finding: int = 0
    no_finding: int = 0
    by_sex: dict = field(default_factory=lambda: {g: 0 for g in SEX_GROUPS})
    by_age: dict = field(default_factory=lambda: {g: 0 for g in AGE_GROUPS})


def workload_summary(index: ImageIndex, headers: Mapping[str, Optional[DicomHeader]],
                     age_split: int = DEFAULT_AGE_SPLIT) -> dict[str, RadWorkload]:
    """Images per annotator, split by finding status, sex and age bin."""
    summary: dict[str, RadWorkload] = {}
    for image_id, ann in index.items():
        header = headers.get(image_id)
        sex, age = sex_group(header), age_group(header, age_split)
        for rad in ann.annotators:
            w = summary.setdefault(rad, RadWorkload())
            w.total += 1
            if ann.has_finding(rad):
                w.finding += 1
            else:
                w.no_finding += 1
            w.by_sex[sex] += 1
            w.by_age[age] += 1
    return {r: summary[r] for r in sorted(summary, key=rad_sort_key)}


@dataclass(frozen=True)
class AgreementRates:
    rad_id: str
    n_images: int
    n_at_least_one: int
    n_both_all: int

    @property
    def at_least_one(self) -> Optional[Fraction]:
        return Fraction(self.n_at_least_one, self.n_images) if self.n_images else None

    @property
    def both_all(self) -> Optional[Fraction]:
        return Fraction(self.n_both_all, self.n_images) if self.n_images else None


@dataclass(frozen=True)
class GroupAgreement:
    group: str
    members: tuple[str, ...]
    rates: AgreementRates


@dataclass(frozen=True)
class AgreementResult:
    per_rad: dict
    groups: dict


class UnknownRadInGroups(ValueError):
    pass


def agreement_rates(index: ImageIndex,
                    groups: Optional[Mapping[str, list]] = None) -> AgreementResult:
    """Label-set agreement of each annotator with co-annotators.

    An image a single annotator labelled counts as agreement under both
    definitions. Group rates pool the members' image counts.
    """
    n = defaultdict(int)
    at_least = defaultdict(int)
    both = defaultdict(int)
    for ann in index.values():
        for rad in ann.annotators:
            mine = ann.label_sets[rad]
            others = [ann.label_sets[o] == mine for o in ann.annotators if o != rad]
            n[rad] += 1
            at_least[rad] += (not others) or any(others)
            both[rad] += all(others)
    per_rad = {
        r: AgreementRates(r, n[r], at_least[r], both[r]) for r in sorted(n, key=rad_sort_key)
    }
    group_rates = {}
    for name, members in (groups or {}).items():
        unknown = [m for m in members if m not in per_rad]
        if unknown:
            raise UnknownRadInGroups(f"group {name!r} lists annotators not in the corpus: {unknown}")
        members = tuple(sorted(members, key=rad_sort_key))
        pooled = AgreementRates(
            name,
            sum(per_rad[m].n_images for m in members),
            sum(per_rad[m].n_at_least_one for m in members),
            sum(per_rad[m].n_both_all for m in members),
        )
        group_rates[name] = GroupAgreement(name, members, pooled)
    return AgreementResult(per_rad, group_rates)


@dataclass(frozen=True)
class Cooccurrence:
    labels: tuple[ClassLabel, ...]
    counts: np.ndarray
    pair_iou: dict
    overlap_pairs: tuple[tuple[ClassLabel, ClassLabel], ...]

    def count(self, a: ClassLabel, b: ClassLabel) -> int:
        pos = {l: i for i, l in enumerate(self.labels)}
        return int(self.counts[pos[a], pos[b]])

    def mean_iou(self, a: ClassLabel, b: ClassLabel) -> Optional[float]:
        key = tuple(sorted((a, b)))
        n, total = self.pair_iou.get(key, (0, 0.0))
        return total / n if n else None


def class_cooccurrence(index: ImageIndex, taxonomy: Taxonomy,
                       iou_threshold: float = DEFAULT_COLOCATION_IOU) -> Cooccurrence:
    """Cross-annotator, cross-class co-located box events.

    Each unordered annotator pair on an image is visited once; an event is a
    box pair of different classes with IoU at or above the threshold. The
    returned matrix is the symmetrized count.
    """
    labels = tuple(l for l in taxonomy.labels if l.is_lesion)
    pos = {l: i for i, l in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)), dtype=np.int64)
    pair_iou: dict = defaultdict(lambda: [0, 0.0])
    for ann in index.values():
        for a, b in combinations(ann.annotators, 2):
            for la, ba in ann.boxes[a]:
                for lb, bb in ann.boxes[b]:
                    if la == lb:
                        continue
                    v = iou(ba, bb)
                    if v >= iou_threshold:
                        m[pos[la], pos[lb]] += 1
                        stats = pair_iou[tuple(sorted((la, lb)))]
                        stats[0] += 1
                        stats[1] += v
    sym = m + m.T
    return Cooccurrence(labels, sym, {k: tuple(v) for k, v in sorted(pair_iou.items())},
                        tuple(taxonomy.sorted_pairs()))


def containment(small: BBox, big: BBox) -> float:
    return small.intersection_area(big) / small.area


@dataclass(frozen=True)
class GranularityConflict:
    image_id: str
    label: ClassLabel
    coarse_rad: str
    fine_rad: str
    coarse_box: BBox
    contained_boxes: tuple[BBox, ...]


def granularity_conflicts(index: ImageIndex,
                          containment_threshold: float = DEFAULT_CONTAINMENT) -> list[GranularityConflict]:
    """Cases where one annotator's box swallows two or more of a colleague's."""
    if not 0 < containment_threshold <= 1:
        raise ValueError("containment_threshold must be in (0, 1]")
    found = []
    for image_id in sorted(index):
        ann = index[image_id]
        for label in LESION_LABELS:
            per_rad = {r: ann.boxes_of(r, label) for r in ann.annotators}
            for coarse in ann.annotators:
                for fine in ann.annotators:
                    if coarse == fine or not per_rad[fine]:
                        continue
                    for big in per_rad[coarse]:
                        inside = tuple(s for s in per_rad[fine]
                                       if containment(s, big) >= containment_threshold)
                        if len(inside) >= 2:
                            found.append(GranularityConflict(image_id, label, coarse, fine, big, inside))
    return found


@dataclass(frozen=True)
class ReviewWorksheet:
    seed: int
    n_per_rad: int
    samples: dict

    def to_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["rad_id", "image_id", "verdict", "notes"])
        for rad, images in self.samples.items():
            for image_id in images:
                writer.writerow([rad, image_id, "", ""])


def no_finding_images(index: ImageIndex, rad_id: str) -> list[str]:
    return sorted(i for i, ann in index.items()
                  if rad_id in ann.label_sets and ann.label_sets[rad_id] == {NO_FINDING})


def sample_no_finding_review(index: ImageIndex, n_per_rad: int = DEFAULT_REVIEW_N,
                             seed: int = 0) -> ReviewWorksheet:
    """Per annotator, draw up to ``n_per_rad`` of their 'No finding' images.

    Each annotator gets its own generator seeded from (seed, rad_id), so a
    draw does not change when other annotators are added or removed.
    """
    if n_per_rad < 1:
        raise ValueError("n_per_rad must be >= 1")
    samples = {}
    for rad in all_annotators(index):
        pool = no_finding_images(index, rad)
        rng = random.Random(f"{seed}:{rad}")
        samples[rad] = tuple(sorted(rng.sample(pool, min(n_per_rad, len(pool)))))
    return ReviewWorksheet(seed, n_per_rad, samples)


def tally_review(stream: TextIO, error_verdicts=("error", "wrong", "missed")) -> dict[str, int]:
    """Count images judged wrongly annotated per annotator in a filled worksheet."""
    counts: dict[str, int] = {}
    for row in csv.DictReader(stream):
        rad = row["rad_id"]
        counts.setdefault(rad, 0)
        if (row.get("verdict") or "").strip().lower() in error_verdicts:
            counts[rad] += 1
    return {r: counts[r] for r in sorted(counts, key=rad_sort_key)}
